#include "guided_attn/eval/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/common/random.hpp"

namespace guided_attn::eval {

namespace nc = numcore;
using model::Stage;

std::vector<ScenarioSpec> default_scenarios() {
  return {{"External-B", {"A", "C", "D"}, "B"}, {"External-C", {"A", "B", "D"}, "C"},
          {"External-D", {"A", "B", "C"}, "D"}};
}

std::vector<phantom::CohortSpec> ExperimentConfig::resolved_cohorts() const {
  return cohorts.empty() ? phantom::default_cohorts(cohort_scale, data_seed) : cohorts;
}

void ExperimentConfig::validate() const {
  model.validate();
  const auto& crop = pipeline.geometry.crop;
  if (model.input[1] != crop[0] || model.input[2] != crop[1] || model.input[3] != crop[2] || model.input[0] != 3) {
    throw UsageError("model input must be 3 x crop");
  }
  for (std::size_t k = 0; k < stages.size(); ++k) {
    stages[k].validate();
    if (stages[k].stage != static_cast<int>(k) + 1) throw UsageError("stages must be listed as 1, 2, 3");
  }
  if (seeds.empty()) throw UsageError("at least one seed is required");
  if (scenarios.empty()) throw UsageError("at least one scenario is required");
  std::set<std::string> tags;
  for (const auto& c : resolved_cohorts()) tags.insert(c.tag);
  for (const auto& s : scenarios) {
    if (!tags.count(s.test_cohort)) throw UsageError("scenario " + s.name + ": unknown test cohort " + s.test_cohort);
    if (s.train_cohorts.empty()) throw UsageError("scenario " + s.name + ": no training cohorts");
    for (const auto& t : s.train_cohorts) {
      if (!tags.count(t)) throw UsageError("scenario " + s.name + ": unknown training cohort " + t);
      if (t == s.test_cohort) throw UsageError("scenario " + s.name + ": test cohort listed for training");
    }
  }
  if (val_fraction <= 0.0 || val_fraction >= 1.0) throw UsageError("val_fraction must lie in (0, 1)");
}

std::vector<double> predict_positive(const model::GuidedAttentionNet<float>& net,
                                     std::span<const nc::Tensor<float>> params, std::span<const Sample> samples,
                                     Stage stage) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(net.forward(params, s.volume, &s.clinical, stage).probabilities[1]);
  return out;
}

nc::Tensor<float> attention_map(const model::GuidedAttentionNet<float>& net, std::span<const nc::Tensor<float>> params,
                                const Sample& sample) {
  return net.early_attention(params, net.encode(params, sample.volume)).map;
}

double mean_attention_mass(const model::GuidedAttentionNet<float>& net, std::span<const nc::Tensor<float>> params,
                           std::span<const Sample> samples, double dilation) {
  if (samples.empty()) throw UsageError("mean_attention_mass: no samples");
  double total = 0.0;
  for (const auto& s : samples) total += attention_mass_in_mask(attention_map(net, params, s), s.mask, dilation);
  return total / static_cast<double>(samples.size());
}

TensorF imaging_features(const model::GuidedAttentionNet<float>& net, std::span<const nc::Tensor<float>> params,
                         std::span<const Sample> samples) {
  const std::size_t d = net.config().late_dim;
  std::vector<float> out;
  out.reserve(samples.size() * d);
  for (const auto& s : samples) {
    const auto z = net.forward(params, s.volume, nullptr, Stage::kGuided).late_summary;
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  return TensorF({samples.size(), d}, std::move(out));
}

TensorF clinical_features(std::span<const Sample> samples) {
  if (samples.empty()) throw UsageError("clinical_features: no samples");
  const std::size_t k = samples.front().clinical.numel();
  std::vector<float> out;
  out.reserve(samples.size() * k);
  for (const auto& s : samples) {
    if (s.clinical.numel() != k) throw DataError("clinical_features: inconsistent clinical vector length");
    out.insert(out.end(), s.clinical.data().begin(), s.clinical.data().end());
  }
  return TensorF({samples.size(), k}, std::move(out));
}

std::vector<int> labels_of(std::span<const Sample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

void check_no_leakage(std::span<const Sample> fit, std::span<const Sample> test) {
  std::set<std::string> ids;
  for (const auto& s : fit) ids.insert(s.id);
  for (const auto& s : test) {
    if (ids.count(s.id)) throw DataError("leakage: test patient " + s.id + " is part of the fitting data");
  }
}

std::vector<ResultRow> run_cell(const ExperimentConfig& cfg, const ScenarioSpec& scenario, std::uint64_t seed,
                                std::span<const phantom::PatientRecord> records) {
  std::vector<phantom::PatientRecord> fit_records, test_records;
  const std::set<std::string> train_tags(scenario.train_cohorts.begin(), scenario.train_cohorts.end());
  for (const auto& r : records) {
    if (r.cohort == scenario.test_cohort) {
      test_records.push_back(r);
    } else if (train_tags.count(r.cohort)) {
      fit_records.push_back(r);
    }
  }
  if (fit_records.empty() || test_records.empty()) {
    throw DataError("scenario " + scenario.name + ": missing training or test patients");
  }

  const auto split = training::stratified_split(fit_records, cfg.val_fraction, derive_seed(seed, {1}));
  std::vector<phantom::PatientRecord> train_records, val_records;
  for (std::size_t i : split.train) train_records.push_back(fit_records[i]);
  for (std::size_t i : split.val) val_records.push_back(fit_records[i]);
  std::vector<phantom::RawClinical> train_clinical;
  for (const auto& r : train_records) train_clinical.push_back(r.clinical);
  const auto schema = phantom::default_schema();
  const auto stats = phantom::compute_clinical_stats(train_clinical);
  const auto train = training::make_samples(train_records, schema, stats);
  const auto val = training::make_samples(val_records, schema, stats);
  const auto test = training::make_samples(test_records, schema, stats);
  check_no_leakage(train, test);
  check_no_leakage(val, test);
  const auto test_labels = labels_of(test);

  model::ModelConfig mcfg = cfg.model;
  mcfg.seed = derive_seed(seed, {2});
  const model::GuidedAttentionNet<float> net(mcfg);
  const auto state =
      training::run_stepwise(net, net.init_parameters(), cfg.stages, train, val, derive_seed(seed, {3}));

  std::vector<ResultRow> rows;
  auto emit = [&](const char* approach, std::span<const double> scores, std::optional<double> mass) {
    rows.push_back({approach, scenario.name, seed, evaluate_scores(scores, test_labels, cfg.threshold), mass});
  };
  std::array<std::vector<double>, 3> step_scores;
  std::array<double, 3> step_mass{};
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& params = state.stages[k].best_params;
    step_scores[k] = predict_positive(net, params, test, model::stage_from_int(static_cast<int>(k) + 1));
    step_mass[k] = mean_attention_mass(net, params, test, cfg.mass_dilation);
    emit(kApproaches[k], step_scores[k], step_mass[k]);
  }

  const auto cl = train_mlp(clinical_features(train), labels_of(train), clinical_features(val), labels_of(val),
                            cfg.mlp, derive_seed(seed, {4}));
  const auto cl_scores = cl.model.predict(clinical_features(test));
  emit("CL", cl_scores, std::nullopt);

  const auto& step2 = state.stages[1].best_params;
  auto ef_features = [&](std::span<const Sample> s) {
    return concat_features(imaging_features(net, step2, s), clinical_features(s));
  };
  const auto ef = train_mlp(ef_features(train), labels_of(train), ef_features(val), labels_of(val), cfg.mlp,
                            derive_seed(seed, {5}));
  emit("EF", ef.model.predict(ef_features(test)), step_mass[1]);

  std::vector<double> lf(test.size());
  for (std::size_t i = 0; i < lf.size(); ++i) lf[i] = fuse_late(step_scores[1][i], cl_scores[i]);
  emit("LF", lf, step_mass[1]);
  return rows;
}

ExperimentResult lodo_experiment(const ExperimentConfig& cfg, std::span<const phantom::PatientRecord> records,
                                 std::size_t jobs) {
  cfg.validate();
  struct Cell {
    const ScenarioSpec* scenario;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (const auto& s : cfg.scenarios)
    for (auto seed : cfg.seeds) cells.push_back({&s, seed});
  std::vector<std::vector<ResultRow>> out(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        spdlog::info("cell {}/{}: {} seed {}", i + 1, cells.size(), cells[i].scenario->name, cells[i].seed);
        out[i] = run_cell(cfg, *cells[i].scenario, cells[i].seed, records);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  ExperimentResult result;
  for (auto& cell : out) result.rows.insert(result.rows.end(), cell.begin(), cell.end());
  result.summary = summarize(result.rows);
  return result;
}

namespace {

nlohmann::json mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {{"mean", mean}, {"std", sd}, {"n", v.size()}};
}

struct Series {
  std::vector<double> spe, sens, ba, auc, mass;
  void add(const MetricsRow& m, std::optional<double> mass_in_mask) {
    spe.push_back(m.spe);
    sens.push_back(m.sens);
    ba.push_back(m.ba);
    auc.push_back(m.auc);
    if (mass_in_mask) mass.push_back(*mass_in_mask);
  }
  nlohmann::json json() const {
    nlohmann::json j{{"spe", mean_std(spe)}, {"sens", mean_std(sens)}, {"ba", mean_std(ba)}, {"auc", mean_std(auc)}};
    if (!mass.empty()) j["mass_in_mask"] = mean_std(mass);
    return j;
  }
};

}  // namespace

nlohmann::json summarize(std::span<const ResultRow> rows) {
  std::vector<std::string> scenarios;
  std::map<std::pair<std::string, std::string>, Series> cells;
  // (approach, seed) -> per-scenario rows, averaged before aggregating over seeds
  std::map<std::pair<std::string, std::uint64_t>, std::vector<const ResultRow*>> by_seed;
  for (const auto& r : rows) {
    if (std::find(scenarios.begin(), scenarios.end(), r.scenario) == scenarios.end()) scenarios.push_back(r.scenario);
    cells[{r.approach, r.scenario}].add(r.metrics, r.mass_in_mask);
    by_seed[{r.approach, r.seed}].push_back(&r);
  }
  nlohmann::json j;
  j["scenarios"] = scenarios;
  j["approaches"] = kApproaches;
  for (const char* a : kApproaches) {
    for (const auto& s : scenarios) {
      const auto it = cells.find({a, s});
      if (it != cells.end()) j["cells"][a][s] = it->second.json();
    }
    Series avg;
    for (const auto& [key, list] : by_seed) {
      if (key.first != a) continue;
      MetricsRow m;
      double mass = 0.0;
      bool has_mass = true;
      for (const auto* r : list) {
        m.spe += r->metrics.spe;
        m.sens += r->metrics.sens;
        m.ba += r->metrics.ba;
        m.auc += r->metrics.auc;
        has_mass = has_mass && r->mass_in_mask.has_value();
        if (r->mass_in_mask) mass += *r->mass_in_mask;
      }
      const double n = static_cast<double>(list.size());
      m.spe /= n;
      m.sens /= n;
      m.ba /= n;
      m.auc /= n;
      avg.add(m, has_mass ? std::optional<double>(mass / n) : std::nullopt);
    }
    if (!avg.ba.empty()) j["scenario_average"][a] = avg.json();
  }
  return j;
}

std::string format_rows_tsv(std::span<const ResultRow> rows) {
  std::ostringstream os;
  os.precision(9);
  os << "approach\tscenario\tseed\tSpe\tSens\tBA\tAUC\tthreshold\tmass_in_mask\n";
  for (const auto& r : rows) {
    os << r.approach << '\t' << r.scenario << '\t' << r.seed << '\t' << r.metrics.spe << '\t' << r.metrics.sens << '\t'
       << r.metrics.ba << '\t' << r.metrics.auc << '\t' << r.metrics.threshold << '\t';
    if (r.mass_in_mask) {
      os << *r.mass_in_mask;
    } else {
      os << "NA";
    }
    os << '\n';
  }
  return os.str();
}

std::string format_table(const nlohmann::json& summary) {
  auto cell = [](double v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", round_half_down(v, 2));
    return std::string(buf);
  };
  std::ostringstream os;
  os << "Approach";
  for (const auto& s : summary["scenarios"]) os << "\t" << s.get<std::string>() << ": Spe\tSens\tBA\tAUC";
  os << '\n';
  for (const char* a : kApproaches) {
    if (!summary.contains("cells") || !summary["cells"].contains(a)) continue;
    os << a;
    for (const auto& s : summary["scenarios"]) {
      const auto& c = summary["cells"][a][s.get<std::string>()];
      for (const char* m : {"spe", "sens", "ba", "auc"}) os << '\t' << cell(c[m]["mean"].get<double>());
    }
    os << '\n';
  }
  return os.str();
}

void to_json(nlohmann::json& j, const ScenarioSpec& s) {
  j = {{"name", s.name}, {"train_cohorts", s.train_cohorts}, {"test_cohort", s.test_cohort}};
}

void from_json(const nlohmann::json& j, ScenarioSpec& s) {
  s.name = j.at("name").get<std::string>();
  s.train_cohorts = j.at("train_cohorts").get<std::vector<std::string>>();
  s.test_cohort = j.at("test_cohort").get<std::string>();
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"data_seed", c.data_seed},
       {"cohort_scale", c.cohort_scale},
       {"cohorts", c.resolved_cohorts()},
       {"pipeline", c.pipeline},
       {"model", c.model},
       {"stages", c.stages},
       {"mlp", c.mlp},
       {"seeds", c.seeds},
       {"scenarios", c.scenarios},
       {"val_fraction", c.val_fraction},
       {"threshold", c.threshold},
       {"mass_dilation", c.mass_dilation}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  c.data_seed = j.value("data_seed", d.data_seed);
  c.cohort_scale = j.value("cohort_scale", d.cohort_scale);
  c.cohorts = j.value("cohorts", d.cohorts);
  c.pipeline = j.value("pipeline", d.pipeline);
  c.model = j.value("model", d.model);
  if (j.contains("stages")) {
    const auto& s = j.at("stages");
    if (!s.is_array() || s.size() != 3) throw UsageError("stages must list three stage configs");
    for (std::size_t k = 0; k < 3; ++k) {
      auto entry = s[k];
      if (!entry.contains("stage")) entry["stage"] = static_cast<int>(k) + 1;
      c.stages[k] = entry.get<training::StageConfig>();
    }
  } else {
    c.stages = d.stages;
  }
  c.mlp = j.value("mlp", d.mlp);
  c.seeds = j.value("seeds", d.seeds);
  c.scenarios = j.value("scenarios", d.scenarios);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.threshold = j.value("threshold", d.threshold);
  c.mass_dilation = j.value("mass_dilation", d.mass_dilation);
}

}  // namespace guided_attn::eval
