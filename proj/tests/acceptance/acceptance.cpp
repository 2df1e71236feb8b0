// Acceptance suite: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "guided_attn/cli/commands.hpp"
#include "guided_attn/common/errors.hpp"
#include "guided_attn/common/random.hpp"
#include "guided_attn/eval/experiment.hpp"
#include "guided_attn/model/attention.hpp"
#include "guided_attn/numcore/grad_check.hpp"
#include "guided_attn/numcore/ops.hpp"
#include "guided_attn/phantom/cohort.hpp"
#include "guided_attn/training/trainer.hpp"

namespace fs = std::filesystem;
namespace nc = guided_attn::numcore;
using namespace guided_attn;
using model::GuidedAttentionNet;
using model::Stage;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Shared fixtures

// 8x16x16 crop used by the training-based criteria.
phantom::PipelineConfig fast_pipeline() {
  phantom::PipelineConfig p;
  p.geometry.crop = {8, 16, 16};
  p.geometry.target_spacing = {4.0, 1.4, 1.4};
  return p;
}

model::ModelConfig fast_model() {
  model::ModelConfig m;
  m.input = {3, 8, 16, 16};
  m.patch = {2, 2, 2};
  m.early_dim = 16;
  m.late_dim = 32;
  m.blocks_per_stage = 1;
  m.n_heads = 2;
  m.clinical_dim = 17;
  return m;
}

std::uint64_t first_seed = 0;

// Stage 1 stays close to its starting point; the early attention only starts
// to move once its zero-initialized class token has grown, which needs the
// larger step size in stages 2 and 3.
std::array<training::StageConfig, 3> fast_stages() {
  auto s = training::default_stage_configs();
  s[0].lr = 1e-4;
  s[1].lr = 2e-3;
  s[2].lr = 2e-3;
  for (auto& c : s) {
    c.max_epochs = 100;
    c.patience = 20;
  }
  return s;
}

model::ModelConfig micro_model() {
  model::ModelConfig c;
  c.input = {3, 8, 8, 8};
  c.patch = {2, 2, 2};
  c.early_dim = 8;
  c.late_dim = 16;
  c.blocks_per_stage = 1;
  c.n_heads = 2;
  c.clinical_dim = 6;
  c.seed = 3;
  return c;
}

nc::Tensor<double> random_tensor(nc::Shape shape, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(nc::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return {std::move(shape), std::move(v)};
}

nc::Tensor<double> random_volume(const std::array<std::size_t, 4>& e, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(e[0] * e[1] * e[2] * e[3]);
  for (auto& x : v) x = u(rng);
  return {{e[0], e[1], e[2], e[3]}, std::move(v)};
}

model::Parameters<double> randomized(const GuidedAttentionNet<double>& net, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  model::Parameters<double> p;
  for (const auto& spec : net.layout()) p.push_back(random_tensor(spec.shape, rng, scale));
  return p;
}

double brute_force_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double hits = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      ++pairs;
      hits += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  return hits / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// 1. Metric arithmetic against the reference results table

Outcome criterion1() {
  struct Triple {
    const char* row;
    const char* scenario;
    double spe, sens, ba;
  };
  const Triple table[] = {
      {"Step1", "DUKE", 0.64, 0.45, 0.54}, {"Step1", "ISPY1", 0.84, 0.20, 0.52}, {"Step1", "NACT", 0.49, 0.18, 0.33},
      {"Step2", "DUKE", 0.54, 0.56, 0.55}, {"Step2", "ISPY1", 0.64, 0.31, 0.47}, {"Step2", "NACT", 0.58, 0.36, 0.47},
      {"Step3", "DUKE", 0.66, 0.59, 0.62}, {"Step3", "ISPY1", 0.74, 0.51, 0.62}, {"Step3", "NACT", 0.66, 0.36, 0.51},
      {"CL", "DUKE", 0.61, 0.48, 0.54},    {"CL", "ISPY1", 0.81, 0.28, 0.54},    {"CL", "NACT", 0.71, 0.27, 0.49},
      {"EF", "DUKE", 0.66, 0.51, 0.58},    {"EF", "ISPY1", 0.81, 0.35, 0.58},    {"EF", "NACT", 0.73, 0.27, 0.50},
      {"LF", "DUKE", 0.66, 0.54, 0.60},    {"LF", "ISPY1", 0.79, 0.20, 0.49},    {"LF", "NACT", 0.76, 0.27, 0.51},
  };
  std::size_t ok = 0;
  std::string misses;
  for (const auto& t : table) {
    // Recompute through the metric code path: a confusion matrix with 100
    // negatives and 100 positives realizes the printed rates exactly.
    std::vector<double> scores;
    std::vector<int> labels;
    const int tn = static_cast<int>(std::lround(t.spe * 100)), tp = static_cast<int>(std::lround(t.sens * 100));
    for (int i = 0; i < 100; ++i) {
      scores.push_back(i < tn ? 0.1 : 0.9);
      labels.push_back(0);
      scores.push_back(i < tp ? 0.9 : 0.1);
      labels.push_back(1);
    }
    const auto m = eval::confusion_metrics(scores, labels, 0.5);
    const double rounded = eval::round_half_down(m.ba, 2);
    if (std::abs(rounded - t.ba) < 1e-9 && m.ba == (m.spe + m.sens) / 2) {
      ++ok;
    } else {
      misses += std::string(" ") + t.row + "/" + t.scenario;
    }
  }
  return {ok == std::size(table), std::to_string(ok) + "/18 BA values reproduced" + misses};
}

// ---------------------------------------------------------------------------
// 2. Gradient validation on the micro config

Outcome criterion2() {
  const auto c = micro_model();
  GuidedAttentionNet<double> net(c);
  const auto params = randomized(net, 16, 0.3);
  std::mt19937_64 rng(16);
  const auto x = random_volume(c.input, rng);
  const auto xc = random_tensor({c.clinical_dim}, rng, 1.0);
  const auto target = nc::normalize_sum(random_volume({1, 8, 8, 8}, rng));
  double worst = 0.0;
  std::size_t checked = 0;
  for (int k = 1; k <= 3; ++k) {
    const auto stage = model::stage_from_int(k);
    const double lambda = k == 1 ? 0.0 : 100.0;
    auto f = [&](std::span<const nc::Tensor<double>> p) {
      const auto r = net.forward(p, x, &xc, stage);
      const int y[] = {1};
      const nc::Tensor<double>* attention = r.attention ? &r.attention->map : nullptr;
      return training::composite_loss(r.logits, y, attention, &target, lambda).total;
    };
    const auto report =
        nc::grad_check(f, params, {.eps = 1e-3, .fourth_order = true, .coords_per_param = 0, .seed = 2});
    worst = std::max(worst, report.max_relative_error);
    checked += report.coords_checked;
  }
  std::set<model::Module> covered;
  for (const auto& spec : net.layout()) covered.insert(spec.module);
  return {worst <= 1e-5 && covered.size() == 5,
          "max relative error " + num(worst, 3) + " over " + std::to_string(checked) +
              " coordinates in stages 1-3 (encoder, both attentions, projector, head)"};
}

// ---------------------------------------------------------------------------
// 3. Equivalence invariants

Outcome criterion3() {
  const auto c = micro_model();
  GuidedAttentionNet<float> net(c);
  auto params = net.init_parameters();
  std::mt19937_64 rng(13);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] = random_tensor(params[i].shape(), rng, 0.3).cast<float>();
  }
  params[net.index_of("clinical_projector.weight")] = nc::Tensor<float>({c.clinical_dim, c.late_dim}, 0.0f);
  params[net.index_of("clinical_projector.bias")] = nc::Tensor<float>({c.late_dim}, 0.0f);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_volume(c.input, rng).cast<float>();
    const auto xc = random_tensor({c.clinical_dim}, rng, 1.0).cast<float>();
    const auto s2 = net.forward(params, x, nullptr, Stage::kGuided);
    const auto s3 = net.forward(params, x, &xc, Stage::kClinical);
    for (std::size_t i = 0; i < 2; ++i) worst = std::max(worst, double(std::abs(s2.probabilities[i] - s3.probabilities[i])));
  }
  const bool a = worst <= 1e-6;

  bool b = true;
  for (int trial = 0; trial < 20; ++trial) {
    const auto logits = random_tensor({1, 2}, rng, 2.0);
    const auto att = nc::normalize_sum(random_volume({1, 4, 4, 4}, rng));
    const auto tgt = nc::normalize_sum(random_volume({1, 4, 4, 4}, rng));
    const int y[] = {trial % 2};
    const auto l = training::composite_loss(logits, y, &att, &tgt, 0.0);
    b = b && l.total.item() == nc::cross_entropy_logits(logits, y).item() && l.report.total == l.report.cls;
  }

  std::size_t exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 29;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? std::uniform_real_distribution<double>(0, 1)(rng) : double(rng() % 6) / 5.0;
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    exact += eval::auc(s, y) == brute_force_auc(s, y);
  }
  const bool cc = exact == 100;
  return {a && b && cc, "(a) max |step3 - step2| = " + num(worst, 3) + (a ? "" : " FAIL") +
                            "; (b) lambda=0 equals CE exactly: " + (b ? "yes" : "no") + "; (c) AUC exact on " +
                            std::to_string(exact) + "/100 sets"};
}

// ---------------------------------------------------------------------------
// 4. Attention normalization and permutation

Outcome criterion4() {
  const auto c = micro_model();
  GuidedAttentionNet<double> net(c);
  std::mt19937_64 rng(21);
  double worst_sum = 0.0, min_value = 1.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto params = randomized(net, 1000 + trial, 0.4);
    const auto r = net.forward(params, random_volume(c.input, rng), nullptr, Stage::kGuided);
    double total = 0.0;
    for (double v : r.attention->map.data()) {
      total += v;
      min_value = std::min(min_value, v);
    }
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
  }

  // Permuting the tokens fed to either pooling module permutes the weights
  // and leaves the pooled output unchanged.
  const auto params = randomized(net, 77, 0.4);
  double worst_weight = 0.0, worst_output = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    for (int which = 0; which < 2; ++which) {
      const std::size_t n = which == 0 ? c.early_tokens() : c.late_tokens();
      const std::size_t d = which == 0 ? c.early_dim : c.late_dim;
      const auto tokens = random_tensor({n, d}, rng, 1.0);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<std::size_t> index;
      for (auto r : perm)
        for (std::size_t k = 0; k < d; ++k) index.push_back(r * d + k);
      const auto permuted = nc::gather(tokens, index, tokens.shape());
      const auto& query = which == 0 ? net.early_class_token(params) : net.late_class_token(params);
      const auto w = which == 0 ? net.early_weights(params) : net.late_weights(params);
      const auto a = model::attention_pool(query, tokens, w, c.n_heads);
      const auto b = model::attention_pool(query, permuted, w, c.n_heads);
      for (std::size_t h = 0; h < c.n_heads; ++h)
        for (std::size_t j = 0; j < n; ++j) {
          worst_weight = std::max(worst_weight, std::abs(b.weights[h * n + j] - a.weights[h * n + perm[j]]));
        }
      for (std::size_t i = 0; i < d; ++i) worst_output = std::max(worst_output, std::abs(a.output[i] - b.output[i]));
      if (which == 1) {
        const auto za = net.late_attention(params, tokens, nullptr);
        const auto zb = net.late_attention(params, permuted, nullptr);
        for (std::size_t i = 0; i < d; ++i) worst_output = std::max(worst_output, std::abs(za[i] - zb[i]));
      }
    }
  }
  const bool pass = worst_sum <= 1e-5 && min_value >= 0.0 && worst_weight <= 1e-6 && worst_output <= 1e-6;
  return {pass, "max |sum A_s - 1| = " + num(worst_sum, 3) + ", min A_s = " + num(min_value, 3) +
                    ", permuted weight error " + num(worst_weight, 3) + ", z_cls change " + num(worst_output, 3)};
}

// ---------------------------------------------------------------------------
// 5. Localization guidance

struct LocalizationRun {
  double step1 = 0, step2 = 0, uniform = 0;
  std::size_t epochs = 0, best_epoch = 0;
};

LocalizationRun localization_seed(std::uint64_t seed) {
  phantom::CohortSpec spec;
  spec.tag = "L";
  spec.n_patients = 148;
  spec.prevalence = 0.294;
  spec.seed = derive_seed(seed, {50});
  const auto records = phantom::generate_preprocessed(spec, fast_pipeline());
  if (spec.positive_count() != 44) throw DataError("unexpected positive count");

  // Held-out test patients, then a validation split of the remainder.
  const auto outer = training::stratified_split(records, 0.2, derive_seed(seed, {51}));
  std::vector<phantom::PatientRecord> fit, test;
  for (auto i : outer.train) fit.push_back(records[i]);
  for (auto i : outer.val) test.push_back(records[i]);
  const auto inner = training::stratified_split(fit, 0.2, derive_seed(seed, {52}));
  std::vector<phantom::RawClinical> clinical;
  std::vector<phantom::PatientRecord> train_records, val_records;
  for (auto i : inner.train) {
    train_records.push_back(fit[i]);
    clinical.push_back(fit[i].clinical);
  }
  for (auto i : inner.val) val_records.push_back(fit[i]);
  const auto stats = phantom::compute_clinical_stats(clinical);
  const auto schema = phantom::default_schema();
  const auto train = training::make_samples(train_records, schema, stats);
  const auto val = training::make_samples(val_records, schema, stats);
  const auto held_out = training::make_samples(test, schema, stats);

  auto mcfg = fast_model();
  mcfg.seed = derive_seed(seed, {53});
  const GuidedAttentionNet<float> net(mcfg);
  const auto stages = fast_stages();
  const auto state =
      training::run_stepwise(net, net.init_parameters(), std::span(stages).first(2), train, val, derive_seed(seed, {54}),
                           [](const training::EpochRecord& e) {
                             spdlog::debug("stage {} epoch {}: val cls {:.4f} loc {:.3e}", e.stage, e.epoch, e.val.cls,
                                           e.val.loc);
                           });

  LocalizationRun r;
  r.epochs = state.stages[1].history.size();
  r.best_epoch = state.stages[1].best_epoch;
  r.step1 = eval::mean_attention_mass(net, state.stages[0].best_params, held_out);
  r.step2 = eval::mean_attention_mass(net, state.stages[1].best_params, held_out);
  for (const auto& s : held_out) {
    double on = 0;
    for (float v : s.mask.data()) on += v;
    r.uniform += on / static_cast<double>(s.mask.numel());
  }
  r.uniform /= static_cast<double>(held_out.size());
  return r;
}

std::optional<std::uint64_t> seeds_override;

Outcome criterion5() {
  std::size_t ok = 0;
  std::string detail;
  for (std::uint64_t seed = first_seed; seed < first_seed + 5; ++seed) {
    if (seeds_override && seed != *seeds_override) continue;
    const auto r = localization_seed(seed);
    const bool pass = r.step2 >= 2.0 * r.step1 && r.step2 >= 3.0 * r.uniform;
    ok += pass;
    detail += " [seed " + std::to_string(seed) + ": step1 " + num(r.step1, 3) + ", step2 " + num(r.step2, 3) +
              ", uniform " + num(r.uniform, 3) + ", step-2 best epoch " +
              std::to_string(r.best_epoch) + "/" + std::to_string(r.epochs) + (pass ? "" : " x") + "]";
  }
  return {ok >= 4, std::to_string(ok) + "/5 seeds meet both ratios;" + detail};
}

// ---------------------------------------------------------------------------
// 6. Stepwise benefit on the LODO suite

eval::ExperimentConfig lodo_config() {
  eval::ExperimentConfig c;
  c.data_seed = 7;
  c.cohort_scale = 10.0;
  c.pipeline = fast_pipeline();
  c.model = fast_model();
  c.stages = fast_stages();
  c.seeds = {first_seed, first_seed + 1, first_seed + 2, first_seed + 3, first_seed + 4};
  return c;
}

std::vector<phantom::PatientRecord> generate_all(const eval::ExperimentConfig& c) {
  std::vector<phantom::PatientRecord> all;
  for (const auto& spec : c.resolved_cohorts()) {
    auto r = phantom::generate_preprocessed(spec, c.pipeline);
    all.insert(all.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
  }
  return all;
}

Outcome criterion6() {
  const auto cfg = lodo_config();
  const auto records = generate_all(cfg);
  const auto result = eval::lodo_experiment(cfg, records, 1);
  const auto& avg = result.summary["scenario_average"];
  auto mean = [&](const char* approach, const char* metric) { return avg[approach][metric]["mean"].get<double>(); };
  const double ba1 = mean("Step1", "ba"), ba2 = mean("Step2", "ba"), ba3 = mean("Step3", "ba");
  const double sens1 = mean("Step1", "sens"), sens3 = mean("Step3", "sens");
  const bool pass = ba3 >= ba2 && ba2 >= ba1 - 0.02 && sens3 >= sens1;
  std::string detail = "BA step1 " + num(ba1, 3) + ", step2 " + num(ba2, 3) + ", step3 " + num(ba3, 3) +
                       "; Sens step1 " + num(sens1, 3) + ", step3 " + num(sens3, 3);
  detail += "; CL BA " + num(mean("CL", "ba"), 3) + ", EF BA " + num(mean("EF", "ba"), 3) + ", LF BA " +
            num(mean("LF", "ba"), 3);
  std::cerr << eval::format_table(result.summary);
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 7. Hand-off and early stopping

Outcome criterion7() {
  training::EarlyStopper scripted(2);
  const double trace[] = {1.0, 0.8, 0.9, 0.85, 0.95};
  for (double v : trace)
    if (scripted.update(v)) break;
  const bool trace_ok = scripted.epochs() == 4 && scripted.best_epoch() == 2;

  phantom::CohortSpec spec;
  spec.tag = "H";
  spec.n_patients = 30;
  spec.prevalence = 0.3;
  spec.seed = 9;
  const auto records = phantom::generate_preprocessed(spec, fast_pipeline());
  const auto split = training::stratified_split(records, 0.3, 1);
  std::vector<phantom::PatientRecord> tr, va;
  std::vector<phantom::RawClinical> clinical;
  for (auto i : split.train) {
    tr.push_back(records[i]);
    clinical.push_back(records[i].clinical);
  }
  for (auto i : split.val) va.push_back(records[i]);
  const auto stats = phantom::compute_clinical_stats(clinical);
  const auto train = training::make_samples(tr, phantom::default_schema(), stats);
  const auto val = training::make_samples(va, phantom::default_schema(), stats);
  auto mcfg = fast_model();
  mcfg.patch = {2, 4, 4};
  const GuidedAttentionNet<float> net(mcfg);
  auto stages = fast_stages();
  for (auto& s : stages) {
    s.max_epochs = 12;
    s.patience = 3;
  }
  const auto state = training::run_stepwise(net, net.init_parameters(), stages, train, val, 5);

  bool handoff = true, best_ok = true, trailing_ok = true;
  for (std::size_t k = 0; k < state.stages.size(); ++k) {
    const auto& st = state.stages[k];
    if (k > 0) {
      const auto& prev = state.stages[k - 1].best_params;
      for (std::size_t i = 0; i < prev.size(); ++i) {
        handoff = handoff && std::memcmp(prev[i].data().data(), st.start_params[i].data().data(),
                                         prev[i].numel() * sizeof(float)) == 0;
      }
    }
    double best = st.history.front().val.total;
    for (const auto& e : st.history) best = std::min(best, e.val.total);
    best_ok = best_ok && st.history[st.best_epoch - 1].val.total == best &&
              std::none_of(st.history.begin(), st.history.begin() + static_cast<std::ptrdiff_t>(st.best_epoch - 1),
                           [&](const auto& e) { return e.val.total == best; });
    trailing_ok = trailing_ok && st.history.size() - st.best_epoch <= stages[k].patience;
  }
  std::string epochs;
  for (const auto& st : state.stages)
    epochs += " " + std::to_string(st.history.size()) + "(best " + std::to_string(st.best_epoch) + ")";
  return {trace_ok && handoff && best_ok && trailing_ok,
          std::string("scripted trace ") + (trace_ok ? "ok" : "wrong") + "; smoke run epochs" + epochs +
              ", hand-off bitwise " + (handoff ? "yes" : "no") + ", best epoch minimal " + (best_ok ? "yes" : "no") +
              ", trailing <= patience " + (trailing_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 8. Pipeline conformance

Outcome criterion8() {
  phantom::CohortSpec spec;
  spec.tag = "P";
  spec.n_patients = 1000;
  spec.prevalence = 0.294;
  spec.seed = 8;
  spec.shift.p_sagittal = 0.3;
  spec.shift.p_bilateral = 0.3;
  spec.shift.min_phases = 3;
  spec.shift.max_phases = 6;
  const phantom::PipelineConfig cfg;  // desk crop
  const auto records = phantom::generate_preprocessed(spec, cfg);
  const auto& crop = cfg.geometry.crop;
  std::size_t bad_shape = 0, bad_range = 0, bad_mask = 0, positives = 0;
  for (const auto& r : records) {
    const auto& s = r.volume.data.shape();
    if (s != nc::Shape{3, crop[0], crop[1], crop[2]} || r.mask.data.shape() != nc::Shape{1, crop[0], crop[1], crop[2]}) {
      ++bad_shape;
    }
    bad_range += std::any_of(r.volume.data.data().begin(), r.volume.data.data().end(),
                             [](float v) { return !(v >= 0.0f && v <= 1.0f); });
    std::size_t on = 0;
    bool binary = true;
    for (float v : r.mask.data.data()) {
      binary = binary && (v == 0.0f || v == 1.0f);
      on += v == 1.0f;
    }
    bad_mask += !binary || on == 0;
    positives += r.label == 1;
  }
  const std::size_t expected = static_cast<std::size_t>(std::llround(1000 * 0.294));
  const bool pass = records.size() == 1000 && bad_shape == 0 && bad_range == 0 && bad_mask == 0 && positives == expected;
  return {pass, std::to_string(records.size()) + " patients; shape violations " + std::to_string(bad_shape) +
                    ", out-of-range volumes " + std::to_string(bad_range) + ", bad masks " + std::to_string(bad_mask) +
                    ", positives " + std::to_string(positives) + "/" + std::to_string(expected)};
}

// ---------------------------------------------------------------------------
// 9. Reproducibility of the experiment command

std::map<std::string, std::string> file_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  return out;
}

std::vector<std::vector<std::string>> read_tsv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

Outcome criterion9(const fs::path& work) {
  cli::ExperimentRunConfig cfg;
  cfg.out_dir = "experiment";
  cfg.experiment = lodo_config();
  cfg.experiment.seeds = {0, 1};
  cfg.experiment.model.patch = {2, 4, 4};
  for (auto& s : cfg.experiment.stages) s.max_epochs = 5;
  cfg.experiment.mlp.max_epochs = 30;
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path config = work / "experiment.json";
  std::ofstream(config) << nlohmann::json(cfg).dump(2);

  // Same config file, two working directories.
  std::vector<fs::path> roots;
  for (const char* name : {"run_a", "run_b"}) {
    const fs::path root = work / name;
    fs::create_directories(root);
    const std::string command = "cd '" + root.string() + "' && '" GUIDED_ATTN_BINARY "' experiment --config '" +
                                fs::absolute(config).string() + "' > run.log 2>&1";
    if (std::system(command.c_str()) != 0) return {false, std::string("experiment command failed in ") + name};
    roots.push_back(root / "experiment");
  }
  const auto tree_a = file_tree(roots[0]), tree_b = file_tree(roots[1]);
  std::size_t data_files = 0, data_same = 0;
  for (const auto& [name, bytes] : tree_a) {
    if (name.rfind("data/", 0) != 0) continue;
    ++data_files;
    const auto it = tree_b.find(name);
    data_same += it != tree_b.end() && it->second == bytes;
  }
  std::size_t data_files_b = 0;
  for (const auto& [name, bytes] : tree_b) data_files_b += name.rfind("data/", 0) == 0;

  const auto ta = read_tsv(roots[0] / "results.tsv"), tb = read_tsv(roots[1] / "results.tsv");
  double worst = 0.0;
  bool layout_same = ta.size() == tb.size() && ta.size() == 1 + 18 * cfg.experiment.seeds.size();
  for (std::size_t i = 1; layout_same && i < ta.size(); ++i) {
    layout_same = ta[i].size() == tb[i].size();
    for (std::size_t k = 0; layout_same && k < ta[i].size(); ++k) {
      if (k < 3 || ta[i][k] == "NA" || tb[i][k] == "NA") {
        layout_same = ta[i][k] == tb[i][k];
      } else {
        worst = std::max(worst, std::abs(std::stod(ta[i][k]) - std::stod(tb[i][k])));
      }
    }
  }
  const bool tables_same = tree_a.at("table.txt") == tree_b.at("table.txt");
  fs::remove_all(work);
  const bool data_ok = data_files > 0 && data_same == data_files && data_files_b == data_files;
  const bool pass = data_ok && layout_same && worst <= 1e-6 && tables_same;
  return {pass, std::to_string(data_same) + "/" + std::to_string(data_files) +
                    " generated files byte-identical; " + std::to_string(ta.size() - 1) +
                    " result rows, max difference " + num(worst, 3) + "; summary tables identical: " +
                    (tables_same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "guided_attn_acceptance").string();
  bool verbose = false;
  app.add_option("--criterion", only, "Run only these criteria (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--work-dir", work, "Scratch directory");
  app.add_option("--only-seed", seeds_override, "Restrict the seeded criteria to one seed");
  app.add_option("--first-seed", first_seed, "First of the five seeds used by criteria 5 and 6");
  app.add_flag("--verbose", verbose, "Show training logs");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::err);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4},
      {5, criterion5}, {6, criterion6}, {7, criterion7}, {8, criterion8},
      {9, [&] { return criterion9(fs::path(work) / "reproducibility"); }},
  };
  fs::create_directories(work);
  bool all = true;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << id << " [PRIMARY] " << (o.pass ? "PASS" : "FAIL") << " (" << num(secs, 3) << " s) "
              << o.detail << std::endl;
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
