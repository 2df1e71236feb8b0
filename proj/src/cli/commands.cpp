#include "guided_attn/cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>

#include <spdlog/spdlog.h>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/common/random.hpp"
#include "guided_attn/model/checkpoint.hpp"
#include "guided_attn/phantom/io.hpp"

#ifndef GUIDED_ATTN_VERSION
#define GUIDED_ATTN_VERSION "unknown"
#endif

namespace guided_attn::cli {

std::string version() { return GUIDED_ATTN_VERSION; }

std::optional<std::uint64_t> seed_from_env() {
  const char* raw = std::getenv("GUIDED_ATTN_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (*end != '\0' || raw[0] == '-') throw UsageError(std::string("GUIDED_ATTN_SEED is not an unsigned integer: ") + raw);
  return static_cast<std::uint64_t>(v);
}

nlohmann::json read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
}

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Resolved config and provenance, written before any work starts.
void echo_run(const fs::path& dir, const char* command, const nlohmann::json& resolved, std::uint64_t seed) {
  fs::create_directories(dir);
  write_json(dir / "resolved_config.json", resolved);
  write_json(dir / "run.json", {{"command", command}, {"version", version()}, {"seed", seed}});
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

std::vector<training::Sample> to_samples(const std::vector<phantom::PatientRecord>& records,
                                         std::span<const std::size_t> idx, const phantom::ClinicalStats& stats) {
  std::vector<phantom::PatientRecord> subset;
  for (std::size_t i : idx) subset.push_back(records[i]);
  return training::make_samples(subset, phantom::default_schema(), stats);
}

void check_input_shape(const model::ModelConfig& m, const phantom::PatientRecord& r) {
  const auto& s = r.volume.data.shape();
  if (s.size() != 4 || s[0] != m.input[0] || s[1] != m.input[1] || s[2] != m.input[2] || s[3] != m.input[3]) {
    throw DataError("patient " + r.id + ": volume " + numcore::shape_to_string(s) +
                    " does not match the model input");
  }
}

}  // namespace

std::vector<phantom::CohortSpec> GenerateConfig::resolved_cohorts() const {
  return cohorts.empty() ? phantom::default_cohorts(cohort_scale, seed) : cohorts;
}

GenerateSummary run_generate(const GenerateConfig& cfg, bool force) {
  if (non_empty_dir(cfg.out_dir)) {
    if (!force) throw UsageError("output directory " + cfg.out_dir.string() + " is not empty; pass --force");
    fs::remove_all(cfg.out_dir);
  }
  const auto cohorts = cfg.resolved_cohorts();
  echo_run(cfg.out_dir, "generate", cfg, cfg.seed);
  GenerateSummary summary;
  summary.manifest = cfg.out_dir / "manifest.jsonl";
  std::vector<phantom::ManifestEntry> entries;
  for (const auto& spec : cohorts) {
    const auto records = phantom::generate_preprocessed(spec, cfg.pipeline);
    const fs::path dir = cfg.out_dir / spec.tag;
    fs::create_directories(dir);
    for (const auto& r : records) entries.push_back(phantom::write_record(dir, cfg.out_dir, r));
    spdlog::info("cohort {}: {} patients, {} positive", spec.tag, records.size(), spec.positive_count());
  }
  phantom::write_manifest(summary.manifest, entries);
  summary.patients = entries.size();
  return summary;
}

TrainSummary run_train(const TrainConfig& cfg, std::optional<int> stage, const std::optional<fs::path>& resume) {
  cfg.model.validate();
  if (stage && (*stage < 1 || *stage > 3)) throw UsageError("--stage must be 1, 2 or 3");
  for (const auto& s : cfg.stages) s.validate();

  model::ModelConfig mcfg = cfg.model;
  mcfg.seed = derive_seed(cfg.seed, {2});
  const model::GuidedAttentionNet<float> net(mcfg);
  model::Parameters<float> params = net.init_parameters();
  int resumed_stage = 0;
  if (resume) {
    auto ckpt = model::load_checkpoint(*resume);
    if (nlohmann::json(ckpt.config) != nlohmann::json(mcfg)) {
      throw DataError("checkpoint " + resume->string() + " was written for a different model config");
    }
    params = std::move(ckpt.params);
    resumed_stage = ckpt.meta.stage;
  }
  std::vector<training::StageConfig> todo;
  if (stage) {
    if (*stage > 1 && !resume) spdlog::warn("stage {} starts from freshly initialized parameters", *stage);
    todo.push_back(cfg.stages[static_cast<std::size_t>(*stage - 1)]);
  } else {
    for (const auto& s : cfg.stages)
      if (s.stage > resumed_stage) todo.push_back(s);
    if (todo.empty()) throw UsageError("checkpoint is already at stage 3; nothing to train");
  }

  echo_run(cfg.out_dir, "train", cfg, cfg.seed);

  auto records = phantom::load_records(cfg.manifest);
  if (!cfg.cohorts.empty()) {
    const std::set<std::string> keep(cfg.cohorts.begin(), cfg.cohorts.end());
    std::erase_if(records, [&](const auto& r) { return !keep.count(r.cohort); });
  }
  if (cfg.max_patients > 0 && records.size() > cfg.max_patients) records.resize(cfg.max_patients);
  if (records.empty()) throw DataError("no patients selected from " + cfg.manifest.string());
  for (const auto& r : records) check_input_shape(cfg.model, r);

  const auto split = training::stratified_split(records, cfg.val_fraction, derive_seed(cfg.seed, {1}));
  std::vector<phantom::RawClinical> train_clinical;
  for (std::size_t i : split.train) train_clinical.push_back(records[i].clinical);
  const auto stats = phantom::compute_clinical_stats(train_clinical);
  write_json(cfg.out_dir / "clinical_stats.json", {{"mean", stats.mean}, {"stddev", stats.stddev}});
  const auto train = to_samples(records, split.train, stats);
  const auto val = to_samples(records, split.val, stats);

  TrainSummary summary;
  summary.history = cfg.out_dir / "history.jsonl";
  std::ofstream history(summary.history);
  if (!history) throw DataError("cannot write " + summary.history.string());
  history.precision(17);
  auto log_epoch = [&](const training::EpochRecord& r) {
    for (const auto& line : training::history_lines(r)) history << line.dump() << '\n';
    history.flush();
    spdlog::info("stage {} epoch {}: train {:.6f} val {:.6f}", r.stage, r.epoch, r.train.total, r.val.total);
  };

  training::StepwiseState state;
  state.params = std::move(params);
  for (const auto& s : todo) {
    const auto& result = training::run_stage(net, state, train, val, s, derive_seed(cfg.seed, {3}), log_epoch);
    model::Checkpoint ckpt{mcfg, {s.stage, static_cast<int>(result.best_epoch), result.best_val_loss},
                           result.best_params};
    const fs::path path = cfg.out_dir / ("stage" + std::to_string(s.stage) + ".ckpt.json");
    model::save_checkpoint(path, ckpt);
    summary.checkpoints.push_back(path);
  }
  return summary;
}

ExperimentSummary run_experiment(const ExperimentRunConfig& cfg, std::size_t jobs) {
  if (jobs == 0) throw UsageError("--jobs must be positive");
  cfg.experiment.validate();
  echo_run(cfg.out_dir, "experiment", cfg, cfg.experiment.data_seed);
  fs::path manifest;
  if (cfg.manifest) {
    manifest = *cfg.manifest;
  } else {
    GenerateConfig g;
    g.out_dir = cfg.out_dir / "data";
    g.seed = cfg.experiment.data_seed;
    g.cohorts = cfg.experiment.resolved_cohorts();
    g.pipeline = cfg.experiment.pipeline;
    manifest = run_generate(g, true).manifest;
  }
  const auto records = phantom::load_records(manifest);
  for (const auto& r : records) check_input_shape(cfg.experiment.model, r);
  const auto result = eval::lodo_experiment(cfg.experiment, records, jobs);

  ExperimentSummary summary;
  summary.table = cfg.out_dir / "results.tsv";
  summary.summary = cfg.out_dir / "summary.json";
  summary.rows = result.rows.size();
  std::ofstream(summary.table) << eval::format_rows_tsv(result.rows);
  write_json(summary.summary, result.summary);
  std::ofstream(cfg.out_dir / "table.txt") << eval::format_table(result.summary);
  return summary;
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) throw UsageError("write_pgm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

std::array<std::size_t, 6> bounding_box(const numcore::Tensor<float>& mask) {
  if (mask.rank() != 4 || mask.dim(0) != 1) throw UsageError("bounding_box expects a [1 x D x H x W] mask");
  const std::size_t d = mask.dim(1), h = mask.dim(2), w = mask.dim(3);
  std::array<std::size_t, 6> box{d, 0, h, 0, w, 0};
  bool any = false;
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (mask[(z * h + y) * w + x] <= 0.5f) continue;
        any = true;
        box[0] = std::min(box[0], z);
        box[1] = std::max(box[1], z);
        box[2] = std::min(box[2], y);
        box[3] = std::max(box[3], y);
        box[4] = std::min(box[4], x);
        box[5] = std::max(box[5], x);
      }
  if (!any) throw DataError("bounding_box: empty mask");
  return box;
}

ExportSummary run_export_attention(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out_dir,
                                   const std::vector<std::string>& patients) {
  const auto ckpt = model::load_checkpoint(checkpoint);
  if (ckpt.meta.stage < 2) {
    throw UsageError("checkpoint " + checkpoint.string() +
                     " is from stage 1; its early attention was never trained, so there is no attention map to export");
  }
  const model::GuidedAttentionNet<float> net(ckpt.config);
  auto records = phantom::load_records(manifest);
  if (!patients.empty()) {
    const std::set<std::string> keep(patients.begin(), patients.end());
    std::erase_if(records, [&](const auto& r) { return !keep.count(r.id); });
    if (records.size() != keep.size()) throw DataError("some requested patients are not in the manifest");
  }
  fs::create_directories(out_dir);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& r : records) {
    check_input_shape(ckpt.config, r);
    training::Sample sample;
    sample.id = r.id;
    sample.volume = r.volume.data;
    sample.mask = r.mask.data;
    const auto map = eval::attention_map(net, ckpt.params, sample);
    double total = 0.0;
    float lo = map[0], hi = map[0];
    for (float v : map.data()) {
      total += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const fs::path dir = out_dir / r.id;
    fs::create_directories(dir);
    phantom::Volume vol;
    vol.data = map;
    vol.spacing = r.volume.spacing;
    vol.orientation = r.volume.orientation;
    vol.laterality = r.volume.laterality;
    phantom::write_volume(dir / "attention", vol);

    const auto box = bounding_box(r.mask.data);
    const std::size_t d = map.dim(1), h = map.dim(2), w = map.dim(3);
    const float range = hi - lo;
    for (std::size_t z = 0; z < d; ++z) {
      std::vector<std::uint8_t> px(h * w);
      for (std::size_t i = 0; i < h * w; ++i) {
        const float v = range > 0.0f ? (map[z * h * w + i] - lo) / range : 0.0f;
        px[i] = static_cast<std::uint8_t>(std::lround(255.0f * v));
      }
      if (z >= box[0] && z <= box[1]) {
        for (std::size_t x = box[4]; x <= box[5]; ++x) px[box[2] * w + x] = px[box[3] * w + x] = 255;
        for (std::size_t y = box[2]; y <= box[3]; ++y) px[y * w + box[4]] = px[y * w + box[5]] = 255;
      }
      char name[32];
      std::snprintf(name, sizeof name, "slice_%03zu.pgm", z);
      write_pgm(dir / name, w, h, px);
    }
    index.push_back({{"id", r.id},
                     {"cohort", r.cohort},
                     {"bbox", {{"z", {box[0], box[1]}}, {"y", {box[2], box[3]}}, {"x", {box[4], box[5]}}}},
                     {"attention_sum", total},
                     {"mass_in_mask", eval::attention_mass_in_mask(map, r.mask.data)},
                     {"slices", d},
                     {"volume", (fs::path(r.id) / "attention").string()}});
  }
  ExportSummary summary;
  summary.patients = records.size();
  summary.index = out_dir / "index.json";
  write_json(summary.index, {{"checkpoint", checkpoint.string()}, {"stage", ckpt.meta.stage}, {"patients", index}});
  return summary;
}

void to_json(nlohmann::json& j, const GenerateConfig& c) {
  j = {{"out_dir", c.out_dir.string()},
       {"seed", c.seed},
       {"cohort_scale", c.cohort_scale},
       {"cohorts", c.resolved_cohorts()},
       {"pipeline", c.pipeline}};
}

void from_json(const nlohmann::json& j, GenerateConfig& c) {
  const GenerateConfig d;
  c.out_dir = j.value("out_dir", d.out_dir.string());
  c.seed = j.value("seed", d.seed);
  c.cohort_scale = j.value("cohort_scale", d.cohort_scale);
  c.cohorts = j.value("cohorts", d.cohorts);
  c.pipeline = j.value("pipeline", d.pipeline);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"manifest", c.manifest.string()}, {"out_dir", c.out_dir.string()}, {"seed", c.seed},
       {"model", c.model},                {"stages", c.stages},             {"val_fraction", c.val_fraction},
       {"cohorts", c.cohorts},            {"max_patients", c.max_patients}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  if (!j.contains("manifest")) throw UsageError("train config needs a manifest");
  c.manifest = j.at("manifest").get<std::string>();
  c.out_dir = j.value("out_dir", d.out_dir.string());
  c.seed = j.value("seed", d.seed);
  c.model = j.value("model", d.model);
  // Stage parsing shares the experiment config's rules.
  nlohmann::json stages_only = nlohmann::json::object();
  if (j.contains("stages")) stages_only["stages"] = j.at("stages");
  c.stages = stages_only.get<eval::ExperimentConfig>().stages;
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.cohorts = j.value("cohorts", d.cohorts);
  c.max_patients = j.value("max_patients", d.max_patients);
}

void to_json(nlohmann::json& j, const ExperimentRunConfig& c) {
  j = c.experiment;
  j["out_dir"] = c.out_dir.string();
  if (c.manifest) j["manifest"] = c.manifest->string();
}

void from_json(const nlohmann::json& j, ExperimentRunConfig& c) {
  c.out_dir = j.value("out_dir", std::string("experiment"));
  if (j.contains("manifest")) {
    c.manifest = j.at("manifest").get<std::string>();
  } else {
    c.manifest.reset();
  }
  c.experiment = j.get<eval::ExperimentConfig>();
}

}  // namespace guided_attn::cli
