#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guided_attn/eval/experiment.hpp"
#include "guided_attn/model/config.hpp"
#include "guided_attn/phantom/cohort.hpp"
#include "guided_attn/training/trainer.hpp"

namespace guided_attn::cli {

namespace fs = std::filesystem;

std::string version();

// GUIDED_ATTN_SEED as an integer, if set. Malformed values throw UsageError.
std::optional<std::uint64_t> seed_from_env();

// Reads a JSON config file; parse failures become UsageError.
nlohmann::json read_config(const fs::path& path);

struct GenerateConfig {
  fs::path out_dir = "data";
  std::uint64_t seed = 0;
  double cohort_scale = 10.0;
  std::vector<phantom::CohortSpec> cohorts;  // defaults from cohort_scale and seed when empty
  phantom::PipelineConfig pipeline;

  std::vector<phantom::CohortSpec> resolved_cohorts() const;
};

struct GenerateSummary {
  fs::path manifest;
  std::size_t patients = 0;
};

// One directory per cohort under out_dir plus out_dir/manifest.jsonl.
// A non-empty out_dir is refused unless `force`.
GenerateSummary run_generate(const GenerateConfig& cfg, bool force);

struct TrainConfig {
  fs::path manifest;
  fs::path out_dir = "run";
  std::uint64_t seed = 0;
  model::ModelConfig model;
  std::array<training::StageConfig, 3> stages = training::default_stage_configs();
  double val_fraction = 0.2;
  std::vector<std::string> cohorts;  // all cohorts when empty
  std::size_t max_patients = 0;      // 0 keeps every patient
};

struct TrainSummary {
  std::vector<fs::path> checkpoints;
  fs::path history;
};

// Runs `stage` alone when given, otherwise every stage after the resumed
// checkpoint's (all three without a checkpoint).
TrainSummary run_train(const TrainConfig& cfg, std::optional<int> stage, const std::optional<fs::path>& resume);

struct ExperimentRunConfig {
  fs::path out_dir = "experiment";
  std::optional<fs::path> manifest;  // generated into out_dir/data when absent
  eval::ExperimentConfig experiment;
};

struct ExperimentSummary {
  fs::path table;
  fs::path summary;
  std::size_t rows = 0;
};

ExperimentSummary run_experiment(const ExperimentRunConfig& cfg, std::size_t jobs);

struct ExportSummary {
  std::size_t patients = 0;
  fs::path index;
};

// Per patient: the attention map volume, one PGM per depth slice with the
// mask bounding box drawn as a 1-pixel frame, and an index of boxes.
ExportSummary run_export_attention(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out_dir,
                                   const std::vector<std::string>& patients = {});

// Binary 8-bit PGM.
void write_pgm(const fs::path& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels);

// Inclusive tight box {z0, z1, y0, y1, x0, x1} of a [1 x D x H x W] mask.
std::array<std::size_t, 6> bounding_box(const numcore::Tensor<float>& mask);

void to_json(nlohmann::json& j, const GenerateConfig& c);
void from_json(const nlohmann::json& j, GenerateConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const ExperimentRunConfig& c);
void from_json(const nlohmann::json& j, ExperimentRunConfig& c);

}  // namespace guided_attn::cli
