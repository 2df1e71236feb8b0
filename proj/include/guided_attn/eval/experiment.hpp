#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guided_attn/eval/metrics.hpp"
#include "guided_attn/eval/mlp.hpp"
#include "guided_attn/model/network.hpp"
#include "guided_attn/phantom/cohort.hpp"
#include "guided_attn/training/trainer.hpp"

namespace guided_attn::eval {

using training::Sample;

struct ScenarioSpec {
  std::string name;
  std::vector<std::string> train_cohorts;
  std::string test_cohort;
};

// External-B, External-C and External-D: cohort A always trains, the other
// two non-test cohorts join it.
std::vector<ScenarioSpec> default_scenarios();

inline constexpr std::array<const char*, 6> kApproaches{"Step1", "Step2", "Step3", "CL", "EF", "LF"};

struct ExperimentConfig {
  std::uint64_t data_seed = 0;
  double cohort_scale = 10.0;
  std::vector<phantom::CohortSpec> cohorts;  // default_cohorts(cohort_scale, data_seed) when empty
  phantom::PipelineConfig pipeline;
  model::ModelConfig model;
  std::array<training::StageConfig, 3> stages = training::default_stage_configs();
  MlpConfig mlp;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<ScenarioSpec> scenarios = default_scenarios();
  double val_fraction = 0.2;
  double threshold = 0.5;
  double mass_dilation = 0.0;

  // Cohort list with defaults filled in.
  std::vector<phantom::CohortSpec> resolved_cohorts() const;
  // Model input must match the crop; scenarios must name known cohorts.
  void validate() const;
};

struct ResultRow {
  std::string approach;
  std::string scenario;
  std::uint64_t seed = 0;
  MetricsRow metrics;
  std::optional<double> mass_in_mask;  // mean over test patients; absent for CL
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  nlohmann::json summary;
};

// P(label = 1) for every sample at `stage`.
std::vector<double> predict_positive(const model::GuidedAttentionNet<float>& net,
                                     std::span<const numcore::Tensor<float>> params, std::span<const Sample> samples,
                                     model::Stage stage);

// Early attention map A_s at input resolution. Stage 1 has no trained early
// module but the map is still defined by the current parameters.
numcore::Tensor<float> attention_map(const model::GuidedAttentionNet<float>& net,
                                     std::span<const numcore::Tensor<float>> params, const Sample& sample);

double mean_attention_mass(const model::GuidedAttentionNet<float>& net,
                           std::span<const numcore::Tensor<float>> params, std::span<const Sample> samples,
                           double dilation = 0.0);

// Frozen late summary z_cls rows [N x d_l] from stage-2 forwards.
TensorF imaging_features(const model::GuidedAttentionNet<float>& net, std::span<const numcore::Tensor<float>> params,
                         std::span<const Sample> samples);
TensorF clinical_features(std::span<const Sample> samples);
std::vector<int> labels_of(std::span<const Sample> samples);

// Throws DataError when any test id also appears among the fitting ids.
void check_no_leakage(std::span<const Sample> fit, std::span<const Sample> test);

// All six approaches for one scenario and seed.
std::vector<ResultRow> run_cell(const ExperimentConfig& cfg, const ScenarioSpec& scenario, std::uint64_t seed,
                                std::span<const phantom::PatientRecord> records);

// Every scenario x seed cell, `jobs` cells at a time. Rows come out in
// (scenario, seed, approach) order regardless of jobs.
ExperimentResult lodo_experiment(const ExperimentConfig& cfg, std::span<const phantom::PatientRecord> records,
                                 std::size_t jobs = 1);

// Per (approach, scenario) mean and sample std over seeds, plus the
// scenario average per approach.
nlohmann::json summarize(std::span<const ResultRow> rows);

// Tab-separated table: approach, scenario, seed, Spe, Sens, BA, AUC,
// threshold, mass_in_mask.
std::string format_rows_tsv(std::span<const ResultRow> rows);
// Mean values laid out like the reference results table.
std::string format_table(const nlohmann::json& summary);

void to_json(nlohmann::json& j, const ScenarioSpec& s);
void from_json(const nlohmann::json& j, ScenarioSpec& s);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

}  // namespace guided_attn::eval
