#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guided_attn/model/network.hpp"
#include "guided_attn/phantom/clinical.hpp"
#include "guided_attn/phantom/cohort.hpp"
#include "guided_attn/training/losses.hpp"
#include "guided_attn/training/optimizer.hpp"

namespace guided_attn::training {

using model::GuidedAttentionNet;
using model::Parameters;

struct StageConfig {
  int stage = 1;
  double lr = 5e-5;
  double weight_decay = 1e-5;
  double lambda_loc = 0.0;
  std::size_t max_epochs = 300;
  std::size_t patience = 20;
  std::size_t batch_size = 8;
  double blur_sigma = 1.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // lambda == 0 exactly in stage 1 and > 0 otherwise; lr > 0; batch > 0.
  void validate() const;
  AdamConfig adam() const;
};

// Stage 1..3 with lr (5e-5, 2e-5, 2e-5), wd 1e-5, lambda (0, 100, 100), 300 epochs.
std::array<StageConfig, 3> default_stage_configs();

// One patient in model-ready form.
struct Sample {
  std::string id;
  std::string cohort;
  Tensor<float> volume;    // [C x D x H x W] in [0, 1]
  Tensor<float> mask;      // [1 x D x H x W] binary
  Tensor<float> clinical;  // [K]
  int label = 0;
};

std::vector<Sample> make_samples(std::span<const phantom::PatientRecord> records, const phantom::ClinicalSchema& schema,
                                 const phantom::ClinicalStats& stats);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Holds out round(fraction * n_g) of every (label, cohort) group g.
Split stratified_split(std::span<const phantom::PatientRecord> records, double val_fraction, std::uint64_t seed);

// Stops once `patience` epochs in a row fail to improve strictly on the best
// validation loss. Epochs are numbered from 1.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  // Returns true when training should stop after this epoch.
  bool update(double val_loss);
  bool last_improved() const { return last_improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  std::size_t epochs() const { return epochs_; }

 private:
  std::size_t patience_;
  std::size_t epochs_ = 0;
  std::size_t best_epoch_ = 0;
  double best_loss_ = 0.0;
  bool last_improved_ = false;
};

struct EpochRecord {
  int stage = 1;
  std::size_t epoch = 0;
  LossReport train;
  LossReport val;
  double lr = 0.0;
  std::size_t skipped_steps = 0;
};

// Two history lines (train and val) with epoch, split, L, L_cls, L_loc, lr, stage.
std::vector<nlohmann::json> history_lines(const EpochRecord& record);

struct StageResult {
  int stage = 1;
  Parameters<float> start_params;
  Parameters<float> best_params;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::vector<EpochRecord> history;
};

struct StepwiseState {
  Parameters<float> params;
  AdamState adam;
  std::vector<StageResult> stages;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mean composite loss over the samples on constants (no tape).
LossReport evaluate_loss(const GuidedAttentionNet<float>& net, std::span<const Tensor<float>> params,
                         std::span<const Sample> samples, const StageConfig& cfg);

// Mini-batch Adam over the stage's active parameters with a fresh optimizer
// state. Leaves state.params at the best-validation parameters and appends
// the stage result. Throws NumericalError when a whole epoch is skipped.
const StageResult& run_stage(const GuidedAttentionNet<float>& net, StepwiseState& state, std::span<const Sample> train,
                             std::span<const Sample> val, const StageConfig& cfg, std::uint64_t seed,
                             const EpochCallback& on_epoch = {});

// Runs the given stages in increasing order, each starting from the previous
// stage's best parameters.
StepwiseState run_stepwise(const GuidedAttentionNet<float>& net, Parameters<float> initial,
                           std::span<const StageConfig> stages, std::span<const Sample> train,
                           std::span<const Sample> val, std::uint64_t seed, const EpochCallback& on_epoch = {});

void to_json(nlohmann::json& j, const StageConfig& c);
void from_json(const nlohmann::json& j, StageConfig& c);

}  // namespace guided_attn::training
