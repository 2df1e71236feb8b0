#include "guided_attn/training/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/common/random.hpp"
#include "guided_attn/numcore/ops.hpp"

namespace guided_attn::training {

namespace nc = numcore;

void StageConfig::validate() const {
  if (stage < 1 || stage > 3) throw UsageError("stage must be 1, 2 or 3");
  if (!(lr > 0.0)) throw UsageError("stage " + std::to_string(stage) + ": lr must be positive");
  if (weight_decay < 0.0) throw UsageError("stage " + std::to_string(stage) + ": weight_decay must be non-negative");
  if (stage == 1 && lambda_loc != 0.0) throw UsageError("stage 1 has no early attention; lambda_loc must be 0");
  if (stage > 1 && !(lambda_loc > 0.0)) throw UsageError("stage " + std::to_string(stage) + ": lambda_loc must be positive");
  if (batch_size == 0) throw UsageError("batch_size must be positive");
  if (max_epochs == 0) throw UsageError("max_epochs must be positive");
  if (blur_sigma < 0.0) throw UsageError("blur_sigma must be non-negative");
}

AdamConfig StageConfig::adam() const { return {lr, weight_decay, beta1, beta2, eps}; }

std::array<StageConfig, 3> default_stage_configs() {
  StageConfig s1;
  StageConfig s2 = s1;
  s2.stage = 2;
  s2.lr = 2e-5;
  s2.lambda_loc = 100.0;
  StageConfig s3 = s2;
  s3.stage = 3;
  return {s1, s2, s3};
}

std::vector<Sample> make_samples(std::span<const phantom::PatientRecord> records, const phantom::ClinicalSchema& schema,
                                 const phantom::ClinicalStats& stats) {
  std::vector<Sample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    Sample s;
    s.id = r.id;
    s.cohort = r.cohort;
    s.volume = r.volume.data;
    s.mask = r.mask.data;
    auto encoded = phantom::encode_clinical(r.clinical, schema, stats);
    const std::size_t k = encoded.size();
    s.clinical = Tensor<float>({k}, std::move(encoded));
    s.label = r.label;
    out.push_back(std::move(s));
  }
  return out;
}

Split stratified_split(std::span<const phantom::PatientRecord> records, double val_fraction, std::uint64_t seed) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw UsageError("validation fraction must lie in [0, 1)");
  std::map<std::pair<int, std::string>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) groups[{records[i].label, records[i].cohort}].push_back(i);
  Split split;
  std::uint64_t g = 0;
  for (auto& [key, members] : groups) {
    Rng rng(derive_seed(seed, {g++}));
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(members.size())));
    split.val.insert(split.val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

bool EarlyStopper::update(double val_loss) {
  ++epochs_;
  last_improved_ = epochs_ == 1 || val_loss < best_loss_;
  if (last_improved_) {
    best_loss_ = val_loss;
    best_epoch_ = epochs_;
  }
  return epochs_ - best_epoch_ >= patience_;
}

std::vector<nlohmann::json> history_lines(const EpochRecord& r) {
  auto line = [&](const char* split, const LossReport& l) {
    return nlohmann::json{{"stage", r.stage}, {"epoch", r.epoch}, {"split", split}, {"L", l.total},
                          {"L_cls", l.cls},   {"L_loc", l.loc},   {"lr", r.lr}};
  };
  return {line("train", r.train), line("val", r.val)};
}

namespace {

std::vector<Tensor<float>> make_targets(std::span<const Sample> samples, const StageConfig& cfg) {
  std::vector<Tensor<float>> targets;
  if (cfg.lambda_loc == 0.0) return targets;
  targets.reserve(samples.size());
  for (const auto& s : samples) targets.push_back(make_target(s.mask, cfg.blur_sigma));
  return targets;
}

CompositeLoss<float> sample_loss(const GuidedAttentionNet<float>& net, std::span<const Tensor<float>> params,
                                 const Sample& s, const Tensor<float>* target, const StageConfig& cfg) {
  const auto stage = model::stage_from_int(cfg.stage);
  const auto r = net.forward(params, s.volume, &s.clinical, stage);
  const int label[] = {s.label};
  const Tensor<float>* attention = r.attention ? &r.attention->map : nullptr;
  return composite_loss(r.logits, label, attention, target, cfg.lambda_loc);
}

void add_report(LossReport& acc, const LossReport& r) {
  acc.cls += r.cls;
  acc.loc += r.loc;
}

LossReport finish_report(LossReport acc, std::size_t n, double lambda) {
  acc.cls /= static_cast<double>(n);
  acc.loc /= static_cast<double>(n);
  acc.total = acc.cls + lambda * acc.loc;
  return acc;
}

LossReport evaluate_with_targets(const GuidedAttentionNet<float>& net, std::span<const Tensor<float>> params,
                                 std::span<const Sample> samples, const std::vector<Tensor<float>>& targets,
                                 const StageConfig& cfg) {
  LossReport acc;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    add_report(acc, sample_loss(net, params, samples[i], targets.empty() ? nullptr : &targets[i], cfg).report);
  }
  return finish_report(acc, samples.size(), cfg.lambda_loc);
}

void check_disjoint(std::span<const Sample> train, std::span<const Sample> val) {
  std::set<std::string> ids;
  for (const auto& s : train) ids.insert(s.id);
  for (const auto& s : val) {
    if (ids.count(s.id)) throw UsageError("train and validation splits share patient " + s.id);
  }
}

}  // namespace

LossReport evaluate_loss(const GuidedAttentionNet<float>& net, std::span<const Tensor<float>> params,
                         std::span<const Sample> samples, const StageConfig& cfg) {
  if (samples.empty()) throw UsageError("evaluate_loss: empty sample set");
  return evaluate_with_targets(net, params, samples, make_targets(samples, cfg), cfg);
}

const StageResult& run_stage(const GuidedAttentionNet<float>& net, StepwiseState& state, std::span<const Sample> train,
                             std::span<const Sample> val, const StageConfig& cfg, std::uint64_t seed,
                             const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.empty() || val.empty()) throw UsageError("run_stage: train and validation splits must be non-empty");
  check_disjoint(train, val);

  const auto stage = model::stage_from_int(cfg.stage);
  const auto active = net.active_parameters(stage);
  const auto train_targets = make_targets(train, cfg);
  const auto val_targets = make_targets(val, cfg);
  const AdamConfig adam = cfg.adam();

  StageResult result;
  result.stage = cfg.stage;
  result.start_params = state.params;
  result.best_params = state.params;
  state.adam = AdamState{};

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  EarlyStopper stopper(cfg.patience);
  std::vector<std::vector<float>> grads(state.params.size());

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(cfg.stage), epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    LossReport train_acc;
    std::size_t steps = 0, skipped = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const float inv_batch = 1.0f / static_cast<float>(end - start);
      for (std::size_t i : active) grads[i].assign(state.params[i].numel(), 0.0f);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        nc::Tape<float> tape;
        std::vector<Tensor<float>> args = state.params;
        for (std::size_t i : active) args[i] = tape.leaf(state.params[i]);
        auto loss = sample_loss(net, args, train[idx], train_targets.empty() ? nullptr : &train_targets[idx], cfg);
        add_report(train_acc, loss.report);
        tape.backward(nc::scale(loss.total, inv_batch));
        for (std::size_t i : active) {
          const auto g = tape.grad(args[i]);
          for (std::size_t k = 0; k < g.size(); ++k) grads[i][k] += g[k];
        }
      }
      ++steps;
      if (!adam_step(state.params, grads, active, state.adam, adam)) ++skipped;
    }
    if (skipped == steps) {
      throw NumericalError("stage " + std::to_string(cfg.stage) + " epoch " + std::to_string(epoch) +
                           ": every optimizer step had non-finite gradients");
    }

    EpochRecord record;
    record.stage = cfg.stage;
    record.epoch = epoch;
    record.train = finish_report(train_acc, train.size(), cfg.lambda_loc);
    record.val = evaluate_with_targets(net, state.params, val, val_targets, cfg);
    record.lr = cfg.lr;
    record.skipped_steps = skipped;
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);

    const bool stop = stopper.update(record.val.total);
    if (stopper.last_improved()) result.best_params = state.params;
    if (stop) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  state.params = result.best_params;
  state.stages.push_back(std::move(result));
  return state.stages.back();
}

StepwiseState run_stepwise(const GuidedAttentionNet<float>& net, Parameters<float> initial,
                           std::span<const StageConfig> stages, std::span<const Sample> train,
                           std::span<const Sample> val, std::uint64_t seed, const EpochCallback& on_epoch) {
  StepwiseState state;
  state.params = std::move(initial);
  int previous = 0;
  for (const auto& cfg : stages) {
    if (cfg.stage <= previous) throw UsageError("stage configs must be in increasing stage order");
    previous = cfg.stage;
    run_stage(net, state, train, val, cfg, seed, on_epoch);
  }
  return state;
}

void to_json(nlohmann::json& j, const StageConfig& c) {
  j = {{"stage", c.stage},           {"lr", c.lr},
       {"weight_decay", c.weight_decay}, {"lambda_loc", c.lambda_loc},
       {"max_epochs", c.max_epochs}, {"patience", c.patience},
       {"batch_size", c.batch_size}, {"blur_sigma", c.blur_sigma},
       {"beta1", c.beta1},           {"beta2", c.beta2},
       {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, StageConfig& c) {
  const int stage = j.value("stage", 1);
  if (stage < 1 || stage > 3) throw UsageError("stage must be 1, 2 or 3");
  const StageConfig d = default_stage_configs()[static_cast<std::size_t>(stage - 1)];
  c.stage = stage;
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.lambda_loc = j.value("lambda_loc", d.lambda_loc);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.patience = j.value("patience", d.patience);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.blur_sigma = j.value("blur_sigma", d.blur_sigma);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
}

}  // namespace guided_attn::training
