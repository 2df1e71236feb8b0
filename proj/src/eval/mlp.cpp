#include "guided_attn/eval/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/common/random.hpp"
#include "guided_attn/numcore/ops.hpp"
#include "guided_attn/training/optimizer.hpp"
#include "guided_attn/training/trainer.hpp"

namespace guided_attn::eval {

namespace nc = numcore;

namespace {

TensorF uniform(nc::Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<float> v(nc::shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(u(rng));
  return TensorF(std::move(shape), std::move(v));
}

TensorF rows_of(const TensorF& x, std::span<const std::size_t> rows) {
  const std::size_t f = x.dim(1);
  std::vector<float> out(rows.size() * f);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * f), f, out.begin() + static_cast<std::ptrdiff_t>(r * f));
  }
  return TensorF({rows.size(), f}, std::move(out));
}

void check_xy(const TensorF& x, std::span<const int> y, std::size_t inputs, const char* what) {
  if (x.rank() != 2 || x.dim(0) != y.size() || x.dim(0) == 0) {
    throw UsageError(std::string("train_mlp: ") + what + " features must be [N x F] with N labels");
  }
  if (x.dim(1) != inputs) throw UsageError(std::string("train_mlp: ") + what + " feature width mismatch");
}

}  // namespace

Mlp::Mlp(std::size_t inputs, std::size_t hidden, std::uint64_t seed) : inputs_(inputs) {
  if (inputs == 0 || hidden == 0) throw UsageError("Mlp: widths must be positive");
  Rng rng(seed);
  const double b1 = 1.0 / std::sqrt(static_cast<double>(inputs));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  params_ = {uniform({inputs, hidden}, b1, rng), TensorF({hidden}, 0.0f), uniform({hidden, 2}, b2, rng),
             TensorF({2}, 0.0f)};
}

TensorF Mlp::logits(std::span<const TensorF> params, const TensorF& features) const {
  if (features.rank() != 2 || features.dim(1) != inputs_) {
    throw UsageError("Mlp: expected features [N x " + std::to_string(inputs_) + "], got " +
                     nc::shape_to_string(features.shape()));
  }
  const auto hidden = nc::gelu(nc::add_bias(nc::matmul(features, params[0]), params[1]));
  return nc::add_bias(nc::matmul(hidden, params[2]), params[3]);
}

std::vector<double> Mlp::predict(const TensorF& features) const {
  const auto p = nc::softmax(logits(params_, features), 1);
  std::vector<double> out(features.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[2 * i + 1];
  return out;
}

MlpFit train_mlp(const TensorF& train_x, std::span<const int> train_y, const TensorF& val_x,
                 std::span<const int> val_y, const MlpConfig& cfg, std::uint64_t seed) {
  if (train_x.rank() != 2) throw UsageError("train_mlp: features must be [N x F]");
  const std::size_t inputs = train_x.dim(1);
  check_xy(train_x, train_y, inputs, "training");
  check_xy(val_x, val_y, inputs, "validation");
  if (cfg.batch_size == 0 || !(cfg.lr > 0.0)) throw UsageError("train_mlp: batch_size and lr must be positive");

  MlpFit fit;
  fit.model = Mlp(inputs, cfg.hidden, derive_seed(seed, {0}));
  auto& params = fit.model.parameters();
  std::vector<TensorF> best = params;
  const std::vector<std::size_t> active{0, 1, 2, 3};
  const training::AdamConfig adam{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8};
  training::AdamState state;
  training::EarlyStopper stopper(cfg.patience);

  std::vector<std::size_t> order(train_x.dim(0));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::vector<float>> grads(params.size());
  std::vector<int> batch_y;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng(derive_seed(seed, {1, epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      batch_y.clear();
      for (std::size_t r : rows) batch_y.push_back(train_y[r]);
      nc::Tape<float> tape;
      std::vector<TensorF> leaves;
      for (const auto& p : params) leaves.push_back(tape.leaf(p));
      tape.backward(nc::cross_entropy_logits(fit.model.logits(leaves, rows_of(train_x, rows)), batch_y));
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = tape.grad(leaves[i]);
        grads[i].assign(g.begin(), g.end());
        if (grads[i].empty()) grads[i].assign(params[i].numel(), 0.0f);
      }
      training::adam_step(params, grads, active, state, adam);
    }
    const double val_loss = nc::cross_entropy_logits(fit.model.logits(params, val_x), val_y).item();
    if (!std::isfinite(val_loss)) throw NumericalError("train_mlp: non-finite validation loss");
    const bool stop = stopper.update(val_loss);
    if (stopper.last_improved()) best = params;
    if (stop) break;
  }
  params = best;
  fit.best_epoch = stopper.best_epoch();
  fit.best_val_loss = stopper.best_loss();
  fit.epochs = stopper.epochs();
  return fit;
}

TensorF concat_features(const TensorF& a, const TensorF& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw UsageError("concat_features: row counts differ");
  }
  const TensorF parts[] = {a, b};
  return nc::concat_cols<float>(parts);
}

void to_json(nlohmann::json& j, const MlpConfig& c) {
  j = {{"hidden", c.hidden},         {"lr", c.lr},       {"weight_decay", c.weight_decay},
       {"max_epochs", c.max_epochs}, {"patience", c.patience}, {"batch_size", c.batch_size}};
}

void from_json(const nlohmann::json& j, MlpConfig& c) {
  const MlpConfig d;
  c.hidden = j.value("hidden", d.hidden);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.patience = j.value("patience", d.patience);
  c.batch_size = j.value("batch_size", d.batch_size);
}

}  // namespace guided_attn::eval
