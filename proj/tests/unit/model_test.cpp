#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/model/checkpoint.hpp"
#include "guided_attn/model/network.hpp"
#include "guided_attn/numcore/grad_check.hpp"
#include "guided_attn/numcore/ops.hpp"

namespace guided_attn::model {
namespace {

namespace nc = numcore;
using T = nc::Tensor<double>;

ModelConfig micro_config() {
  ModelConfig c;
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

T random_tensor(nc::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(nc::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return T(std::move(shape), std::move(v));
}

T random_volume(const ModelConfig& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(c.input[0] * c.input[1] * c.input[2] * c.input[3]);
  for (auto& x : v) x = u(rng);
  return T({c.input[0], c.input[1], c.input[2], c.input[3]}, std::move(v));
}

// Replaces every parameter by a draw of the given scale (gain/bias of layer
// norms included) so that gradients are not dominated by the tiny init.
Parameters<double> randomized(const GuidedAttentionNet<double>& net, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  Parameters<double> p;
  for (const auto& spec : net.layout()) p.push_back(random_tensor(spec.shape, rng, scale));
  return p;
}

TEST(Encoder, ShapeArithmetic) {
  ModelConfig c;
  c.input = {3, 16, 32, 32};
  c.patch = {2, 4, 4};
  c.early_dim = 8;
  c.late_dim = 16;
  c.blocks_per_stage = 1;
  c.n_heads = 2;
  GuidedAttentionNet<float> net(c);
  auto params = net.init_parameters();
  nc::Tensor<float> x({3, 16, 32, 32}, 0.5f);
  auto fm = net.encode(params, x);
  EXPECT_EQ(fm.early_map().shape(), (nc::Shape{8, 8, 8, 8}));
  EXPECT_EQ(fm.late_map().shape(), (nc::Shape{16, 4, 4, 4}));
  EXPECT_EQ(fm.early_tokens.dim(0), 8 * fm.late_tokens.dim(0));
}

TEST(Encoder, ShapeChainHoldsForRandomConfigs) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> pick(1, 2);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = micro_config();
    c.patch = {pick(rng), pick(rng), pick(rng)};
    c.input = {1, c.patch[0] * 2 * pick(rng), c.patch[1] * 2 * pick(rng), c.patch[2] * 2 * pick(rng)};
    GuidedAttentionNet<double> net(c);
    auto fm = net.encode(net.init_parameters(), random_volume(c, rng));
    EXPECT_EQ(fm.early_tokens.dim(0), 8 * fm.late_tokens.dim(0));
    EXPECT_EQ(fm.early_tokens.dim(0), c.early_tokens());
  }
}

TEST(Encoder, RejectsIndivisibleExtents) {
  ModelConfig c = micro_config();
  c.input = {3, 8, 8, 9};
  EXPECT_THROW(GuidedAttentionNet<double>{c}, UsageError);
  c.input = {3, 8, 8, 8};
  c.patch = {2, 2, 8};  // grid of 1 cannot be merged 2x
  EXPECT_THROW(GuidedAttentionNet<double>{c}, UsageError);
}

TEST(Encoder, ZeroInputGivesFiniteOutput) {
  GuidedAttentionNet<float> net(micro_config());
  auto params = net.init_parameters();
  nc::Tensor<float> x({3, 8, 8, 8}, 0.0f);
  auto fm = net.encode(params, x);
  for (float v : fm.early_tokens.data()) EXPECT_TRUE(std::isfinite(v));
  for (float v : fm.late_tokens.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encoder, SameSeedIsBitwiseIdentical) {
  std::mt19937_64 rng(1);
  auto x = random_volume(micro_config(), rng);
  GuidedAttentionNet<double> a(micro_config()), b(micro_config());
  auto fa = a.encode(a.init_parameters(), x);
  auto fb = b.encode(b.init_parameters(), x);
  for (std::size_t i = 0; i < fa.late_tokens.numel(); ++i) EXPECT_EQ(fa.late_tokens[i], fb.late_tokens[i]);
  for (std::size_t i = 0; i < fa.early_tokens.numel(); ++i) EXPECT_EQ(fa.early_tokens[i], fb.early_tokens[i]);
}

TEST(EarlyAttention, IdenticalTokensGiveUniformWeights) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 5, 0.5);
  FeatureMaps<double> fm;
  fm.early_grid = c.early_grid();
  fm.late_grid = c.late_grid();
  std::mt19937_64 rng(2);
  auto row = random_tensor({1, c.early_dim}, rng);
  std::vector<double> v;
  for (std::size_t i = 0; i < c.early_tokens(); ++i) v.insert(v.end(), row.data().begin(), row.data().end());
  fm.early_tokens = T({c.early_tokens(), c.early_dim}, v);
  auto art = net.early_attention(params, fm);
  for (double w : art.head_weights.data()) EXPECT_NEAR(w, 1.0 / c.early_tokens(), 1e-15);
}

TEST(EarlyAttention, MapIsUnitSumAndNonNegative) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto params = randomized(net, 100 + trial, 0.4);
    auto r = net.forward(params, random_volume(c, rng), nullptr, Stage::kGuided);
    ASSERT_TRUE(r.attention.has_value());
    EXPECT_EQ(r.attention->map.shape(), (nc::Shape{1, 8, 8, 8}));
    double total = 0;
    for (double v : r.attention->map.data()) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-5);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      double s = 0;
      for (std::size_t j = 0; j < c.early_tokens(); ++j) s += r.attention->head_weights[h * c.early_tokens() + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

AttentionWeights<double> random_pool_weights(std::size_t d, std::mt19937_64& rng) {
  return {random_tensor({d, d}, rng), random_tensor({d}, rng), random_tensor({d, d}, rng), random_tensor({d}, rng),
          random_tensor({d, d}, rng), random_tensor({d}, rng), random_tensor({d, d}, rng), random_tensor({d}, rng)};
}

TEST(Pooling, TwoTokenPermutationPermutesWeights) {
  std::mt19937_64 rng(4);
  const std::size_t d = 4;
  auto w = random_pool_weights(d, rng);
  auto q = random_tensor({1, d}, rng);
  auto tokens = random_tensor({2, d}, rng);
  std::vector<double> swapped(tokens.data().begin() + d, tokens.data().end());
  swapped.insert(swapped.end(), tokens.data().begin(), tokens.data().begin() + d);
  auto a = attention_pool(q, tokens, w, 2);
  auto b = attention_pool(q, T({2, d}, swapped), w, 2);
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_NEAR(a.weights[h * 2 + 0], b.weights[h * 2 + 1], 1e-15);
    EXPECT_NEAR(a.weights[h * 2 + 1], b.weights[h * 2 + 0], 1e-15);
  }
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(a.output[i], b.output[i], 1e-12);
}

TEST(Pooling, ClosedFormTwoTokenSingleHead) {
  // Identity projections with zero bias: q = t, K = V = tokens.
  const std::size_t d = 2;
  T eye({d, d}, std::vector<double>{1, 0, 0, 1});
  T zero({d}, 0.0);
  AttentionWeights<double> w{eye, zero, eye, zero, eye, zero, eye, zero};
  T q({1, d}, std::vector<double>{1.0, 2.0});
  T tokens({2, d}, std::vector<double>{0.5, -1.0, 2.0, 0.25});
  auto r = attention_pool(q, tokens, w, 1);
  const double s0 = (1.0 * 0.5 + 2.0 * -1.0) / std::sqrt(2.0);
  const double s1 = (1.0 * 2.0 + 2.0 * 0.25) / std::sqrt(2.0);
  const double p0 = std::exp(s0) / (std::exp(s0) + std::exp(s1)), p1 = 1.0 - p0;
  EXPECT_NEAR(r.weights[0], p0, 1e-15);
  EXPECT_NEAR(r.weights[1], p1, 1e-15);
  EXPECT_NEAR(r.output[0], p0 * 0.5 + p1 * 2.0, 1e-15);
  EXPECT_NEAR(r.output[1], p0 * -1.0 + p1 * 0.25, 1e-15);
}

TEST(LateAttention, ZeroDeltaMatchesNoDelta) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 6, 0.4);
  std::mt19937_64 rng(6);
  auto tokens = random_tensor({c.late_tokens(), c.late_dim}, rng);
  T delta({c.late_dim}, 0.0);
  auto a = net.late_attention(params, tokens, nullptr);
  auto b = net.late_attention(params, tokens, &delta);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  T bad({c.late_dim + 1}, 0.0);
  EXPECT_THROW(net.late_attention(params, tokens, &bad), UsageError);
}

TEST(LateAttention, IdenticalTokensIgnoreQuery) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 7, 0.4);
  std::mt19937_64 rng(7);
  auto v = random_tensor({1, c.late_dim}, rng);
  std::vector<double> rows;
  for (std::size_t i = 0; i < c.late_tokens(); ++i) rows.insert(rows.end(), v.data().begin(), v.data().end());
  T tokens({c.late_tokens(), c.late_dim}, rows);
  auto w = net.late_weights(params);
  auto expected = nc::add_bias(nc::matmul(nc::add_bias(nc::matmul(v, w.v_w), w.v_b), w.out_w), w.out_b);
  T delta = random_tensor({c.late_dim}, rng, 3.0);
  auto z1 = net.late_attention(params, tokens, nullptr);
  auto z2 = net.late_attention(params, tokens, &delta);
  for (std::size_t i = 0; i < c.late_dim; ++i) {
    EXPECT_NEAR(z1[i], expected[i], 1e-12);
    EXPECT_NEAR(z2[i], expected[i], 1e-12);
  }
}

TEST(LateAttention, InvariantToTokenPermutation) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 8, 0.4);
  std::mt19937_64 rng(8);
  auto tokens = random_tensor({c.late_tokens(), c.late_dim}, rng);
  std::vector<std::size_t> perm(c.late_tokens());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> index;
  for (auto r : perm)
    for (std::size_t k = 0; k < c.late_dim; ++k) index.push_back(r * c.late_dim + k);
  auto permuted = nc::gather(tokens, index, tokens.shape());
  auto a = net.late_attention(params, tokens, nullptr);
  auto b = net.late_attention(params, permuted, nullptr);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(ClinicalProjector, ZeroWeightsGiveZero) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 9, 0.4);
  net.reinitialize(params, Module::kClinicalProjector, 1);  // truncated normal weights, zero bias
  params[net.index_of("clinical_projector.weight")] = T({c.clinical_dim, c.late_dim}, 0.0);
  std::mt19937_64 rng(9);
  auto delta = net.project_clinical(params, random_tensor({c.clinical_dim}, rng));
  for (double v : delta.data()) EXPECT_EQ(v, 0.0);
}

TEST(ClinicalProjector, OneHotSelectsRowPlusBias) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 10, 0.4);
  std::vector<double> onehot(c.clinical_dim, 0.0);
  onehot[3] = 1.0;
  auto delta = net.project_clinical(params, T({c.clinical_dim}, onehot));
  const auto& w = params[net.index_of("clinical_projector.weight")];
  const auto& b = params[net.index_of("clinical_projector.bias")];
  for (std::size_t j = 0; j < c.late_dim; ++j) EXPECT_DOUBLE_EQ(delta[j], w[3 * c.late_dim + j] + b[j]);
}

TEST(ClinicalProjector, MatchesDenseMatvecAndChecksLength) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 11, 0.4);
  std::mt19937_64 rng(11);
  auto x = random_tensor({c.clinical_dim}, rng);
  auto delta = net.project_clinical(params, x);
  const auto& w = params[net.index_of("clinical_projector.weight")];
  const auto& b = params[net.index_of("clinical_projector.bias")];
  for (std::size_t j = 0; j < c.late_dim; ++j) {
    double acc = b[j];
    for (std::size_t k = 0; k < c.clinical_dim; ++k) acc += x[k] * w[k * c.late_dim + j];
    EXPECT_NEAR(delta[j], acc, 1e-12);
  }
  EXPECT_THROW(net.project_clinical(params, T({c.clinical_dim + 1}, 0.0)), UsageError);
}

TEST(Forward, EarlyBranchDoesNotFeedClassifier) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 12, 0.4);
  std::mt19937_64 rng(12);
  auto x = random_volume(c, rng);
  auto s1 = net.forward(params, x, nullptr, Stage::kGlobal);
  auto s2 = net.forward(params, x, nullptr, Stage::kGuided);
  EXPECT_FALSE(s1.attention.has_value());
  EXPECT_TRUE(s2.attention.has_value());
  EXPECT_EQ(s1.probabilities[0], s2.probabilities[0]);
  EXPECT_EQ(s1.probabilities[1], s2.probabilities[1]);
}

TEST(Forward, ZeroClinicalProjectorMatchesStepTwo) {
  const auto c = micro_config();
  GuidedAttentionNet<float> net(c);
  auto params = net.init_parameters();
  params[net.index_of("clinical_projector.weight")] = nc::Tensor<float>({c.clinical_dim, c.late_dim}, 0.0f);
  params[net.index_of("clinical_projector.bias")] = nc::Tensor<float>({c.late_dim}, 0.0f);
  std::mt19937_64 rng(13);
  auto x = random_volume(c, rng).cast<float>();
  auto xc = random_tensor({c.clinical_dim}, rng).cast<float>();
  auto s2 = net.forward(params, x, nullptr, Stage::kGuided);
  auto s3 = net.forward(params, x, &xc, Stage::kClinical);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(s2.probabilities[i], s3.probabilities[i], 1e-6);
}

TEST(Forward, ProbabilitiesSumToOne) {
  const auto c = micro_config();
  GuidedAttentionNet<float> net(c);
  auto params = net.init_parameters();
  std::mt19937_64 rng(14);
  for (int i = 0; i < 100; ++i) {
    auto xc = random_tensor({c.clinical_dim}, rng).cast<float>();
    auto r = net.forward(params, random_volume(c, rng).cast<float>(), &xc, Stage::kClinical);
    EXPECT_NEAR(r.probabilities[0] + r.probabilities[1], 1.0f, 1e-6f);
  }
}

TEST(Forward, StepThreeRequiresClinicalVector) {
  GuidedAttentionNet<double> net(micro_config());
  std::mt19937_64 rng(15);
  EXPECT_THROW(net.forward(net.init_parameters(), random_volume(micro_config(), rng), nullptr, Stage::kClinical),
               UsageError);
}

TEST(Forward, ActiveParametersPerStage) {
  GuidedAttentionNet<double> net(micro_config());
  auto count_module = [&](Stage s, Module m) {
    std::size_t n = 0;
    for (auto i : net.active_parameters(s)) n += net.layout()[i].module == m;
    return n;
  };
  EXPECT_EQ(count_module(Stage::kGlobal, Module::kEarlyAttention), 0u);
  EXPECT_GT(count_module(Stage::kGuided, Module::kEarlyAttention), 0u);
  EXPECT_EQ(count_module(Stage::kGuided, Module::kClinicalProjector), 0u);
  EXPECT_EQ(count_module(Stage::kClinical, Module::kClinicalProjector), 2u);
}

TEST(Forward, GradientsMatchFiniteDifferencesInEveryStage) {
  const auto c = micro_config();
  GuidedAttentionNet<double> net(c);
  auto params = randomized(net, 16, 0.3);
  std::mt19937_64 rng(16);
  auto x = random_volume(c, rng);
  auto xc = random_tensor({c.clinical_dim}, rng);
  auto target = nc::normalize_sum(random_volume({1, 8, 8, 8}, rng).with_shape({1, 8, 8, 8}));
  for (Stage stage : {Stage::kGlobal, Stage::kGuided, Stage::kClinical}) {
    auto f = [&](std::span<const T> p) {
      auto r = net.forward(p, x, &xc, stage);
      std::vector<int> y = {1};
      auto loss = nc::cross_entropy_logits(r.logits, y);
      if (r.attention) loss = nc::add(loss, nc::scale(nc::mean(nc::square(nc::sub(r.attention->map, target))), 100.0));
      return loss;
    };
    auto report = nc::grad_check(f, params, {.eps = 1e-3, .fourth_order = true, .coords_per_param = 10, .seed = 2});
    EXPECT_LE(report.max_relative_error, 1e-5)
        << "stage " << to_int(stage) << " worst " << net.layout()[report.worst_param].name << "[" << report.worst_coord
        << "] ad=" << report.worst_autodiff << " fd=" << report.worst_numeric;
  }
}

TEST(Checkpoint, RoundTripsAndDetectsCorruption) {
  const auto c = micro_config();
  GuidedAttentionNet<float> net(c);
  Checkpoint ck{c, {2, 7, 0.25}, net.init_parameters()};
  const auto dir = std::filesystem::temp_directory_path() / "guided_attn_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "step2.json";
  save_checkpoint(path, ck);
  auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.meta.stage, 2);
  EXPECT_EQ(loaded.meta.epoch, 7);
  ASSERT_EQ(loaded.params.size(), ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i)
    for (std::size_t j = 0; j < ck.params[i].numel(); ++j) ASSERT_EQ(loaded.params[i][j], ck.params[i][j]);

  std::filesystem::resize_file(dir / "step2.json.bin", 40);
  try {
    load_checkpoint(path);
    FAIL() << "truncated blob accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter-count mismatch"), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace guided_attn::model
