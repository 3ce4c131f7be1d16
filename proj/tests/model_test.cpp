#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <numeric>

#include "knnx/data_io.hpp"
#include "knnx/model.hpp"
#include "test_support.hpp"

namespace knnx {
namespace {

using testing::mlp;
using testing::random_vector;

LayeredModel identity_dense() {
  ArchSpec a;
  a.input = {2};
  a.layers = {LayerSpec::dense(2, "logits")};
  return LayeredModel(a, {1, 0, 0, /**/ 0, 1, 0});
}

LabeledDataset two_blobs(double sigma, int per_class, std::uint64_t seed, int dim = 2) {
  BlobSpec spec;
  spec.num_classes = 2;
  spec.dim = dim;
  spec.per_class = per_class;
  spec.spread = 4.0;
  spec.sigma = sigma;
  spec.seed = seed;
  return make_blobs(spec);
}

TEST(ModelTest, BuildIsDeterministic) {
  const auto a = mlp(5, {7, 4}, 3);
  const auto m1 = build_model(a, 7), m2 = build_model(a, 7), m3 = build_model(a, 8);
  EXPECT_EQ(m1.parameters().size(), m2.parameters().size());
  EXPECT_TRUE(std::equal(m1.parameters().begin(), m1.parameters().end(), m2.parameters().begin()));
  EXPECT_FALSE(std::equal(m1.parameters().begin(), m1.parameters().end(), m3.parameters().begin()));
  EXPECT_FALSE(m1.trained());
}

TEST(ModelTest, InitStaysWithinFanInBound) {
  const auto m = build_model(mlp(16, {9}, 3), 3);
  const auto& plan = m.plan();
  for (std::size_t li = 0; li < plan.size(); ++li) {
    if (plan[li].param_count == 0) continue;
    const double bound = std::sqrt(1.0 / static_cast<double>(plan[li].fan_in));
    for (double v : m.layer_parameters(li)) EXPECT_LE(std::abs(v), bound);
  }
}

TEST(ModelTest, IdentityDenseLogitsEqualInput) {
  const auto m = identity_dense();
  const auto r = forward_with_taps(m, std::vector<double>{1, 2});
  EXPECT_EQ(r.logits, (std::vector<double>{1, 2}));
  EXPECT_EQ(r.taps.at("logits"), r.logits);
}

TEST(ModelTest, ReluTapClampsNegatives) {
  ArchSpec a;
  a.input = {2};
  a.layers = {LayerSpec::dense(2, "fc"), LayerSpec::relu("relu"), LayerSpec::dense(2, "logits")};
  const LayeredModel m(a, {1, 0, 0, 0, 1, 0, /**/ 1, 0, 0, 0, 1, 0});
  const auto r = forward_with_taps(m, std::vector<double>{-1, 3});
  EXPECT_EQ(r.taps.at("relu"), (std::vector<double>{0, 3}));
  EXPECT_EQ(r.taps.size(), 3u);
}

TEST(ModelTest, ForwardIsRepeatableAndChecksShape) {
  Rng rng(11);
  const auto m = build_model(mlp(6, {5}, 3), 2);
  const auto x = random_vector(rng, 6);
  const auto r1 = forward_with_taps(m, x), r2 = forward_with_taps(m, x);
  EXPECT_EQ(r1.taps, r2.taps);
  EXPECT_EQ(r1.logits, r2.logits);
  EXPECT_THROW(forward_with_taps(m, std::vector<double>(5, 0.0)), ShapeError);
}

TEST(ModelTest, PredictArgmaxWithLowIndexTies) {
  EXPECT_EQ(argmax_label(std::vector<double>{0.1, 0.9, 0.3}), 1);
  EXPECT_EQ(argmax_label(std::vector<double>{0.5, 0.5}), 0);
  ArchSpec a;
  a.input = {1};
  a.layers = {LayerSpec::dense(3, "logits")};
  const LayeredModel m(a, {0, 0.1, 0, 0.9, 0, 0.3});
  EXPECT_EQ(predict(m, std::vector<double>{4.0}), 1);
  EXPECT_EQ(predict(m, std::vector<double>{4.0}), predict(m, std::vector<double>{4.0}));
}

TEST(ModelTest, CrossEntropyKnownValues) {
  EXPECT_NEAR(ce_loss_from_logits(std::vector<double>(10, 0.3), 4), std::log(10.0), 1e-12);
  EXPECT_NEAR(ce_loss_from_logits(std::vector<double>{1000, 0}, 0), 0.0, 1e-300);
  EXPECT_NEAR(ce_loss_from_logits(std::vector<double>{0, 1000}, 0), 1000.0, 1e-9);
  const auto m = identity_dense();
  EXPECT_THROW(ce_loss(m, std::vector<double>{1, 2}, 2), LabelError);
  EXPECT_THROW(ce_loss(m, std::vector<double>{1, 2}, -1), LabelError);
}

TEST(ModelTest, CrossEntropyMatchesHighPrecisionOracle) {
  using big = boost::multiprecision::cpp_bin_float_50;
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = build_model(mlp(4, {6}, 5), static_cast<std::uint64_t>(trial));
    const auto x = random_vector(rng, 4, 3.0);
    const int y = static_cast<int>(rng.below(5));
    const auto z = logits(m, x);
    big sum = 0;
    for (double v : z) sum += boost::multiprecision::exp(big(v));
    const big expected = boost::multiprecision::log(sum) - big(z[static_cast<std::size_t>(y)]);
    const double got = ce_loss(m, x, y);
    EXPECT_NEAR(got, expected.convert_to<double>(), 1e-14 * std::max(1.0, std::abs(got)));
  }
}

TEST(ModelTest, CrossEntropyFiniteAndNonNegativeForLargeLogits) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z(6);
    for (double& v : z) v = rng.uniform(-1e4, 1e4);
    const double l = ce_loss_from_logits(z, static_cast<int>(rng.below(6)));
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_GE(l, 0.0);
  }
}

TEST(ModelTest, TrainingIsDeterministic) {
  const auto data = two_blobs(1.0, 30, 3);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 42;
  const auto m0 = build_model(mlp(2, {8}, 2), 42);
  const auto a = train(m0, data, cfg), b = train(m0, data, cfg);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.trained());
  EXPECT_EQ(a.train_seed(), 42u);
}

TEST(ModelTest, DropoutTrainingIsDeterministicAndIdentityAtInference) {
  ArchSpec a;
  a.input = {2};
  a.layers = {LayerSpec::dense(8, "fc"), LayerSpec::relu("relu"), LayerSpec::dropout(0.5, "drop"), LayerSpec::dense(2, "logits")};
  const auto data = two_blobs(1.0, 20, 4);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 1;
  const auto m = train(build_model(a, 1), data, cfg);
  EXPECT_EQ(m, train(build_model(a, 1), data, cfg));
  const auto r = forward_with_taps(m, data[0].features);
  EXPECT_EQ(r.taps.at("drop"), r.taps.at("relu"));
}

TEST(ModelTest, FreezingEveryTapKeepsParameters) {
  const auto data = two_blobs(1.0, 20, 5);
  const auto arch = mlp(2, {6}, 2);
  const auto m0 = build_model(arch, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  const auto taps = arch.tap_names();
  cfg.frozen_layers = {taps.begin(), taps.end()};
  const auto m1 = train(m0, data, cfg);
  EXPECT_TRUE(std::equal(m0.parameters().begin(), m0.parameters().end(), m1.parameters().begin()));
}

TEST(ModelTest, FrozenLayersAreBitwiseUnchanged) {
  const auto data = two_blobs(1.0, 20, 6);
  const auto arch = mlp(2, {6, 5}, 2);
  const auto m0 = build_model(arch, 3);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.frozen_layers = {"fc1"};
  const auto m1 = train(m0, data, cfg);
  const auto before = m0.layer_parameters(0), after = m1.layer_parameters(0);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), after.begin()));
  const auto l0 = m0.layer_parameters(2), l1 = m1.layer_parameters(2);
  EXPECT_FALSE(std::equal(l0.begin(), l0.end(), l1.begin()));
  cfg.frozen_layers = {"nope"};
  EXPECT_THROW(train(m0, data, cfg), TapError);
}

TEST(ModelTest, TrainFitsSeparableBlobs) {
  const auto data = two_blobs(0.5, 50, 7);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 0.05;
  cfg.seed = 9;
  const auto m = train(build_model(mlp(2, {16}, 2), 9), data, cfg);
  EXPECT_GE(accuracy(m, data), 0.99);
}

TEST(ModelTest, TrainRejectsBadInput) {
  const auto m = build_model(mlp(2, {4}, 2), 1);
  TrainConfig cfg;
  EXPECT_THROW(train(m, LabeledDataset("empty", 2, {}), cfg), DataError);
  EXPECT_THROW(train(m, two_blobs(1.0, 5, 1, 3), cfg), ShapeError);
  cfg.epochs = 0;
  EXPECT_THROW(train(m, two_blobs(1.0, 5, 1), cfg), ArgError);
}

TEST(ModelTest, LastLayerGradientVanishesAtConfidentCorrectPrediction) {
  ArchSpec a;
  a.input = {1};
  a.layers = {LayerSpec::dense(3, "logits")};
  const LayeredModel m(a, {0, 50, 0, 0, 0, 0});
  const auto g = grad_last_layer(m, std::vector<double>{1.0}, 0);
  for (double v : g) EXPECT_LT(std::abs(v), 1e-6);
}

TEST(ModelTest, LastLayerGradientMatchesCentralDifferences) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = build_model(mlp(5, {7}, 4), static_cast<std::uint64_t>(100 + trial));
    const auto x = random_vector(rng, 5);
    const int y = static_cast<int>(rng.below(4));
    const LabeledDataset one("one", 4, {{0, x, y}});
    const auto fd = testing::central_gradient(testing::mean_loss_of_last_layer(m, one), testing::last_block(m));
    EXPECT_LT(testing::relative_error(grad_last_layer(m, x, y), fd), 1e-4);
  }
}

TEST(ModelTest, DuplicateInputsGiveIdenticalGradients) {
  Rng rng(2);
  const auto m = build_model(mlp(3, {4}, 2), 2);
  const auto x = random_vector(rng, 3);
  const auto x2 = x;
  EXPECT_EQ(grad_last_layer(m, x, 1), grad_last_layer(m, x2, 1));
}

TEST(ModelTest, FullBackpropMatchesCentralDifferencesOnCnn) {
  ArchSpec a;
  a.input = {2, 6, 6};
  a.layers = {LayerSpec::conv2d(3, 3, 1, "conv"), LayerSpec::relu("relu1"), LayerSpec::maxpool(2, "pool"),
              LayerSpec::flatten("flat"),         LayerSpec::dense(5, "fc"),  LayerSpec::relu("relu2"),
              LayerSpec::dropout(0.3, "drop"),    LayerSpec::dense(3, "logits")};
  Rng rng(8);
  const auto m = build_model(a, 4);
  const auto x = random_vector(rng, m.input_dim());
  const int y = 2;
  auto trace = detail::forward_trace(m, x, a.layers.size());
  auto up = softmax(trace.acts.back());
  up[y] -= 1.0;
  std::vector<double> grad(m.parameters().size(), 0.0);
  detail::backward(m, trace, up, grad, std::vector<bool>(a.layers.size(), true));
  auto loss = [&](const std::vector<double>& theta) {
    LayeredModel t(a, theta);
    return ce_loss(t, x, y);
  };
  const std::vector<double> theta(m.parameters().begin(), m.parameters().end());
  const auto fd = testing::central_gradient(loss, theta, 1e-6);
  EXPECT_LT(testing::relative_error(grad, fd), 1e-5);
}

TEST(ModelTest, HessianIsSymmetricAndDampingIsExact) {
  const auto data = two_blobs(1.0, 10, 3, 4);
  const auto m = build_model(mlp(4, {5}, 2), 6);
  const auto h0 = hessian_last_layer(m, data, 0.0);
  const auto h1 = hessian_last_layer(m, data, 0.25);
  for (std::size_t i = 0; i < h0.size(); ++i)
    for (std::size_t j = 0; j < h0.size(); ++j) {
      EXPECT_EQ(h0(i, j), h0(j, i));
      EXPECT_EQ(h1(i, j), h0(i, j) + (i == j ? 0.25 : 0.0));
    }
  EXPECT_THROW(hessian_last_layer(m, LabeledDataset("e", 2, {}), 0.0), DataError);
}

TEST(ModelTest, HessianMatchesFiniteDifferenceOfMeanLoss) {
  BlobSpec spec;
  spec.num_classes = 3;
  spec.dim = 3;
  spec.per_class = 7;
  spec.seed = 12;
  const auto all = make_blobs(spec);
  std::vector<std::size_t> first20(20);
  std::iota(first20.begin(), first20.end(), 0);
  const auto data = all.select(first20);
  const auto m = build_model(mlp(3, {4}, 3), 13);
  const auto h = hessian_last_layer(m, data, 0.0);
  const auto fd = testing::central_hessian(testing::mean_loss_of_last_layer(m, data), testing::last_block(m), 1e-3);
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = 0; j < h.size(); ++j) {
      const double err = std::abs(h(i, j) - fd[i][j]);
      EXPECT_TRUE(err <= 1e-3 * std::max(std::abs(h(i, j)), std::abs(fd[i][j])) || err < 1e-9) << i << "," << j;
    }
}

TEST(ModelTest, HessianIsPositiveSemidefinite) {
  const auto data = two_blobs(2.0, 15, 4, 5);
  const auto m = build_model(mlp(5, {6}, 2), 2);
  const auto h = hessian_last_layer(m, data, 0.0);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto v = random_vector(rng, h.size());
    EXPECT_GE(dot(v, h.multiply(v)), -1e-10);
  }
}

TEST(ModelTest, NewtonFitConvergesOnLogisticRegression) {
  const auto data = two_blobs(3.0, 30, 8, 3);
  TrainConfig cfg;
  cfg.optimizer = Optimizer::newton_last_layer;
  cfg.weight_decay = 1e-3;
  cfg.newton_tolerance = 1e-10;
  const auto m = train(build_model(testing::logistic(3, 2), 0), data, cfg);
  EXPECT_LT(last_layer_gradient_norm(m, data, cfg.weight_decay), 1e-8);
}

TEST(ModelTest, NewtonFitLeavesHiddenLayersAlone) {
  const auto data = two_blobs(3.0, 20, 8, 3);
  TrainConfig cfg;
  cfg.optimizer = Optimizer::newton_last_layer;
  cfg.weight_decay = 1e-2;
  const auto m0 = build_model(mlp(3, {4}, 2), 0);
  const auto m1 = train(m0, data, cfg);
  const auto a = m0.layer_parameters(0), b = m1.layer_parameters(0);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  EXPECT_LT(last_layer_gradient_norm(m1, data, cfg.weight_decay), 1e-8);
}

}  // namespace
}  // namespace knnx
