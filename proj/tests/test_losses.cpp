// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "cl2r/losses.hpp"

namespace {

using namespace cl2r;

ModelConfig config(std::size_t feature_dim, std::uint64_t seed, Nonlinearity nl = Nonlinearity::Tanh) {
  ModelConfig c;
  c.input_dim = 6;
  c.hidden_layers = {7, 5};
  c.feature_dim = feature_dim;
  c.nonlinearity = nl;
  c.seed = seed;
  return c;
}

LabeledBatch random_batch(std::size_t n, std::size_t dim, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  LabeledBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    Vector x(static_cast<Eigen::Index>(dim));
    for (Eigen::Index k = 0; k < x.size(); ++k) x[k] = rng.normal();
    b.push(std::move(x), rng.below(classes), i % 3 == 0 ? SampleSource::Memory : SampleSource::CurrentTask);
  }
  return b;
}

TEST(CeSimplex, ZeroFeatureIsLogN) {
  const auto p = build_simplex(4);
  std::vector<Vector> f{Vector::Zero(3)};
  std::vector<std::size_t> y{2};
  EXPECT_NEAR(ce_simplex_loss(f, y, p).value, std::log(4.0), 1e-15);
}

TEST(CeSimplex, FeatureOnOwnPrototypeMatchesBruteForce) {
  const auto p = build_simplex(3);
  // Hand-written vertices of the 3-simplex and a direct softmax.
  const double alpha = (1.0 - std::sqrt(3.0)) / 2.0;
  const double w[3][2] = {{1, 0}, {0, 1}, {alpha, alpha}};
  const double f[2] = {0, 1};
  double logits[3];
  for (int j = 0; j < 3; ++j) logits[j] = w[j][0] * f[0] + w[j][1] * f[1];
  const double expected = -std::log(std::exp(logits[1]) / (std::exp(logits[0]) + std::exp(logits[1]) + std::exp(logits[2])));

  std::vector<Vector> feats{p.vertices().row(1).transpose()};
  std::vector<std::size_t> y{1};
  EXPECT_NEAR(ce_simplex_loss(feats, y, p).value, expected, 1e-14);
}

TEST(CeSimplex, LossDecreasesAlongOwnPrototype) {
  const auto p = build_simplex(5);
  std::vector<std::size_t> y{3};
  double previous = std::numeric_limits<double>::infinity();
  for (double c : {1.0, 10.0, 100.0}) {
    std::vector<Vector> feats{c * p.vertices().row(3).transpose()};
    const double loss = ce_simplex_loss(feats, y, p).value;
    EXPECT_LT(loss, previous) << c;
    EXPECT_GE(loss, 0.0);
    previous = loss;
  }
}

TEST(CeSimplex, Errors) {
  const auto p = build_simplex(4);
  std::vector<Vector> f{Vector::Zero(3)};
  std::vector<std::size_t> bad{4};
  EXPECT_THROW(ce_simplex_loss(f, bad, p), Error);
  EXPECT_THROW(ce_simplex_loss({}, {}, p), Error);
}

TEST(CeSimplex, SoftmaxSumsToOneForLargeLogits) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Vector logits(20);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits[i] = 800.0 * rng.normal();
    EXPECT_NEAR(log_softmax(logits).array().exp().sum(), 1.0, 1e-9);
  }
}

TEST(CeSimplex, NormalizedFeatureGradientMatchesFiniteDifference) {
  const auto p = build_simplex(6);
  Vector f(5);
  f << 0.3, -1.2, 0.7, 2.0, -0.4;
  std::vector<std::size_t> y{2};
  std::vector<Vector> feats{f};
  const auto r = cross_entropy(feats, y, p.vertices(), true);
  for (Eigen::Index k = 0; k < f.size(); ++k) {
    Vector up = f, down = f;
    up[k] += 1e-6;
    down[k] -= 1e-6;
    std::vector<Vector> fu{up}, fd{down};
    const double numeric =
        (cross_entropy(fu, y, p.vertices(), true).value - cross_entropy(fd, y, p.vertices(), true).value) / 2e-6;
    EXPECT_NEAR(r.feature_grads[0][k], numeric, 1e-8);
  }
}

TEST(FeatureDistillation, KnownValues) {
  Vector a(3), b(3);
  a << 1, 2, 3;
  b << 2, -1, 0;
  std::vector<Vector> na{a}, same{a * 4.0}, ortho{b}, anti{-a};
  EXPECT_NEAR(feature_distillation_loss(na, same).value, 0.0, 1e-15);
  EXPECT_NEAR(feature_distillation_loss(na, ortho).value, 1.0, 1e-15);
  EXPECT_NEAR(feature_distillation_loss(na, anti).value, 2.0, 1e-15);
}

TEST(FeatureDistillation, ZeroNormNamesSample) {
  std::vector<Vector> fresh{Vector::Ones(3), Vector::Zero(3)};
  std::vector<Vector> old{Vector::Ones(3), Vector::Ones(3)};
  try {
    feature_distillation_loss(fresh, old);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateFeature);
    EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos);
  }
}

TEST(FeatureDistillation, GradientMatchesFiniteDifference) {
  Vector f(4), g(4);
  f << 0.5, -1.0, 2.0, 0.1;
  g << -0.3, 0.4, 1.0, 1.5;
  std::vector<Vector> nf{f}, og{g};
  const auto r = feature_distillation_loss(nf, og);
  for (Eigen::Index k = 0; k < 4; ++k) {
    std::vector<Vector> up{f}, down{f};
    up[0][k] += 1e-6;
    down[0][k] -= 1e-6;
    const double numeric = (feature_distillation_loss(up, og).value - feature_distillation_loss(down, og).value) / 2e-6;
    EXPECT_NEAR(r.feature_grads[0][k], numeric, 1e-8);
  }
}

TEST(LambdaForTask, Schedule) {
  for (int k = 1; k < 50; k += 7) EXPECT_DOUBLE_EQ(lambda_for_task(5, k, k), 5.0);
  EXPECT_DOUBLE_EQ(lambda_for_task(5, 10, 40), 2.5);
  EXPECT_DOUBLE_EQ(lambda_for_task(5, 10, 0), 0.0);
  EXPECT_THROW(lambda_for_task(5, 0, 3), Error);
  EXPECT_THROW(lambda_for_task(5, 2, -1), Error);
  EXPECT_THROW(lambda_for_task(-1, 2, 1), Error);
}

class CombinedLossTest : public ::testing::Test {
 protected:
  SimplexPrototypes protos = build_simplex(5);
  FeatureExtractorState current = init_model(config(4, 11));
  FeatureExtractorState previous = init_model(config(4, 12));
  LabeledBatch batch = random_batch(12, 6, 5, 3);
};

TEST_F(CombinedLossTest, LambdaZeroEqualsCrossEntropy) {
  LossSpec spec{&protos.vertices(), &previous, 0.0};
  const auto r = combined_loss(batch, current, spec);
  const auto feats = extract_features(current, batch.inputs);
  EXPECT_EQ(r.report.total, ce_simplex_loss(feats, batch.labels, protos).value);
}

TEST_F(CombinedLossTest, IdenticalPreviousModelHasZeroDistillation) {
  const FeatureExtractorState copy = current;
  LossSpec spec{&protos.vertices(), &copy, 3.0};
  const auto r = combined_loss(batch, current, spec);
  EXPECT_NEAR(r.report.fd_value, 0.0, 1e-15);
  EXPECT_NEAR(r.report.total, r.report.ce_value, 1e-14);
}

TEST_F(CombinedLossTest, MixedBatchComposesStandaloneTerms) {
  LossSpec spec{&protos.vertices(), &previous, 2.5};
  const auto r = combined_loss(batch, current, spec);

  const auto feats = extract_features(current, batch.inputs);
  const double ce = ce_simplex_loss(feats, batch.labels, protos).value;
  std::vector<Vector> fresh, frozen;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch.sources[i] == SampleSource::Memory) {
      fresh.push_back(feats[i]);
      frozen.push_back(extract_feature(previous, batch.inputs[i]));
    }
  const double fd = feature_distillation_loss(fresh, frozen).value;
  EXPECT_NEAR(r.report.ce_value, ce, 1e-12);
  EXPECT_NEAR(r.report.fd_value, fd, 1e-12);
  EXPECT_NEAR(r.report.total, ce + 2.5 * fd, 1e-12);
  EXPECT_EQ(r.report.fd_count, fresh.size());
  EXPECT_EQ(r.report.ce_count, batch.size());
}

TEST_F(CombinedLossTest, DistillationIgnoresCurrentTaskSamples) {
  LossSpec spec{&protos.vertices(), &previous, 2.5};
  const double fd = combined_loss(batch, current, spec).report.fd_value;
  LabeledBatch perturbed = batch;
  for (std::size_t i = 0; i < perturbed.size(); ++i)
    if (perturbed.sources[i] == SampleSource::CurrentTask) perturbed.inputs[i] = perturbed.inputs[i] * -3.0 + Vector::Ones(6);
  EXPECT_EQ(combined_loss(perturbed, current, spec).report.fd_value, fd);
}

TEST_F(CombinedLossTest, FullBatchModeUsesEverySample) {
  LossSpec spec{&protos.vertices(), &previous, 1.0, FdMode::FullBatch};
  const auto r = combined_loss(batch, current, spec);
  EXPECT_EQ(r.report.fd_count, batch.size());
  spec.fd_mode = FdMode::Off;
  EXPECT_EQ(combined_loss(batch, current, spec).report.fd_value, 0.0);
}

TEST_F(CombinedLossTest, PreviousModelIsNeverModified) {
  const FeatureExtractorState snapshot = previous;
  LossSpec spec{&protos.vertices(), &previous, 2.0};
  for (int i = 0; i < 5; ++i) combined_loss(batch, current, spec);
  EXPECT_EQ(previous, snapshot);
}

TEST_F(CombinedLossTest, PositiveLambdaWithoutPreviousIsConfigError) {
  LossSpec spec{&protos.vertices(), nullptr, 1.0};
  try {
    combined_loss(batch, current, spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Config);
  }
}

TEST_F(CombinedLossTest, BoundsHold) {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto other = init_model(config(4, 100 + trial));
    LossSpec spec{&protos.vertices(), &other, 1.0, FdMode::FullBatch};
    const auto r = combined_loss(random_batch(8, 6, 5, rng.below(1000)), current, spec);
    EXPECT_GE(r.report.ce_value, 0.0);
    EXPECT_GE(r.report.fd_value, 0.0);
    EXPECT_LE(r.report.fd_value, 2.0);
  }
}

TEST(GradientCheck, RandomModelsAgreeWithFiniteDifferences) {
  const auto protos = build_simplex(5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto current = init_model(config(4, seed));
    const auto previous = init_model(config(4, seed + 1000));
    const auto batch = random_batch(9, 6, 5, seed + 77);
    LossSpec spec{&protos.vertices(), &previous, 2.5};
    EXPECT_LT(gradient_check(current, spec, batch, 1e-6, 256, seed), 1e-4) << seed;
  }
}

TEST(GradientCheck, ReluModelAgrees) {
  const auto protos = build_simplex(5);
  const auto current = init_model(config(4, 21, Nonlinearity::Relu));
  const auto previous = init_model(config(4, 22, Nonlinearity::Relu));
  const auto batch = random_batch(9, 6, 5, 4);
  LossSpec spec{&protos.vertices(), &previous, 1.5, FdMode::FullBatch, true};
  EXPECT_LT(gradient_check(current, spec, batch, 1e-6), 1e-4);
}

TEST(GradientCheck, ConstantLossHasZeroError) {
  // A single-row classifier makes the softmax identically 1.
  const Eigen::MatrixXd single = Eigen::MatrixXd::Ones(1, 4);
  const auto current = init_model(config(4, 3));
  LabeledBatch batch = random_batch(5, 6, 1, 8);
  LossSpec spec{&single, nullptr, 0.0};
  EXPECT_LT(gradient_check(current, spec, batch, 1e-5), 1e-12);
}

TEST(GradientCheck, EpsilonOutOfRange) {
  const auto protos = build_simplex(5);
  const auto current = init_model(config(4, 3));
  const auto batch = random_batch(3, 6, 5, 8);
  LossSpec spec{&protos.vertices()};
  EXPECT_THROW(gradient_check(current, spec, batch, 1e-2), Error);
  EXPECT_THROW(gradient_check(current, spec, batch, 1e-9), Error);
}

}  // namespace
