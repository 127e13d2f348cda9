// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "cl2r/nn.hpp"

namespace {

using namespace cl2r;

ModelConfig small_config(std::uint64_t seed = 7) {
  ModelConfig c;
  c.input_dim = 5;
  c.hidden_layers = {8, 6};
  c.feature_dim = 3;
  c.nonlinearity = Nonlinearity::Relu;
  c.seed = seed;
  return c;
}

TEST(InitModel, SameSeedSameChecksum) {
  EXPECT_EQ(init_model(small_config(3)).checksum(), init_model(small_config(3)).checksum());
  EXPECT_EQ(init_model(small_config(3)), init_model(small_config(3)));
}

TEST(InitModel, DifferentSeedsDiffer) {
  EXPECT_NE(init_model(small_config(3)).checksum(), init_model(small_config(4)).checksum());
}

TEST(InitModel, NoHiddenLayersIsLinear) {
  ModelConfig c = small_config();
  c.hidden_layers.clear();
  const auto state = init_model(c);
  ASSERT_EQ(state.layers.size(), 1u);
  EXPECT_EQ(state.layers[0].weight.rows(), 3);
  EXPECT_EQ(state.layers[0].weight.cols(), 5);
  Vector x = Vector::LinSpaced(5, -1, 1);
  EXPECT_TRUE(extract_feature(state, x).isApprox(state.layers[0].weight * x));
}

TEST(InitModel, FeatureDimMustMatchCapacity) {
  try {
    init_model(small_config(), 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Config);
  }
  EXPECT_NO_THROW(init_model(small_config(), 4));
}

TEST(ExtractFeatures, EmptyBatch) {
  const auto state = init_model(small_config());
  EXPECT_TRUE(extract_features(state, {}).empty());
}

TEST(ExtractFeatures, EqualInputsGiveEqualFeatures) {
  const auto state = init_model(small_config());
  const Vector x = Vector::LinSpaced(5, 0.1, 0.9);
  std::vector<Vector> batch{x, Vector::Ones(5), x};
  const auto f = extract_features(state, batch);
  ASSERT_EQ(f.size(), 3u);
  EXPECT_EQ(f[0], f[2]);
}

TEST(ExtractFeatures, ZeroModelGivesZeroFeatures) {
  auto state = init_model(small_config());
  for (auto& l : state.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  EXPECT_EQ(extract_feature(state, Vector::Random(5)), Vector::Zero(3));
}

TEST(ExtractFeatures, RejectsBadInput) {
  const auto state = init_model(small_config());
  std::vector<Vector> wrong_dim{Vector::Zero(4)};
  EXPECT_THROW(extract_features(state, wrong_dim), Error);
  Vector bad = Vector::Zero(5);
  bad[2] = std::numeric_limits<double>::quiet_NaN();
  std::vector<Vector> nan_batch{bad};
  try {
    extract_features(state, nan_batch);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Data);
  }
}

TEST(LearningRate, MilestoneSchedule) {
  TrainingHyperparams hp;
  hp.learning_rate = 0.1;
  hp.lr_milestones = {50, 64};
  hp.lr_decay_factor = 0.1;
  hp.epochs_per_task = 70;
  EXPECT_DOUBLE_EQ(learning_rate_at(hp, 0), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate_at(hp, 49), 0.1);
  EXPECT_NEAR(learning_rate_at(hp, 60), 0.01, 1e-15);
  EXPECT_NEAR(learning_rate_at(hp, 69), 0.001, 1e-15);
}

TEST(Hyperparams, RejectsBadMilestones) {
  TrainingHyperparams hp;
  hp.epochs_per_task = 10;
  hp.lr_milestones = {5, 5};
  EXPECT_THROW(hp.validate(), Error);
  hp.lr_milestones = {10};
  EXPECT_THROW(hp.validate(), Error);
  hp.lr_milestones = {3, 7};
  EXPECT_NO_THROW(hp.validate());
}

TEST(ApplyGradients, ZeroGradientNoDecayNoMomentumIsIdentity) {
  auto state = init_model(small_config());
  const auto before = state.layers;
  TrainingHyperparams hp;
  hp.weight_decay = 0;
  hp.momentum = 0;
  apply_gradients(state, zeros_like(state.layers), hp, 0);
  EXPECT_EQ(state.layers, before);
  EXPECT_EQ(state.step, 1u);
}

TEST(ApplyGradients, PlainStepMatchesDefinition) {
  auto state = init_model(small_config());
  const auto before = state.layers;
  TrainingHyperparams hp;
  hp.learning_rate = 0.05;
  hp.weight_decay = 0.01;
  hp.momentum = 0;
  auto grads = zeros_like(state.layers);
  for (auto& g : grads) {
    g.weight.setConstant(0.3);
    g.bias.setConstant(-0.2);
  }
  apply_gradients(state, grads, hp, 0);
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    const Eigen::MatrixXd w = before[l].weight - 0.05 * (grads[l].weight + 0.01 * before[l].weight);
    EXPECT_TRUE(state.layers[l].weight.isApprox(w, 1e-15));
    const Vector b = before[l].bias - 0.05 * (grads[l].bias + 0.01 * before[l].bias);
    EXPECT_LT((state.layers[l].bias - b).norm(), 1e-15);
  }
}

TEST(ApplyGradients, MomentumAccumulates) {
  auto state = init_model(small_config());
  TrainingHyperparams hp;
  hp.learning_rate = 1.0;
  hp.weight_decay = 0;
  hp.momentum = 0.5;
  auto grads = zeros_like(state.layers);
  grads[0].bias.setConstant(1.0);
  const Vector b0 = state.layers[0].bias;
  apply_gradients(state, grads, hp, 0);
  apply_gradients(state, grads, hp, 0);
  // velocity: 1, then 1.5 -> total displacement 2.5
  EXPECT_LT((state.layers[0].bias - (b0.array() - 2.5).matrix()).norm(), 1e-15);
}

TEST(ApplyGradients, NonFiniteGradientNamesLayer) {
  auto state = init_model(small_config());
  auto grads = zeros_like(state.layers);
  grads[1].weight(0, 0) = std::numeric_limits<double>::infinity();
  try {
    apply_gradients(state, grads, TrainingHyperparams{}, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Divergence);
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
}

TEST(ModelSections, RoundTripIsBitExact) {
  auto state = init_model(small_config());
  state.velocity[0].weight.setConstant(0.125);
  state.step = 42;
  Container c(Magic{'T', 'E', 'S', 'T', 'M', 'O', 'D', 'L'}, 1);
  add_model_sections(c, state);
  const Bytes bytes = c.serialize();
  const Container back = Container::parse(bytes, Magic{'T', 'E', 'S', 'T', 'M', 'O', 'D', 'L'}, 1, "test");
  EXPECT_EQ(read_model_sections(back), state);
}

}  // namespace
