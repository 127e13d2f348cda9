// SPDX-License-Identifier: Apache-2.0
#include <filesystem>

#include <gtest/gtest.h>

#include "cl2r/trainer.hpp"

namespace {

using namespace cl2r;
namespace fs = std::filesystem;

TaskSplit small_split(std::size_t tasks, std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.num_classes = 8;
  s.samples_per_class = 15;
  s.input_dim = 6;
  s.sigma = 0.3;
  s.mean_seed = seed;
  s.noise_seed = seed + 1;
  return split_tasks(make_synthetic(s), tasks, 2, seed + 2);
}

ExperimentConfig small_config(std::size_t total_classes) {
  ExperimentConfig c;
  c.model.input_dim = 6;
  c.model.hidden_layers = {10, 8};
  c.model.feature_dim = total_classes - 1;
  c.model.nonlinearity = Nonlinearity::Tanh;
  c.model.seed = 3;
  c.training.learning_rate = 0.05;
  c.training.epochs_per_task = 4;
  c.training.lr_milestones = {3};
  c.training.batch_size = 16;
  c.training.momentum = 0.9;
  c.memory_per_class = 3;
  c.shuffle_seed = 4;
  c.memory_seed = 5;
  c.classifier_seed = 6;
  return c;
}

TEST(Trainer, FirstTaskHasNoDistillation) {
  const auto split = small_split(2);
  const auto tl = run_sequence(small_config(6), split.sequence);
  for (const auto& e : tl.log)
    if (e.task == 1) {
      EXPECT_EQ(e.lambda, 0.0);
      EXPECT_EQ(e.fd, 0.0);
    }
  EXPECT_EQ(tl.checkpoints[0].lambda, 0.0);
  // Second task: 3 new classes over 3 classes in memory.
  EXPECT_DOUBLE_EQ(tl.checkpoints[1].lambda, 5.0);
}

TEST(Trainer, FdOffLogsZeroEverywhere) {
  const auto split = small_split(3);
  auto c = small_config(6);
  c.fd_mode = FdMode::Off;
  const auto tl = run_sequence(c, split.sequence);
  ASSERT_EQ(tl.log.size(), 12u);
  for (const auto& e : tl.log) {
    EXPECT_EQ(e.fd, 0.0);
    EXPECT_EQ(e.lambda, 0.0);
    EXPECT_EQ(e.total, e.ce);
  }
}

TEST(Trainer, PrototypesNeverChange) {
  const auto split = small_split(3);
  const auto tl = run_sequence(small_config(6), split.sequence);
  ASSERT_TRUE(tl.prototypes.has_value());
  EXPECT_EQ(tl.prototypes->checksum(), build_simplex(6).checksum());
  for (const auto& ck : tl.checkpoints) EXPECT_EQ(*ck.prototypes, *tl.prototypes);
}

TEST(Trainer, SingleTaskTimeline) {
  const auto split = small_split(1);
  const auto tl = run_sequence(small_config(6), split.sequence);
  ASSERT_EQ(tl.size(), 1u);
  for (const auto& e : tl.log) EXPECT_EQ(e.fd, 0.0);
  EXPECT_EQ(tl.checkpoints[0].memory.classes().size(), 6u);
}

TEST(Trainer, RepeatRunsAreBitwiseIdentical) {
  const auto split = small_split(3);
  const auto a = run_sequence(small_config(6), split.sequence);
  const auto b = run_sequence(small_config(6), split.sequence);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_EQ(a.checkpoints[t], b.checkpoints[t]);
    EXPECT_EQ(serialize_checkpoint(a.checkpoints[t]), serialize_checkpoint(b.checkpoints[t]));
  }
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].total, b.log[i].total);
}

TEST(Trainer, CheckpointsAreFrozen) {
  const auto split = small_split(3);
  std::vector<std::uint64_t> at_emit;
  const auto tl = run_sequence(small_config(6), split.sequence, [&](const TaskCheckpoint& ck, const std::vector<EpochLog>&) {
    at_emit.push_back(ck.model.checksum());
  });
  ASSERT_EQ(at_emit.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(tl.checkpoints[t].model.checksum(), at_emit[t]);
  EXPECT_NE(at_emit[0], at_emit[1]);
}

TEST(Trainer, WarmStartsFromThePreviousTask) {
  const auto split = small_split(2);
  auto c = small_config(6);
  const auto protos = build_simplex(6);
  TrainerState state;
  state.model = init_model(c.model);
  state.memory.per_class_budget = c.memory_per_class;
  const auto first = run_task(state, split.sequence.tasks[0], nullptr, c, &protos);
  c.training.learning_rate = 1e-12;
  const auto second = run_task(state, split.sequence.tasks[1], &first.checkpoint.model, c, &protos);
  for (std::size_t i = 0; i < first.checkpoint.model.parameter_count(); ++i)
    EXPECT_NEAR(second.checkpoint.model.parameter(i), first.checkpoint.model.parameter(i), 1e-9);
}

TEST(Trainer, MemoryCoversCompletedTasks) {
  const auto split = small_split(3);
  const auto tl = run_sequence(small_config(6), split.sequence);
  std::set<std::size_t> expected;
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t c : split.sequence.tasks[t].classes) expected.insert(c);
    EXPECT_EQ(tl.checkpoints[t].memory.classes(), expected);
    for (const auto& [cls, n] : tl.checkpoints[t].memory.per_class_counts()) EXPECT_EQ(n, 3u);
  }
}

TEST(Trainer, LossDecreasesWithinTheFirstTask) {
  const auto split = small_split(1);
  auto c = small_config(6);
  c.training.epochs_per_task = 15;
  c.training.lr_milestones = {};
  const auto tl = run_sequence(c, split.sequence);
  EXPECT_LT(tl.log.back().ce, 0.5 * tl.log.front().ce);
  for (const auto& ck : tl.checkpoints) EXPECT_TRUE(all_finite(ck.model));
}

TEST(Trainer, TrainableBaselineGrowsItsClassifier) {
  const auto split = small_split(3);
  auto c = small_config(6);
  c.classifier = ClassifierMode::Trainable;
  c.fd_mode = FdMode::Off;
  const auto tl = run_sequence(c, split.sequence);
  EXPECT_FALSE(tl.prototypes.has_value());
  EXPECT_EQ(tl.checkpoints[0].trainable_weights.rows(), 2);
  EXPECT_EQ(tl.checkpoints[2].trainable_weights.rows(), 6);
  // Rows of earlier classes keep being trained.
  EXPECT_NE(tl.checkpoints[0].trainable_weights.row(0), tl.checkpoints[2].trainable_weights.row(0));
}

TEST(Trainer, FeatureDimMustMatchCapacity) {
  const auto split = small_split(2);
  auto c = small_config(6);
  c.model.feature_dim = 4;
  try {
    run_sequence(c, split.sequence);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Config);
  }
  c.classifier = ClassifierMode::Trainable;
  EXPECT_NO_THROW(run_sequence(c, split.sequence));
}

TEST(Trainer, DivergenceCarriesTaskContext) {
  const auto split = small_split(2);
  auto c = small_config(6);
  c.model.nonlinearity = Nonlinearity::Relu;
  c.training.learning_rate = 1e200;
  try {
    run_sequence(c, split.sequence);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Divergence);
    EXPECT_NE(std::string(e.what()).find("task 1"), std::string::npos) << e.what();
  }
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidArgument;
}

TEST(Checkpoint, RoundTripBothModes) {
  const auto split = small_split(2);
  const auto dir = fs::temp_directory_path() / "cl2r_test_trainer";
  fs::create_directories(dir);
  for (auto mode : {ClassifierMode::FixedSimplex, ClassifierMode::Trainable}) {
    auto c = small_config(6);
    c.classifier = mode;
    const auto tl = run_sequence(c, split.sequence);
    for (const auto& ck : tl.checkpoints) {
      const auto path = dir / ("ck_" + std::to_string(static_cast<int>(mode)) + "_" + std::to_string(ck.task));
      save_checkpoint(ck, path);
      EXPECT_EQ(load_checkpoint(path), ck);
    }
  }
}

TEST(Checkpoint, DamageIsDetected) {
  const auto split = small_split(1);
  const auto tl = run_sequence(small_config(6), split.sequence);
  const Bytes b = serialize_checkpoint(tl.checkpoints[0]);
  Bytes truncated(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(b.size() / 2));
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(truncated); }), ErrorCode::Corruption);
  Bytes flipped = b;
  flipped[b.size() / 3] ^= 0x01;
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(flipped); }), ErrorCode::Corruption);
  Bytes empty;
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(empty); }), ErrorCode::Corruption);

  const Container orig = Container::parse(b, kCheckpointMagic, kCheckpointVersion, "ck");
  Container newer(kCheckpointMagic, kCheckpointVersion + 1);
  for (const auto& name : orig.section_names()) newer.add(name, orig.section(name));
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(newer.serialize()); }), ErrorCode::UnsupportedVersion);
  EXPECT_EQ(code_of([&] { load_checkpoint(fs::temp_directory_path() / "cl2r_no_such_file.ckpt"); }), ErrorCode::Io);
}

}  // namespace
