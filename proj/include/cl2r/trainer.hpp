// SPDX-License-Identifier: Apache-2.0
#pragma once

// Sequential task training: each task fine-tunes the previous task's model on
// memory + current data under cross-entropy against the classifier plus
// lambda-weighted feature distillation toward the frozen previous model, then
// refreshes the episodic memory and freezes a checkpoint.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cl2r/container.hpp"
#include "cl2r/data.hpp"
#include "cl2r/error.hpp"
#include "cl2r/geometry.hpp"
#include "cl2r/losses.hpp"
#include "cl2r/memory.hpp"
#include "cl2r/nn.hpp"
#include "cl2r/random.hpp"

namespace cl2r {

enum class ClassifierMode { FixedSimplex, Trainable };

inline const char* to_string(ClassifierMode m) { return m == ClassifierMode::FixedSimplex ? "fixed_simplex" : "trainable"; }

inline ClassifierMode parse_classifier_mode(const std::string& s) {
  if (s == "fixed_simplex") return ClassifierMode::FixedSimplex;
  if (s == "trainable") return ClassifierMode::Trainable;
  fail(ErrorCode::Config, "unknown classifier mode '" + s + "' (expected fixed_simplex or trainable)");
}

struct ExperimentConfig {
  ModelConfig model;
  TrainingHyperparams training;
  std::size_t memory_per_class = 20;
  ClassifierMode classifier = ClassifierMode::FixedSimplex;
  FdMode fd_mode = FdMode::MemoryOnly;
  bool normalize_features = false;  // L2-normalize features before the classifier
  bool center_simplex = false;      // mean-center + unit-normalize simplex vertices
  std::uint64_t shuffle_seed = 0;
  std::uint64_t memory_seed = 0;
  std::uint64_t classifier_seed = 0;  // trainable rows only

  void validate(std::size_t total_classes) const {
    model.validate();
    training.validate();
    require(memory_per_class >= 1, ErrorCode::Config, "memory.per_class must be positive");
    if (classifier == ClassifierMode::FixedSimplex) model.validate(total_classes);
  }
};

/// Classifier rows learned alongside the features (experience-replay
/// baseline). One row per seen class slot, appended task by task.
struct TrainableClassifier {
  Eigen::MatrixXd weights;
  Eigen::MatrixXd velocity;

  bool operator==(const TrainableClassifier& o) const {
    return weights.rows() == o.weights.rows() && weights.cols() == o.weights.cols() && weights == o.weights;
  }

  /// New rows ~ U(-1/sqrt(d), 1/sqrt(d)) from the given stream.
  void grow(std::size_t rows, std::size_t dim, Rng& rng) {
    const auto old_rows = weights.rows();
    const auto d = static_cast<Eigen::Index>(dim);
    Eigen::MatrixXd w(static_cast<Eigen::Index>(rows), d);
    if (old_rows > 0) w.topRows(old_rows) = weights;
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    for (Eigen::Index r = old_rows; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < d; ++c) w(r, c) = rng.uniform(-bound, bound);
    weights = std::move(w);
    velocity = Eigen::MatrixXd::Zero(weights.rows(), weights.cols());
  }
};

struct EpochLog {
  std::size_t task = 0;   // 1-based
  std::size_t epoch = 0;  // 0-based within the task
  double ce = 0.0;
  double fd = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

/// Frozen result of one task.
struct TaskCheckpoint {
  std::size_t task = 0;  // 0-based
  FeatureExtractorState model;
  ClassifierMode mode = ClassifierMode::FixedSimplex;
  std::optional<SimplexPrototypes> prototypes;
  Eigen::MatrixXd trainable_weights;
  EpisodicMemory memory;  // memory after this task's update
  double lambda = 0.0;

  bool operator==(const TaskCheckpoint& o) const {
    return task == o.task && model == o.model && mode == o.mode && prototypes == o.prototypes &&
           trainable_weights.rows() == o.trainable_weights.rows() &&
           trainable_weights.cols() == o.trainable_weights.cols() && trainable_weights == o.trainable_weights &&
           memory == o.memory && lambda == o.lambda;
  }
};

struct ModelTimeline {
  std::vector<TaskCheckpoint> checkpoints;
  std::optional<SimplexPrototypes> prototypes;
  std::vector<EpochLog> log;

  std::size_t size() const { return checkpoints.size(); }

  std::vector<FeatureExtractorState> models() const {
    std::vector<FeatureExtractorState> out;
    for (const auto& c : checkpoints) out.push_back(c.model);
    return out;
  }
};

/// Mutable state carried from task to task.
struct TrainerState {
  FeatureExtractorState model;
  EpisodicMemory memory;
  TrainableClassifier trainable;
};

struct TaskOutcome {
  TaskCheckpoint checkpoint;
  std::vector<EpochLog> log;
};

/// Trains one task in place on `state` and returns its frozen checkpoint.
/// `previous` is the frozen model of the preceding task (absent for the
/// first one). `prototypes` is required in fixed-simplex mode.
inline TaskOutcome run_task(TrainerState& state, const Task& task, const FeatureExtractorState* previous,
                            const ExperimentConfig& config, const SimplexPrototypes* prototypes) {
  const auto context = [&](std::size_t epoch) {
    return "task " + std::to_string(task.index + 1) + ", epoch " + std::to_string(epoch);
  };
  require(!task.samples.empty(), ErrorCode::Data, "task " + std::to_string(task.index + 1) + " has no samples");
  for (std::size_t c : task.classes)
    if (state.memory.classes().count(c) != 0)
      fail(ErrorCode::Disjointness, "task " + std::to_string(task.index + 1) + " reintroduces class slot " + std::to_string(c));

  const bool fd_active = config.fd_mode != FdMode::Off && previous != nullptr;
  const double lambda =
      fd_active ? lambda_for_task(config.training.lambda_base, static_cast<std::int64_t>(task.classes.size()),
                                  static_cast<std::int64_t>(state.memory.classes().size()))
                : 0.0;

  if (config.classifier == ClassifierMode::FixedSimplex) {
    require(prototypes != nullptr, ErrorCode::InvalidArgument, "fixed-simplex mode needs prototypes");
  } else {
    std::size_t rows = 0;
    for (std::size_t c : task.classes) rows = std::max(rows, c + 1);
    rows = std::max<std::size_t>(rows, static_cast<std::size_t>(state.trainable.weights.rows()));
    Rng rng(derive_seed(config.classifier_seed, task.index));
    state.trainable.grow(rows, state.model.feature_dim(), rng);
  }

  // Each task starts a fresh optimizer from the warm-started weights.
  state.model.velocity = zeros_like(state.model.layers);
  if (config.classifier == ClassifierMode::Trainable)
    state.trainable.velocity.setZero(state.trainable.weights.rows(), state.trainable.weights.cols());

  const LabeledBatch training_set = build_training_set(state.memory, task);
  Rng shuffle(derive_seed(config.shuffle_seed, task.index));

  TaskOutcome out;
  for (std::size_t epoch = 0; epoch < config.training.epochs_per_task; ++epoch) {
    double ce_sum = 0.0;
    double fd_sum = 0.0;
    std::size_t ce_n = 0;
    std::size_t fd_n = 0;
    for (const LabeledBatch& batch : shuffled_batches(training_set, config.training.batch_size, shuffle)) {
      LossSpec spec;
      spec.classifier = config.classifier == ClassifierMode::FixedSimplex ? &prototypes->vertices()
                                                                            : &state.trainable.weights;
      spec.previous = fd_active ? previous : nullptr;
      spec.lambda = lambda;
      spec.fd_mode = config.fd_mode;
      spec.normalize_features = config.normalize_features;
      spec.want_classifier_grad = config.classifier == ClassifierMode::Trainable;

      CombinedLoss loss;
      try {
        loss = combined_loss(batch, state.model, spec);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::DegenerateFeature) fail(ErrorCode::Divergence, context(epoch) + ": " + e.message());
        throw;
      }
      if (!std::isfinite(loss.report.total))
        fail(ErrorCode::Divergence, context(epoch) + ": non-finite loss");
      try {
        apply_gradients(state.model, loss.grads, config.training, epoch);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::Divergence) fail(ErrorCode::Divergence, context(epoch) + ": " + e.message());
        throw;
      }
      if (config.classifier == ClassifierMode::Trainable) {
        if (!loss.classifier_grad.allFinite()) fail(ErrorCode::Divergence, context(epoch) + ": non-finite classifier gradient");
        sgd_step(detail::as_span(state.trainable.weights), detail::as_span(loss.classifier_grad),
                 detail::as_span(state.trainable.velocity), learning_rate_at(config.training, epoch),
                 config.training.weight_decay, config.training.momentum);
      }
      ce_sum += loss.report.ce_value * static_cast<double>(loss.report.ce_count);
      fd_sum += loss.report.fd_value * static_cast<double>(loss.report.fd_count);
      ce_n += loss.report.ce_count;
      fd_n += loss.report.fd_count;
    }
    if (!all_finite(state.model)) fail(ErrorCode::Divergence, context(epoch) + ": non-finite parameters");
    EpochLog row;
    row.task = task.index + 1;
    row.epoch = epoch;
    row.ce = ce_n ? ce_sum / static_cast<double>(ce_n) : 0.0;
    row.fd = fd_n ? fd_sum / static_cast<double>(fd_n) : 0.0;
    row.lambda = lambda;
    row.total = row.ce + lambda * row.fd;
    out.log.push_back(row);
  }

  update_memory(state.memory, task);

  out.checkpoint.task = task.index;
  out.checkpoint.model = state.model;
  out.checkpoint.mode = config.classifier;
  if (config.classifier == ClassifierMode::FixedSimplex)
    out.checkpoint.prototypes = *prototypes;
  else
    out.checkpoint.trainable_weights = state.trainable.weights;
  out.checkpoint.memory = state.memory;
  out.checkpoint.lambda = lambda;
  return out;
}

using TaskCallback = std::function<void(const TaskCheckpoint&, const std::vector<EpochLog>&)>;

/// Runs every task in order, warm-starting each from the previous one.
inline ModelTimeline run_sequence(const ExperimentConfig& config, const TaskSequence& sequence,
                                  const TaskCallback& on_task = {}) {
  sequence.validate();
  require(!sequence.tasks.empty(), ErrorCode::Config, "task sequence is empty");
  config.validate(sequence.total_classes);

  ModelTimeline timeline;
  if (config.classifier == ClassifierMode::FixedSimplex)
    timeline.prototypes = build_simplex(sequence.total_classes, config.center_simplex);

  TrainerState state;
  state.model = init_model(config.model);
  state.memory.per_class_budget = config.memory_per_class;
  state.memory.rng_seed = config.memory_seed;

  for (const Task& task : sequence.tasks) {
    const FeatureExtractorState* previous = timeline.checkpoints.empty() ? nullptr : &timeline.checkpoints.back().model;
    TaskOutcome outcome = run_task(state, task, previous, config, timeline.prototypes ? &*timeline.prototypes : nullptr);
    if (on_task) on_task(outcome.checkpoint, outcome.log);
    timeline.log.insert(timeline.log.end(), outcome.log.begin(), outcome.log.end());
    timeline.checkpoints.push_back(std::move(outcome.checkpoint));
  }
  return timeline;
}

// Checkpoint files ------------------------------------------------------------

inline constexpr Magic kCheckpointMagic{'C', 'L', '2', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline Bytes serialize_checkpoint(const TaskCheckpoint& ckpt) {
  Container c(kCheckpointMagic, kCheckpointVersion);
  ByteWriter meta;
  meta.u64(ckpt.task);
  meta.u8(ckpt.mode == ClassifierMode::FixedSimplex ? 0 : 1);
  meta.f64(ckpt.lambda);
  c.add("task", std::move(meta).bytes());
  add_model_sections(c, ckpt.model);
  if (ckpt.prototypes) c.add("prototypes", ckpt.prototypes->serialize());
  if (ckpt.mode == ClassifierMode::Trainable) {
    ByteWriter w;
    w.u64(static_cast<std::uint64_t>(ckpt.trainable_weights.rows()));
    w.u64(static_cast<std::uint64_t>(ckpt.trainable_weights.cols()));
    for (Eigen::Index r = 0; r < ckpt.trainable_weights.rows(); ++r)
      for (Eigen::Index col = 0; col < ckpt.trainable_weights.cols(); ++col) w.f64(ckpt.trainable_weights(r, col));
    c.add("trainable_classifier", std::move(w).bytes());
  }
  c.add("memory", serialize_memory(ckpt.memory));
  return c.serialize();
}

inline TaskCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& context = "checkpoint") {
  const Container c = Container::parse(bytes, kCheckpointMagic, kCheckpointVersion, context);
  TaskCheckpoint ckpt;
  {
    ByteReader r(c.section("task"), "task");
    ckpt.task = r.u64();
    const std::uint8_t mode = r.u8();
    if (mode > 1) fail(ErrorCode::Corruption, context + ": unknown classifier mode");
    ckpt.mode = mode == 0 ? ClassifierMode::FixedSimplex : ClassifierMode::Trainable;
    ckpt.lambda = r.f64();
    r.expect_done();
  }
  ckpt.model = read_model_sections(c);
  if (c.has("prototypes")) ckpt.prototypes = SimplexPrototypes::deserialize(c.section("prototypes"));
  if (ckpt.mode == ClassifierMode::Trainable) {
    ByteReader r(c.section("trainable_classifier"), "trainable_classifier");
    const auto rows = static_cast<Eigen::Index>(r.u64());
    const auto cols = static_cast<Eigen::Index>(r.u64());
    if (static_cast<std::size_t>(rows * cols) * 8 != r.remaining())
      fail(ErrorCode::Corruption, context + ": trainable classifier size mismatch");
    ckpt.trainable_weights.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) ckpt.trainable_weights(i, j) = r.f64();
  }
  ckpt.memory = deserialize_memory(c.section("memory"));
  return ckpt;
}

inline void save_checkpoint(const TaskCheckpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ckpt));
}

inline TaskCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path), path.string());
}

}  // namespace cl2r
