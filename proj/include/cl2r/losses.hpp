// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cl2r/error.hpp"
#include "cl2r/geometry.hpp"
#include "cl2r/nn.hpp"
#include "cl2r/random.hpp"

namespace cl2r {

enum class SampleSource : std::uint8_t { CurrentTask, Memory };

/// Where the feature distillation term is evaluated.
enum class FdMode { MemoryOnly, FullBatch, Off };

inline const char* to_string(FdMode m) {
  switch (m) {
    case FdMode::MemoryOnly: return "memory_only";
    case FdMode::FullBatch: return "full_batch";
    case FdMode::Off: return "off";
  }
  return "?";
}

inline FdMode parse_fd_mode(const std::string& s) {
  if (s == "memory_only") return FdMode::MemoryOnly;
  if (s == "full_batch") return FdMode::FullBatch;
  if (s == "off") return FdMode::Off;
  fail(ErrorCode::Config, "unknown fd_mode '" + s + "' (expected memory_only, full_batch or off)");
}

struct LabeledBatch {
  std::vector<Vector> inputs;
  std::vector<std::size_t> labels;
  std::vector<SampleSource> sources;

  std::size_t size() const { return inputs.size(); }

  void push(Vector x, std::size_t label, SampleSource source) {
    inputs.push_back(std::move(x));
    labels.push_back(label);
    sources.push_back(source);
  }

  void validate(std::size_t capacity) const {
    require(labels.size() == inputs.size() && sources.size() == inputs.size(), ErrorCode::InvalidArgument,
            "batch fields have unequal lengths");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= capacity)
        fail(ErrorCode::InvalidArgument, "label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                                             " exceeds classifier capacity " + std::to_string(capacity));
  }
};

struct LossReport {
  double ce_value = 0.0;
  double fd_value = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  std::size_t ce_count = 0;
  std::size_t fd_count = 0;
};

struct FeatureLoss {
  double value = 0.0;
  std::vector<Vector> feature_grads;
};

struct CrossEntropyResult {
  double value = 0.0;
  std::vector<Vector> feature_grads;
  Eigen::MatrixXd classifier_grad;  // filled only on request
};

namespace detail {

inline Vector normalized_or_throw(const Vector& f, std::size_t index, const char* what) {
  const double n = f.norm();
  if (!(n > 0.0)) fail(ErrorCode::DegenerateFeature, std::string(what) + ": zero-norm feature at sample " + std::to_string(index));
  return f / n;
}

}  // namespace detail

/// Log-softmax with the max logit subtracted before exponentiation.
inline Vector log_softmax(const Vector& logits) {
  const double top = logits.maxCoeff();
  const double lse = top + std::log((logits.array() - top).exp().sum());
  return (logits.array() - lse).matrix();
}

/// Mean softmax cross-entropy with logits classifier * feature. Each row of
/// `classifier` is one class; the softmax normalizer covers every row, so
/// with the simplex classifier it spans seen and not-yet-assigned classes.
///
/// With `normalize_features` the logits use feature / |feature| instead.
inline CrossEntropyResult cross_entropy(std::span<const Vector> features, std::span<const std::size_t> labels,
                                        const Eigen::MatrixXd& classifier, bool normalize_features = false,
                                        bool want_classifier_grad = false) {
  if (features.empty()) fail(ErrorCode::InvalidArgument, "cross-entropy of an empty batch is undefined");
  require(features.size() == labels.size(), ErrorCode::InvalidArgument, "features and labels differ in length");
  const auto classes = static_cast<std::size_t>(classifier.rows());
  const double inv_b = 1.0 / static_cast<double>(features.size());

  CrossEntropyResult out;
  out.feature_grads.reserve(features.size());
  if (want_classifier_grad) out.classifier_grad = Eigen::MatrixXd::Zero(classifier.rows(), classifier.cols());

  for (std::size_t i = 0; i < features.size(); ++i) {
    const Vector& f = features[i];
    require(f.size() == classifier.cols(), ErrorCode::InvalidArgument,
            "feature dimension " + std::to_string(f.size()) + " does not match classifier dimension " +
                std::to_string(classifier.cols()));
    if (labels[i] >= classes)
      fail(ErrorCode::InvalidArgument, "label " + std::to_string(labels[i]) + " out of range for " +
                                           std::to_string(classes) + " classes");
    const Vector u = normalize_features ? detail::normalized_or_throw(f, i, "cross-entropy") : f;
    const Vector logits = classifier * u;
    const Vector log_p = log_softmax(logits);
    out.value += -log_p[static_cast<Eigen::Index>(labels[i])] * inv_b;

    Vector dlogits = log_p.array().exp().matrix();
    dlogits[static_cast<Eigen::Index>(labels[i])] -= 1.0;
    dlogits *= inv_b;
    Vector du = classifier.transpose() * dlogits;
    if (normalize_features) {
      const double n = f.norm();
      du = (du - u * u.dot(du)) / n;
    }
    out.feature_grads.push_back(std::move(du));
    if (want_classifier_grad) out.classifier_grad.noalias() += dlogits * u.transpose();
  }
  return out;
}

inline CrossEntropyResult ce_simplex_loss(std::span<const Vector> features, std::span<const std::size_t> labels,
                                          const SimplexPrototypes& prototypes, bool normalize_features = false) {
  return cross_entropy(features, labels, prototypes.vertices(), normalize_features);
}

/// Mean over samples of 1 - cos(new, old). `old_features` are treated as
/// constants; gradients are returned for `new_features` only.
inline FeatureLoss feature_distillation_loss(std::span<const Vector> new_features,
                                             std::span<const Vector> old_features) {
  require(!new_features.empty(), ErrorCode::InvalidArgument, "feature distillation needs at least one sample");
  require(new_features.size() == old_features.size(), ErrorCode::InvalidArgument,
          "new and old feature lists differ in length");
  const double inv_n = 1.0 / static_cast<double>(new_features.size());
  FeatureLoss out;
  out.feature_grads.reserve(new_features.size());
  for (std::size_t i = 0; i < new_features.size(); ++i) {
    const Vector& f = new_features[i];
    const Vector& g = old_features[i];
    require(f.size() == g.size(), ErrorCode::InvalidArgument, "feature dimensions differ at sample " + std::to_string(i));
    const double nf = f.norm();
    const double ng = g.norm();
    if (!(nf > 0.0)) fail(ErrorCode::DegenerateFeature, "feature distillation: zero-norm new feature at sample " + std::to_string(i));
    if (!(ng > 0.0)) fail(ErrorCode::DegenerateFeature, "feature distillation: zero-norm old feature at sample " + std::to_string(i));
    const double cosine = f.dot(g) / (nf * ng);
    out.value += (1.0 - std::clamp(cosine, -1.0, 1.0)) * inv_n;
    // d(1 - cos)/df = -(g / (|f||g|) - cos * f / |f|^2)
    out.feature_grads.push_back(-(g / (nf * ng) - f * (cosine / (nf * nf))) * inv_n);
  }
  return out;
}

/// lambda_base * sqrt(k_new / k_old); zero when there are no old classes.
inline double lambda_for_task(double lambda_base, std::int64_t new_classes, std::int64_t old_classes) {
  require(lambda_base >= 0 && std::isfinite(lambda_base), ErrorCode::InvalidArgument, "lambda_base must be non-negative");
  require(new_classes >= 1, ErrorCode::InvalidArgument, "a task must introduce at least one class");
  require(old_classes >= 0, ErrorCode::InvalidArgument, "old class count must be non-negative");
  if (old_classes == 0) return 0.0;
  return lambda_base * std::sqrt(static_cast<double>(new_classes) / static_cast<double>(old_classes));
}

/// Everything besides the batch and the current model that the training
/// objective depends on.
struct LossSpec {
  const Eigen::MatrixXd* classifier = nullptr;         // one row per class in the softmax
  const FeatureExtractorState* previous = nullptr;     // frozen model of the previous task
  double lambda = 0.0;
  FdMode fd_mode = FdMode::MemoryOnly;
  bool normalize_features = false;
  bool want_classifier_grad = false;
};

struct CombinedLoss {
  LossReport report;
  LayerBuffers grads;
  Eigen::MatrixXd classifier_grad;
};

/// CE over the whole batch plus lambda times FD over the samples selected by
/// the FD mode (memory samples only by default). Gradients flow into the
/// current model (and optionally the classifier), never into `previous`.
inline CombinedLoss combined_loss(const LabeledBatch& batch, const FeatureExtractorState& current, const LossSpec& spec) {
  require(spec.classifier != nullptr, ErrorCode::InvalidArgument, "loss spec has no classifier");
  batch.validate(static_cast<std::size_t>(spec.classifier->rows()));
  if (spec.lambda < 0 || !std::isfinite(spec.lambda)) fail(ErrorCode::Config, "lambda must be finite and non-negative");
  if (spec.lambda > 0 && spec.previous == nullptr)
    fail(ErrorCode::Config, "lambda > 0 requires a previous model for feature distillation");
  if (spec.previous != nullptr)
    require(spec.previous->feature_dim() == current.feature_dim(), ErrorCode::InvalidArgument,
            "previous and current models differ in feature dimension");

  std::vector<ForwardTrace> traces;
  std::vector<Vector> features;
  traces.reserve(batch.size());
  features.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::check_input(current, batch.inputs[i], i);
    traces.push_back(forward_trace(current, batch.inputs[i]));
    features.push_back(traces.back().feature());
  }

  CrossEntropyResult ce =
      cross_entropy(features, batch.labels, *spec.classifier, spec.normalize_features, spec.want_classifier_grad);

  CombinedLoss out;
  out.report.ce_value = ce.value;
  out.report.ce_count = batch.size();
  out.report.lambda = spec.lambda;
  std::vector<Vector> feature_grads = std::move(ce.feature_grads);

  if (spec.previous != nullptr && spec.fd_mode != FdMode::Off) {
    std::vector<std::size_t> selected;
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (spec.fd_mode == FdMode::FullBatch || batch.sources[i] == SampleSource::Memory) selected.push_back(i);
    if (!selected.empty()) {
      std::vector<Vector> fresh;
      std::vector<Vector> frozen;
      for (std::size_t i : selected) {
        fresh.push_back(features[i]);
        frozen.push_back(extract_feature(*spec.previous, batch.inputs[i]));
      }
      FeatureLoss fd = feature_distillation_loss(fresh, frozen);
      out.report.fd_value = fd.value;
      out.report.fd_count = selected.size();
      if (spec.lambda != 0.0)
        for (std::size_t j = 0; j < selected.size(); ++j) feature_grads[selected[j]] += spec.lambda * fd.feature_grads[j];
    }
  }
  out.report.total = out.report.ce_value + spec.lambda * out.report.fd_value;

  out.grads = zeros_like(current.layers);
  for (std::size_t i = 0; i < batch.size(); ++i) backward_accumulate(current, traces[i], feature_grads[i], out.grads);
  out.classifier_grad = std::move(ce.classifier_grad);
  return out;
}

/// Compares analytic parameter gradients of the combined loss with central
/// differences on a seeded random subset of parameters (all of them when
/// the model has no more than `max_params`). Returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
inline double gradient_check(const FeatureExtractorState& state, const LossSpec& spec, const LabeledBatch& batch,
                             double epsilon, std::size_t max_params = 256, std::uint64_t seed = 0) {
  require(batch.size() > 0, ErrorCode::InvalidArgument, "gradient check needs a nonempty batch");
  require(epsilon >= 1e-7 && epsilon <= 1e-3, ErrorCode::InvalidArgument, "epsilon must lie in [1e-7, 1e-3]");
  LossSpec value_spec = spec;
  value_spec.want_classifier_grad = false;

  const CombinedLoss analytic = combined_loss(batch, state, value_spec);
  FeatureExtractorState probe = state;
  FeatureExtractorState grad_view = state;
  grad_view.layers = analytic.grads;

  const std::size_t count = state.parameter_count();
  std::vector<std::size_t> indices(count);
  for (std::size_t i = 0; i < count; ++i) indices[i] = i;
  if (count > max_params) {
    Rng rng(seed);
    rng.shuffle(std::span(indices));
    indices.resize(max_params);
    std::sort(indices.begin(), indices.end());
  }

  double worst = 0.0;
  for (std::size_t index : indices) {
    double& p = probe.parameter(index);
    const double original = p;
    p = original + epsilon;
    const double up = combined_loss(batch, probe, value_spec).report.total;
    p = original - epsilon;
    const double down = combined_loss(batch, probe, value_spec).report.total;
    p = original;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double exact = grad_view.parameter(index);
    const double scale = std::max({std::abs(exact), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(exact - numeric) / scale);
  }
  return worst;
}

}  // namespace cl2r
