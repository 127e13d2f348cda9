// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cl2r/data.hpp"
#include "cl2r/error.hpp"
#include "cl2r/nn.hpp"

namespace cl2r {

enum class Distance { Cosine, Euclidean };

inline const char* to_string(Distance d) { return d == Distance::Cosine ? "cosine" : "euclidean"; }

inline Distance parse_distance(const std::string& s) {
  if (s == "cosine") return Distance::Cosine;
  if (s == "euclidean") return Distance::Euclidean;
  fail(ErrorCode::Config, "unknown distance '" + s + "' (expected cosine or euclidean)");
}

struct ScoredPair {
  double score = 0.0;  // higher means more alike
  bool genuine = false;
};

/// Cosine similarity, or negated Euclidean distance, between two features.
inline double similarity(const Vector& query, const Vector& gallery, Distance distance, std::size_t index) {
  if (distance == Distance::Euclidean) return -(query - gallery).norm();
  const double nq = query.norm();
  const double ng = gallery.norm();
  if (!(nq > 0.0) || !(ng > 0.0))
    fail(ErrorCode::DegenerateFeature, "zero-norm feature in pair " + std::to_string(index));
  return query.dot(gallery) / (nq * ng);
}

/// Scores every pair with first elements embedded by `query_features` and
/// second elements by `gallery_features` (both indexed like pairs.samples).
inline std::vector<ScoredPair> pair_scores_from_features(const VerificationPairSet& pairs,
                                                          std::span<const Vector> query_features,
                                                          std::span<const Vector> gallery_features,
                                                          Distance distance = Distance::Cosine) {
  std::vector<ScoredPair> out;
  out.reserve(pairs.pairs.size());
  for (std::size_t i = 0; i < pairs.pairs.size(); ++i) {
    const auto& p = pairs.pairs[i];
    out.push_back({similarity(query_features[p.a], gallery_features[p.b], distance, i), p.genuine});
  }
  return out;
}

inline std::vector<Vector> embed_samples(const FeatureExtractorState& model, std::span<const Sample> samples) {
  std::vector<Vector> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    detail::check_input(model, samples[i].x, i);
    out.push_back(extract_feature(model, samples[i].x));
  }
  return out;
}

/// First image of each pair through `query_model`, second through
/// `gallery_model`.
inline std::vector<ScoredPair> pair_scores(const VerificationPairSet& pairs, const FeatureExtractorState& query_model,
                                           const FeatureExtractorState& gallery_model,
                                           Distance distance = Distance::Cosine) {
  require(query_model.feature_dim() == gallery_model.feature_dim(), ErrorCode::InvalidArgument,
          "query and gallery models differ in feature dimension");
  const auto q = embed_samples(query_model, pairs.samples);
  const auto g = &query_model == &gallery_model ? q : embed_samples(gallery_model, pairs.samples);
  return pair_scores_from_features(pairs, q, g, distance);
}

struct ThresholdResult {
  double value = 0.0;      // accuracy or TAR
  double threshold = 0.0;  // accept when score > threshold
  double far = 0.0;        // measured false acceptance rate at the threshold
};

namespace detail {

/// Distinct score groups in ascending order with genuine/impostor counts.
struct ScoreGroup {
  double score;
  std::size_t genuine;
  std::size_t impostor;
};

inline std::vector<ScoreGroup> group_scores(std::span<const ScoredPair> scored) {
  std::vector<ScoredPair> sorted(scored.begin(), scored.end());
  std::sort(sorted.begin(), sorted.end(), [](const ScoredPair& a, const ScoredPair& b) { return a.score < b.score; });
  std::vector<ScoreGroup> groups;
  for (const auto& s : sorted) {
    if (!std::isfinite(s.score)) fail(ErrorCode::Data, "non-finite similarity score");
    if (groups.empty() || groups.back().score != s.score) groups.push_back({s.score, 0, 0});
    (s.genuine ? groups.back().genuine : groups.back().impostor) += 1;
  }
  return groups;
}

/// Threshold between group i-1 and group i: -inf for i = 0, +inf past the
/// last group, otherwise the midpoint.
inline double cut_threshold(const std::vector<ScoreGroup>& groups, std::size_t i) {
  if (i == 0) return -std::numeric_limits<double>::infinity();
  if (i == groups.size()) return std::numeric_limits<double>::infinity();
  return groups[i - 1].score + 0.5 * (groups[i].score - groups[i - 1].score);
}

}  // namespace detail

/// Best accuracy over thresholds at -inf, every midpoint between adjacent
/// distinct scores, and +inf; ties go to the lowest threshold.
inline ThresholdResult verification_accuracy(std::span<const ScoredPair> scored) {
  require(!scored.empty(), ErrorCode::InvalidArgument, "accuracy needs at least one pair");
  const auto groups = detail::group_scores(scored);
  std::size_t genuine = 0;
  std::size_t impostor = 0;
  for (const auto& g : groups) {
    genuine += g.genuine;
    impostor += g.impostor;
  }
  const double n = static_cast<double>(scored.size());
  // Cut i rejects groups [0, i) and accepts groups [i, end).
  std::size_t tp = genuine;
  std::size_t tn = 0;
  std::size_t fp = impostor;
  ThresholdResult best{static_cast<double>(tp + tn) / n, detail::cut_threshold(groups, 0),
                       impostor ? static_cast<double>(fp) / static_cast<double>(impostor) : 0.0};
  for (std::size_t i = 1; i <= groups.size(); ++i) {
    tp -= groups[i - 1].genuine;
    tn += groups[i - 1].impostor;
    fp -= groups[i - 1].impostor;
    const double acc = static_cast<double>(tp + tn) / n;
    if (acc > best.value)
      best = {acc, detail::cut_threshold(groups, i), impostor ? static_cast<double>(fp) / static_cast<double>(impostor) : 0.0};
  }
  return best;
}

/// TAR = TP / (TP + FN) at the lowest candidate threshold whose
/// FAR = FP / (FP + TN) does not exceed `far_target`.
inline ThresholdResult tar_at_far(std::span<const ScoredPair> scored, double far_target) {
  require(far_target > 0.0 && far_target <= 1.0, ErrorCode::InvalidArgument, "far target must lie in (0, 1]");
  const auto groups = detail::group_scores(scored);
  std::size_t genuine = 0;
  std::size_t impostor = 0;
  for (const auto& g : groups) {
    genuine += g.genuine;
    impostor += g.impostor;
  }
  require(impostor > 0, ErrorCode::InvalidArgument, "TAR@FAR needs at least one impostor pair");
  std::size_t tp = genuine;
  std::size_t fp = impostor;
  for (std::size_t i = 0; i <= groups.size(); ++i) {
    if (i > 0) {
      tp -= groups[i - 1].genuine;
      fp -= groups[i - 1].impostor;
    }
    const double far = static_cast<double>(fp) / static_cast<double>(impostor);
    if (far <= far_target) {
      const double tar = genuine ? static_cast<double>(tp) / static_cast<double>(genuine) : 0.0;
      return {tar, detail::cut_threshold(groups, i), far};
    }
  }
  return {0.0, std::numeric_limits<double>::infinity(), 0.0};  // unreachable: the +inf cut has FAR 0
}

struct MetricSpec {
  enum class Kind { Accuracy, TarAtFar } kind = Kind::Accuracy;
  double far = 0.0;

  static MetricSpec accuracy() { return {Kind::Accuracy, 0.0}; }
  static MetricSpec tar(double far_target) { return {Kind::TarAtFar, far_target}; }

  std::string name() const { return kind == Kind::Accuracy ? "accuracy" : "tar_at_far"; }
};

inline ThresholdResult evaluate_metric(std::span<const ScoredPair> scored, const MetricSpec& metric) {
  return metric.kind == MetricSpec::Kind::Accuracy ? verification_accuracy(scored) : tar_at_far(scored, metric.far);
}

/// Row t, column k: query model t against gallery model k. Entries above the
/// diagonal are zero; thresholds there are NaN.
struct CompatibilityMatrix {
  std::size_t tasks = 0;
  Eigen::MatrixXd values;
  Eigen::MatrixXd thresholds;
  MetricSpec metric;
  Distance distance = Distance::Cosine;
};

/// Cell (t, k) with t >= k scores the static pair set with the first sample
/// of each pair embedded by model t and the second by model k.
inline CompatibilityMatrix build_compatibility_matrix(std::span<const FeatureExtractorState> models,
                                                      const VerificationPairSet& pairs, const MetricSpec& metric,
                                                      Distance distance = Distance::Cosine) {
  require(!models.empty(), ErrorCode::InvalidArgument, "compatibility matrix needs at least one model");
  pairs.validate();
  for (const auto& m : models)
    require(m.feature_dim() == models.front().feature_dim(), ErrorCode::InvalidArgument,
            "models in a timeline must share a feature dimension");
  std::vector<std::vector<Vector>> features;
  features.reserve(models.size());
  for (const auto& m : models) features.push_back(embed_samples(m, pairs.samples));

  const auto T = static_cast<Eigen::Index>(models.size());
  CompatibilityMatrix out;
  out.tasks = models.size();
  out.metric = metric;
  out.distance = distance;
  out.values = Eigen::MatrixXd::Zero(T, T);
  out.thresholds = Eigen::MatrixXd::Constant(T, T, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index k = 0; k <= t; ++k) {
      const auto scored = pair_scores_from_features(pairs, features[static_cast<std::size_t>(t)],
                                                    features[static_cast<std::size_t>(k)], distance);
      const ThresholdResult r = evaluate_metric(scored, metric);
      out.values(t, k) = r.value;
      out.thresholds(t, k) = r.threshold;
    }
  return out;
}

struct CompatibilityReport {
  double ac = 0.0;
  double bc = 0.0;
  double fc = 0.0;
  std::vector<double> bc_series;  // BC(t) for t = 2..T
};

/// AC: fraction of the T(T-1)/2 cells below the diagonal that strictly
/// beat the self-test of their column. BC: mean of C[T,k] - C[k,k] over
/// k < T. FC: mean of C[k,k-1] - C[k,k] over k = 2..T. BC(t): BC of the
/// top-left t x t block.
inline CompatibilityReport compatibility_report(const Eigen::MatrixXd& c) {
  require(c.rows() == c.cols(), ErrorCode::InvalidArgument, "compatibility matrix must be square");
  const Eigen::Index T = c.rows();
  if (T < 2) fail(ErrorCode::UndefinedMetric, "AC, BC and FC need at least two tasks");
  CompatibilityReport r;
  std::size_t hits = 0;
  for (Eigen::Index t = 1; t < T; ++t)
    for (Eigen::Index k = 0; k < t; ++k)
      if (c(t, k) > c(k, k)) ++hits;
  r.ac = 2.0 * static_cast<double>(hits) / static_cast<double>(T * (T - 1));

  for (Eigen::Index t = 1; t < T; ++t) {
    double sum = 0.0;
    for (Eigen::Index k = 0; k < t; ++k) sum += c(t, k) - c(k, k);
    r.bc_series.push_back(sum / static_cast<double>(t));
  }
  r.bc = r.bc_series.back();

  double fsum = 0.0;
  for (Eigen::Index k = 1; k < T; ++k) fsum += c(k, k - 1) - c(k, k);
  r.fc = fsum / static_cast<double>(T - 1);
  return r;
}

}  // namespace cl2r
