// SPDX-License-Identifier: Apache-2.0
#pragma once

// Feature gallery indexed once by some model version and searched by later
// models without re-extraction.
//
// Features are held and stored as float32 (searches compute in float64).
// The file is a cl2r container with magic "CL2RGALL":
//   header   : u64 feature_dim, u64 count, u64 indexed_by
//   ids      : count x (u64 length, bytes)
//   labels   : count x (u8 present, u64 label)
//   features : count * feature_dim little-endian float32, row-major

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cl2r/container.hpp"
#include "cl2r/error.hpp"
#include "cl2r/nn.hpp"

namespace cl2r {

struct GalleryItem {
  std::string id;
  Vector x;
  std::optional<std::size_t> label;
};

struct Gallery {
  std::size_t feature_dim = 0;
  std::size_t indexed_by = 0;  // task index of the model that produced the features
  std::vector<std::string> ids;
  std::vector<std::optional<std::size_t>> labels;
  std::vector<float> features;  // row-major, ids.size() x feature_dim

  bool operator==(const Gallery&) const = default;

  std::size_t size() const { return ids.size(); }

  std::span<const float> feature(std::size_t i) const { return {features.data() + i * feature_dim, feature_dim}; }
};

inline Gallery index_gallery(std::span<const GalleryItem> items, const FeatureExtractorState& model,
                             std::size_t model_version) {
  require(!items.empty(), ErrorCode::InvalidArgument, "cannot index an empty gallery");
  std::set<std::string> seen;
  Gallery g;
  g.feature_dim = model.feature_dim();
  g.indexed_by = model_version;
  g.features.reserve(items.size() * g.feature_dim);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!seen.insert(items[i].id).second) fail(ErrorCode::Data, "duplicate gallery id '" + items[i].id + "'");
    detail::check_input(model, items[i].x, i);
    const Vector f = extract_feature(model, items[i].x);
    double norm = 0.0;
    for (Eigen::Index k = 0; k < f.size(); ++k) {
      const auto v = static_cast<float>(f[k]);
      norm += static_cast<double>(v) * static_cast<double>(v);
      g.features.push_back(v);
    }
    if (!(norm > 0.0)) fail(ErrorCode::DegenerateFeature, "gallery item '" + items[i].id + "' has a zero-norm feature");
    g.ids.push_back(items[i].id);
    g.labels.push_back(items[i].label);
  }
  return g;
}

struct SearchHit {
  std::string id;
  double similarity = 0.0;
  std::optional<std::size_t> label;
};

/// Exact cosine ranking of each query feature against the stored features,
/// descending by similarity with ties broken by ascending id.
inline std::vector<std::vector<SearchHit>> search_features(std::span<const Vector> query_features, const Gallery& gallery,
                                                           std::size_t top_n) {
  require(gallery.size() > 0, ErrorCode::InvalidArgument, "gallery is empty");
  require(top_n >= 1 && top_n <= gallery.size(), ErrorCode::InvalidArgument,
          "top_n must lie in [1, " + std::to_string(gallery.size()) + "]");
  const auto d = static_cast<Eigen::Index>(gallery.feature_dim);
  const auto n = static_cast<Eigen::Index>(gallery.size());
  // d x n column-major: one gallery feature per column.
  Eigen::MatrixXd stored(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    auto f = gallery.feature(static_cast<std::size_t>(j));
    for (Eigen::Index k = 0; k < d; ++k) stored(k, j) = f[static_cast<std::size_t>(k)];
  }
  const Eigen::RowVectorXd norms = stored.colwise().norm();

  std::vector<std::vector<SearchHit>> out;
  out.reserve(query_features.size());
  std::vector<std::size_t> order(gallery.size());
  for (std::size_t q = 0; q < query_features.size(); ++q) {
    const Vector& f = query_features[q];
    require(f.size() == d, ErrorCode::Data, "query feature dimension " + std::to_string(f.size()) +
                                                " does not match gallery dimension " + std::to_string(d));
    const double qn = f.norm();
    if (!(qn > 0.0)) fail(ErrorCode::DegenerateFeature, "query " + std::to_string(q) + " has a zero-norm feature");
    Eigen::RowVectorXd sims(n);
    for (Eigen::Index j = 0; j < n; ++j) sims[j] = stored.col(j).dot(f) / (norms[j] * qn);
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_n), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = sims[static_cast<Eigen::Index>(a)];
                        const double sb = sims[static_cast<Eigen::Index>(b)];
                        if (sa != sb) return sa > sb;
                        return gallery.ids[a] < gallery.ids[b];
                      });
    std::vector<SearchHit> hits;
    hits.reserve(top_n);
    for (std::size_t r = 0; r < top_n; ++r)
      hits.push_back({gallery.ids[order[r]], sims[static_cast<Eigen::Index>(order[r])], gallery.labels[order[r]]});
    out.push_back(std::move(hits));
  }
  return out;
}

inline std::vector<std::vector<SearchHit>> search(std::span<const Vector> queries, const FeatureExtractorState& query_model,
                                                  const Gallery& gallery, std::size_t top_n) {
  if (query_model.feature_dim() != gallery.feature_dim)
    fail(ErrorCode::Data, "query model feature dimension " + std::to_string(query_model.feature_dim()) +
                              " does not match gallery dimension " + std::to_string(gallery.feature_dim));
  return search_features(extract_features(query_model, queries), gallery, top_n);
}

/// Fraction of queries whose top-ranked hit carries the query's label.
inline double recall_at_1(const std::vector<std::vector<SearchHit>>& results, std::span<const std::size_t> query_labels) {
  require(results.size() == query_labels.size() && !results.empty(), ErrorCode::InvalidArgument,
          "recall needs one label per query");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < results.size(); ++q)
    if (!results[q].empty() && results[q].front().label == query_labels[q]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

inline constexpr Magic kGalleryMagic{'C', 'L', '2', 'R', 'G', 'A', 'L', 'L'};
inline constexpr std::uint32_t kGalleryVersion = 1;

inline Bytes serialize_gallery(const Gallery& g) {
  Container c(kGalleryMagic, kGalleryVersion);
  ByteWriter header;
  header.u64(g.feature_dim);
  header.u64(g.size());
  header.u64(g.indexed_by);
  c.add("header", std::move(header).bytes());
  ByteWriter ids;
  for (const auto& id : g.ids) ids.str(id);
  c.add("ids", std::move(ids).bytes());
  ByteWriter labels;
  for (const auto& l : g.labels) {
    labels.u8(l ? 1 : 0);
    labels.u64(l.value_or(0));
  }
  c.add("labels", std::move(labels).bytes());
  ByteWriter feats;
  for (float v : g.features) feats.f32(v);
  c.add("features", std::move(feats).bytes());
  return c.serialize();
}

inline Gallery deserialize_gallery(std::span<const std::uint8_t> bytes, const std::string& context = "gallery") {
  const Container c = Container::parse(bytes, kGalleryMagic, kGalleryVersion, context);
  Gallery g;
  std::uint64_t count = 0;
  {
    ByteReader r(c.section("header"), context + " header");
    g.feature_dim = r.u64();
    count = r.u64();
    g.indexed_by = r.u64();
    r.expect_done();
  }
  {
    ByteReader r(c.section("ids"), context + " ids");
    for (std::uint64_t i = 0; i < count; ++i) g.ids.push_back(r.str());
    r.expect_done();
  }
  {
    ByteReader r(c.section("labels"), context + " labels");
    for (std::uint64_t i = 0; i < count; ++i) {
      const bool present = r.u8() != 0;
      const std::uint64_t v = r.u64();
      g.labels.push_back(present ? std::optional<std::size_t>(v) : std::nullopt);
    }
    r.expect_done();
  }
  {
    const Bytes& raw = c.section("features");
    if (raw.size() != count * g.feature_dim * 4) fail(ErrorCode::Corruption, context + ": feature block size mismatch");
    ByteReader r(raw, context + " features");
    g.features.resize(count * g.feature_dim);
    for (float& v : g.features) v = r.f32();
  }
  return g;
}

inline void save_gallery(const Gallery& g, const std::filesystem::path& path) { write_file(path, serialize_gallery(g)); }

inline Gallery load_gallery(const std::filesystem::path& path) { return deserialize_gallery(read_file(path), path.string()); }

}  // namespace cl2r
