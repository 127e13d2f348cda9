// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include <Eigen/Dense>

#include "cl2r/container.hpp"
#include "cl2r/error.hpp"

namespace cl2r {

/// Fixed classifier weights: the N vertices of a regular simplex in R^(N-1),
/// one row per class. Built once and never modified afterwards.
class SimplexPrototypes {
 public:
  /// Rows are e_1..e_{N-1} followed by alpha * (1, ..., 1) with
  /// alpha = (1 - sqrt(N)) / (N - 1). Every pair of rows is sqrt(2) apart.
  ///
  /// With `center_and_normalize` the rows are shifted to zero mean and scaled
  /// to unit norm; the result is still regular.
  static SimplexPrototypes build(std::size_t num_vertices, bool center_and_normalize = false) {
    if (num_vertices < 2)
      fail(ErrorCode::InvalidArgument, "simplex capacity must be at least 2, got " + std::to_string(num_vertices));
    const std::size_t dim = num_vertices - 1;
    const double n = static_cast<double>(num_vertices);
    const double alpha = (1.0 - std::sqrt(n)) / (n - 1.0);

    Eigen::MatrixXd vertices = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_vertices),
                                                     static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < dim; ++i) vertices(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
    vertices.row(static_cast<Eigen::Index>(dim)).setConstant(alpha);

    if (center_and_normalize) {
      const Eigen::RowVectorXd mean = vertices.colwise().mean();
      vertices.rowwise() -= mean;
      vertices.rowwise().normalize();
    }
    return SimplexPrototypes(std::move(vertices), alpha, center_and_normalize);
  }

  std::size_t num_vertices() const { return static_cast<std::size_t>(vertices_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(vertices_.cols()); }
  double alpha() const { return alpha_; }
  bool centered() const { return centered_; }

  /// N x (N-1), row j is the prototype of class j.
  const Eigen::MatrixXd& vertices() const { return vertices_; }

  std::uint64_t checksum() const {
    return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(vertices_.data()),
                             static_cast<std::size_t>(vertices_.size()) * sizeof(double)));
  }

  bool operator==(const SimplexPrototypes& other) const {
    return alpha_ == other.alpha_ && centered_ == other.centered_ && vertices_.rows() == other.vertices_.rows() &&
           vertices_.cols() == other.vertices_.cols() && vertices_ == other.vertices_;
  }

  /// N, flags, alpha, then the vertex matrix as row-major float64.
  Bytes serialize() const {
    ByteWriter w;
    w.u64(num_vertices());
    w.u8(centered_ ? 1 : 0);
    w.f64(alpha_);
    for (Eigen::Index r = 0; r < vertices_.rows(); ++r)
      for (Eigen::Index c = 0; c < vertices_.cols(); ++c) w.f64(vertices_(r, c));
    return std::move(w).bytes();
  }

  static SimplexPrototypes deserialize(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "prototypes");
    const std::uint64_t n = r.u64();
    if (n < 2 || n > (1u << 16)) fail(ErrorCode::Corruption, "prototypes: implausible capacity");
    const bool centered = r.u8() != 0;
    const double alpha = r.f64();
    Eigen::MatrixXd vertices(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n - 1));
    for (Eigen::Index row = 0; row < vertices.rows(); ++row)
      for (Eigen::Index col = 0; col < vertices.cols(); ++col) vertices(row, col) = r.f64();
    r.expect_done();
    return SimplexPrototypes(std::move(vertices), alpha, centered);
  }

 private:
  SimplexPrototypes(Eigen::MatrixXd vertices, double alpha, bool centered)
      : vertices_(std::move(vertices)), alpha_(alpha), centered_(centered) {}

  Eigen::MatrixXd vertices_;
  double alpha_;
  bool centered_;
};

inline SimplexPrototypes build_simplex(std::size_t total_classes, bool center_and_normalize = false) {
  return SimplexPrototypes::build(total_classes, center_and_normalize);
}

}  // namespace cl2r
