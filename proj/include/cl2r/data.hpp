// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale datasets: synthetic Gaussian clusters, CSV ingestion, disjoint
// task splits and open-set verification pairs.
//
// CSV schema: a header row, then one sample per row as
//   label,x0,x1,...,x{D-1}
// where label is a non-negative integer and every x is a finite real.
// Pair files use the header "idA,idB,genuine" with ids being 0-based data row
// indices into the matching sample file and genuine being 0 or 1.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cl2r/container.hpp"
#include "cl2r/error.hpp"
#include "cl2r/nn.hpp"
#include "cl2r/random.hpp"

namespace cl2r {

struct Sample {
  Vector x;
  std::size_t label = 0;
  std::size_t id = 0;  // position in the dataset it was drawn from

  bool operator==(const Sample& o) const { return label == o.label && id == o.id && x.size() == o.x.size() && x == o.x; }
};

struct Dataset {
  std::size_t input_dim = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }

  /// Distinct labels in ascending order.
  std::vector<std::size_t> classes() const {
    std::set<std::size_t> s;
    for (const auto& smp : samples) s.insert(smp.label);
    return {s.begin(), s.end()};
  }

  /// Samples whose label is in `labels`, keeping their ids.
  Dataset subset(const std::vector<std::size_t>& labels) const {
    const std::set<std::size_t> keep(labels.begin(), labels.end());
    Dataset out{input_dim, {}};
    for (const auto& s : samples)
      if (keep.count(s.label) != 0) out.samples.push_back(s);
    return out;
  }

  std::uint64_t checksum() const {
    ByteWriter w;
    w.u64(input_dim);
    for (const auto& s : samples) {
      w.u64(s.label);
      w.u64(s.id);
      for (Eigen::Index i = 0; i < s.x.size(); ++i) w.f64(s.x[i]);
    }
    return fnv1a64(w.bytes());
  }
};

struct SyntheticSpec {
  std::size_t num_classes = 30;
  std::size_t samples_per_class = 100;
  std::size_t input_dim = 64;
  double sigma = 0.2;
  std::uint64_t mean_seed = 1;
  std::uint64_t noise_seed = 2;
  // Optional shared structure: means restricted to a random signal_dim
  // subspace, plus extra noise of scale nuisance_sigma in its orthogonal
  // complement. signal_dim = 0 means the whole space.
  std::size_t signal_dim = 0;
  double nuisance_sigma = 0.0;

  void validate() const {
    require(num_classes >= 2, ErrorCode::Config, "synthetic data needs at least 2 classes");
    require(samples_per_class >= 1, ErrorCode::Config, "samples_per_class must be positive");
    require(input_dim >= 1, ErrorCode::Config, "input_dim must be positive");
    require(sigma > 0 && std::isfinite(sigma), ErrorCode::Config, "sigma must be positive");
    require(signal_dim <= input_dim, ErrorCode::Config, "signal_dim cannot exceed input_dim");
    require(nuisance_sigma >= 0 && std::isfinite(nuisance_sigma), ErrorCode::Config,
            "nuisance_sigma must be non-negative");
  }
};

/// Class means are isotropic Gaussian draws projected onto the unit sphere
/// (one stream seeded by mean_seed); class c's samples are mean + sigma * z
/// with z from the noise substream derive_seed(noise_seed, c). Samples are
/// stored class by class with ids 0..n-1.
///
/// With a signal subspace, the mean stream first draws an orthonormal basis
/// (Gram-Schmidt on Gaussian columns) and the means are unit vectors inside
/// it; nuisance noise is a second Gaussian draw with its signal component
/// removed.
inline Dataset make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto dim = static_cast<Eigen::Index>(spec.input_dim);
  const bool subspace = spec.signal_dim != 0 && spec.signal_dim < spec.input_dim;
  const auto sdim = subspace ? static_cast<Eigen::Index>(spec.signal_dim) : dim;
  Rng mean_rng(spec.mean_seed);

  Eigen::MatrixXd basis;  // dim x sdim, orthonormal columns
  if (subspace) {
    basis.resize(dim, sdim);
    for (Eigen::Index j = 0; j < sdim; ++j) {
      Vector v(dim);
      do {
        for (Eigen::Index i = 0; i < dim; ++i) v[i] = mean_rng.normal();
        for (Eigen::Index k = 0; k < j; ++k) v -= basis.col(k).dot(v) * basis.col(k);
      } while (v.norm() < 1e-8);
      basis.col(j) = v / v.norm();
    }
  }

  std::vector<Vector> means;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    Vector m(sdim);
    do {
      for (Eigen::Index i = 0; i < sdim; ++i) m[i] = mean_rng.normal();
    } while (m.norm() == 0.0);
    m /= m.norm();
    means.push_back(subspace ? Vector(basis * m) : m);
  }
  Dataset out{spec.input_dim, {}};
  out.samples.reserve(spec.num_classes * spec.samples_per_class);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    Rng noise(derive_seed(spec.noise_seed, c));
    for (std::size_t k = 0; k < spec.samples_per_class; ++k) {
      Vector x = means[c];
      for (Eigen::Index i = 0; i < dim; ++i) x[i] += spec.sigma * noise.normal();
      if (subspace && spec.nuisance_sigma > 0.0) {
        Vector z(dim);
        for (Eigen::Index i = 0; i < dim; ++i) z[i] = noise.normal();
        z -= basis * (basis.transpose() * z);
        x += spec.nuisance_sigma * z;
      }
      out.samples.push_back({std::move(x), c, out.samples.size()});
    }
  }
  return out;
}

// Task splits ---------------------------------------------------------------

struct Task {
  std::size_t index = 0;                 // 0-based position in the sequence
  std::vector<std::size_t> classes;      // class slots introduced by this task
  std::vector<Sample> samples;           // labels are class slots
};

/// Ordered tasks over class slots 0..total_classes-1. Slots are assigned in
/// task order; `slot_labels[s]` is the dataset label behind slot s.
struct TaskSequence {
  std::vector<Task> tasks;
  std::size_t total_classes = 0;
  std::vector<std::size_t> slot_labels;

  void validate() const {
    std::set<std::size_t> seen;
    for (const auto& t : tasks) {
      require(!t.classes.empty(), ErrorCode::Data, "task " + std::to_string(t.index + 1) + " has no classes");
      for (std::size_t c : t.classes) {
        if (!seen.insert(c).second)
          fail(ErrorCode::Disjointness, "class slot " + std::to_string(c) + " appears in more than one task");
        require(c < total_classes, ErrorCode::Data, "class slot exceeds total class capacity");
      }
      const std::set<std::size_t> own(t.classes.begin(), t.classes.end());
      for (const auto& s : t.samples)
        if (own.count(s.label) == 0)
          fail(ErrorCode::Data, "task " + std::to_string(t.index + 1) + " holds a sample of a foreign class");
    }
  }
};

struct TaskSplit {
  TaskSequence sequence;
  std::vector<std::size_t> eval_classes;  // dataset labels, ascending
  Dataset eval_set;
};

/// Removes `eval_class_count` held-out classes first (seeded choice), then
/// partitions the remaining classes into `num_tasks` groups whose sizes
/// differ by at most one, larger groups first.
inline TaskSplit split_tasks(const Dataset& data, std::size_t num_tasks, std::size_t eval_class_count,
                             std::uint64_t seed) {
  require(num_tasks >= 1, ErrorCode::Config, "need at least one task");
  require(eval_class_count >= 2, ErrorCode::Config, "need at least two evaluation classes");
  std::vector<std::size_t> classes = data.classes();
  if (classes.size() < eval_class_count + num_tasks)
    fail(ErrorCode::Data, "insufficient classes: " + std::to_string(classes.size()) + " available, " +
                              std::to_string(eval_class_count) + " held out and at least one per each of " +
                              std::to_string(num_tasks) + " tasks required");
  Rng rng(seed);
  rng.shuffle(std::span(classes));

  TaskSplit out;
  out.eval_classes.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(eval_class_count));
  std::sort(out.eval_classes.begin(), out.eval_classes.end());
  out.eval_set = data.subset(out.eval_classes);

  const std::vector<std::size_t> train(classes.begin() + static_cast<std::ptrdiff_t>(eval_class_count), classes.end());
  const std::size_t base = train.size() / num_tasks;
  const std::size_t extra = train.size() % num_tasks;
  std::map<std::size_t, std::size_t> slot_of;
  std::size_t cursor = 0;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    const std::size_t n = base + (t < extra ? 1 : 0);
    std::vector<std::size_t> labels(train.begin() + static_cast<std::ptrdiff_t>(cursor),
                                    train.begin() + static_cast<std::ptrdiff_t>(cursor + n));
    cursor += n;
    std::sort(labels.begin(), labels.end());
    Task task;
    task.index = t;
    for (std::size_t label : labels) {
      const std::size_t slot = out.sequence.slot_labels.size();
      slot_of[label] = slot;
      out.sequence.slot_labels.push_back(label);
      task.classes.push_back(slot);
    }
    out.sequence.tasks.push_back(std::move(task));
  }
  out.sequence.total_classes = out.sequence.slot_labels.size();
  for (const auto& s : data.samples) {
    auto it = slot_of.find(s.label);
    if (it == slot_of.end()) continue;
    for (auto& task : out.sequence.tasks)
      if (std::find(task.classes.begin(), task.classes.end(), it->second) != task.classes.end())
        task.samples.push_back({s.x, it->second, s.id});
  }
  out.sequence.validate();
  return out;
}

// Verification pairs --------------------------------------------------------

struct VerificationPair {
  std::size_t a = 0;  // index into VerificationPairSet::samples
  std::size_t b = 0;
  bool genuine = false;

  bool operator==(const VerificationPair&) const = default;
};

struct VerificationPairSet {
  std::vector<Sample> samples;
  std::vector<VerificationPair> pairs;

  void validate() const {
    require(!pairs.empty(), ErrorCode::Data, "pair set is empty");
    bool any_genuine = false;
    bool any_impostor = false;
    for (const auto& p : pairs) {
      require(p.a < samples.size() && p.b < samples.size(), ErrorCode::Data, "pair references a missing sample");
      (p.genuine ? any_genuine : any_impostor) = true;
    }
    require(any_genuine && any_impostor, ErrorCode::Data, "pair set needs at least one genuine and one impostor pair");
  }
};

/// Seeded pairs over `eval`: round(num_pairs * genuine_fraction) genuine and
/// the rest impostor, each unordered sample pair used at most once. Genuine
/// pairs pick a class uniformly among classes with two or more samples and
/// then two distinct samples; impostor pairs pick two distinct classes
/// uniformly and one sample from each. The final list is shuffled.
inline VerificationPairSet generate_pairs(const Dataset& eval, std::size_t num_pairs, std::uint64_t seed,
                                          double genuine_fraction = 0.5) {
  require(num_pairs >= 2, ErrorCode::Config, "need at least two pairs");
  require(genuine_fraction > 0 && genuine_fraction < 1, ErrorCode::Config, "genuine_fraction must lie in (0, 1)");
  const double want_genuine = static_cast<double>(num_pairs) * genuine_fraction;
  if (std::abs(want_genuine - std::round(want_genuine)) > 1e-9)
    fail(ErrorCode::Data, "impossible balance: " + std::to_string(num_pairs) + " pairs cannot be split at fraction " +
                              std::to_string(genuine_fraction));
  const auto n_genuine = static_cast<std::size_t>(std::llround(want_genuine));
  const std::size_t n_impostor = num_pairs - n_genuine;

  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < eval.samples.size(); ++i) by_class[eval.samples[i].label].push_back(i);
  require(by_class.size() >= 2, ErrorCode::Data, "need at least two evaluation classes for pairs");

  std::uint64_t genuine_capacity = 0;
  std::uint64_t impostor_capacity = 0;
  std::uint64_t running = 0;
  std::vector<std::size_t> rich;  // classes with >= 2 samples
  std::vector<std::size_t> labels;
  for (const auto& [label, members] : by_class) {
    const std::uint64_t n = members.size();
    genuine_capacity += n * (n - 1) / 2;
    impostor_capacity += running * n;
    running += n;
    labels.push_back(label);
    if (n >= 2) rich.push_back(label);
  }
  if (n_genuine > genuine_capacity || n_impostor > impostor_capacity)
    fail(ErrorCode::Data, "impossible balance: requested " + std::to_string(n_genuine) + " genuine / " +
                              std::to_string(n_impostor) + " impostor pairs, only " + std::to_string(genuine_capacity) +
                              " / " + std::to_string(impostor_capacity) + " distinct pairs exist");

  Rng rng(seed);
  std::set<std::pair<std::size_t, std::size_t>> used;
  VerificationPairSet out;
  out.samples = eval.samples;

  auto take = [&](std::size_t i, std::size_t j, bool genuine) {
    const auto key = std::minmax(i, j);
    if (!used.insert(key).second) return false;
    out.pairs.push_back({i, j, genuine});
    return true;
  };

  // Rejection sampling is fine while at most half the pair space is needed;
  // past that, enumerate and shuffle.
  auto fill = [&](bool genuine, std::size_t need, std::uint64_t capacity) {
    if (need * 2 <= capacity) {
      std::size_t got = 0;
      while (got < need) {
        std::size_t i;
        std::size_t j;
        if (genuine) {
          const auto& members = by_class[rich[rng.below(rich.size())]];
          i = members[rng.below(members.size())];
          j = members[rng.below(members.size())];
          if (i == j) continue;
        } else {
          const std::size_t ca = rng.below(labels.size());
          std::size_t cb = rng.below(labels.size() - 1);
          if (cb >= ca) ++cb;
          const auto& ma = by_class[labels[ca]];
          const auto& mb = by_class[labels[cb]];
          i = ma[rng.below(ma.size())];
          j = mb[rng.below(mb.size())];
        }
        if (take(i, j, genuine)) ++got;
      }
      return;
    }
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t i = 0; i < eval.samples.size(); ++i)
      for (std::size_t j = i + 1; j < eval.samples.size(); ++j)
        if ((eval.samples[i].label == eval.samples[j].label) == genuine) all.emplace_back(i, j);
    rng.shuffle(std::span(all));
    for (std::size_t k = 0; k < need; ++k) take(all[k].first, all[k].second, genuine);
  };

  fill(true, n_genuine, genuine_capacity);
  fill(false, n_impostor, impostor_capacity);
  rng.shuffle(std::span(out.pairs));
  return out;
}

// CSV -----------------------------------------------------------------------

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.front() == ' ' || c.front() == '\t')) c.remove_prefix(1);
    while (!c.empty() && (c.back() == ' ' || c.back() == '\t' || c.back() == '\r')) c.remove_suffix(1);
  }
  return cells;
}

inline double parse_real(std::string_view cell, const std::string& where) {
  double v = 0.0;
  const char* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, v);
  if (cell.empty() || ec != std::errc() || ptr != end)
    fail(ErrorCode::Data, where + ": not a number: '" + std::string(cell) + "'");
  if (!std::isfinite(v)) fail(ErrorCode::Data, where + ": non-finite value");
  return v;
}

inline std::uint64_t parse_index(std::string_view cell, const std::string& where) {
  std::uint64_t v = 0;
  const char* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, v);
  if (cell.empty() || ec != std::errc() || ptr != end)
    fail(ErrorCode::Data, where + ": not a non-negative integer: '" + std::string(cell) + "'");
  return v;
}

inline std::string format_real(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Reads label + feature rows. `expected_dim` of 0 accepts whatever width the
/// header declares.
inline Dataset load_csv(const std::filesystem::path& path, std::size_t expected_dim = 0) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::Data, path.string() + ": missing header");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "label")
    fail(ErrorCode::Data, path.string() + ":1: header must start with 'label' followed by feature columns");
  const std::size_t dim = header.size() - 1;
  if (expected_dim != 0 && dim != expected_dim)
    fail(ErrorCode::Data, path.string() + ": schema has " + std::to_string(dim) + " feature columns, expected " +
                              std::to_string(expected_dim));
  Dataset out{dim, {}};
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (cells.size() != dim + 1)
      fail(ErrorCode::Data, where + ": schema error, row has " + std::to_string(cells.size()) + " columns, header has " +
                                std::to_string(dim + 1));
    Sample s;
    s.label = detail::parse_index(cells[0], where);
    s.x.resize(static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < dim; ++i) s.x[static_cast<Eigen::Index>(i)] = detail::parse_real(cells[i + 1], where);
    s.id = out.samples.size();
    out.samples.push_back(std::move(s));
  }
  return out;
}

/// Inverse of load_csv; values use the shortest round-trip representation.
inline std::string dataset_to_csv(const Dataset& data) {
  std::string out = "label";
  for (std::size_t i = 0; i < data.input_dim; ++i) out += ",x" + std::to_string(i);
  out += '\n';
  for (const auto& s : data.samples) {
    out += std::to_string(s.label);
    for (Eigen::Index i = 0; i < s.x.size(); ++i) out += "," + detail::format_real(s.x[i]);
    out += '\n';
  }
  return out;
}

inline std::string pairs_to_csv(const VerificationPairSet& pairs) {
  std::string out = "idA,idB,genuine\n";
  for (const auto& p : pairs.pairs)
    out += std::to_string(p.a) + "," + std::to_string(p.b) + "," + (p.genuine ? "1" : "0") + "\n";
  return out;
}

/// Pairs over the rows of `samples` (as loaded by load_csv).
inline VerificationPairSet load_pairs_csv(const std::filesystem::path& path, const Dataset& samples) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::Data, path.string() + ": missing header");
  const auto header = detail::split_csv_line(line);
  if (header.size() != 3 || header[0] != "idA" || header[1] != "idB" || header[2] != "genuine")
    fail(ErrorCode::Data, path.string() + ":1: expected header idA,idB,genuine");
  VerificationPairSet out;
  out.samples = samples.samples;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (cells.size() != 3) fail(ErrorCode::Data, where + ": schema error, expected 3 columns");
    VerificationPair p;
    p.a = detail::parse_index(cells[0], where);
    p.b = detail::parse_index(cells[1], where);
    const auto g = detail::parse_index(cells[2], where);
    if (g > 1) fail(ErrorCode::Data, where + ": genuine must be 0 or 1");
    p.genuine = g == 1;
    if (p.a >= samples.size() || p.b >= samples.size()) fail(ErrorCode::Data, where + ": id out of range");
    out.pairs.push_back(p);
  }
  out.validate();
  return out;
}

}  // namespace cl2r
