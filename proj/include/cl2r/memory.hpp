// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cl2r/container.hpp"
#include "cl2r/data.hpp"
#include "cl2r/error.hpp"
#include "cl2r/losses.hpp"
#include "cl2r/random.hpp"

namespace cl2r {

/// Budget value meaning "keep every sample" (upper-bound style runs).
inline constexpr std::size_t kUnboundedMemory = std::numeric_limits<std::size_t>::max();

struct MemoryEntry {
  Vector x;
  std::size_t label = 0;      // class slot
  std::size_t task = 0;       // task that contributed the sample
  std::size_t sample_id = 0;  // id within that task's data

  bool operator==(const MemoryEntry& o) const {
    return label == o.label && task == o.task && sample_id == o.sample_id && x.size() == o.x.size() && x == o.x;
  }
};

/// Rehearsal buffer of raw exemplars from completed tasks, at most
/// `per_class_budget` per class.
struct EpisodicMemory {
  std::size_t per_class_budget = 20;
  std::uint64_t rng_seed = 0;
  std::vector<MemoryEntry> entries;

  bool operator==(const EpisodicMemory&) const = default;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  std::set<std::size_t> classes() const {
    std::set<std::size_t> out;
    for (const auto& e : entries) out.insert(e.label);
    return out;
  }

  std::map<std::size_t, std::size_t> per_class_counts() const {
    std::map<std::size_t, std::size_t> out;
    for (const auto& e : entries) ++out[e.label];
    return out;
  }
};

/// Adds min(budget, available) exemplars of every class of `task`, chosen
/// uniformly without replacement by a partial Fisher-Yates shuffle on the
/// substream derive_seed(rng_seed, class slot). Existing entries are kept
/// as they are; new entries are appended class by class in ascending
/// sample-id order.
inline void update_memory(EpisodicMemory& memory, const Task& task) {
  require(memory.per_class_budget >= 1, ErrorCode::Config, "memory per-class budget must be positive");
  const auto stored = memory.classes();
  for (std::size_t c : task.classes)
    if (stored.count(c) != 0)
      fail(ErrorCode::Disjointness, "class slot " + std::to_string(c) + " of task " + std::to_string(task.index + 1) +
                                        " is already in memory");
  std::set<std::pair<std::size_t, std::size_t>> present;
  for (const auto& e : memory.entries) present.emplace(e.task, e.sample_id);

  std::map<std::size_t, std::vector<const Sample*>> by_class;
  for (const auto& s : task.samples) by_class[s.label].push_back(&s);

  for (std::size_t c : task.classes) {
    auto& members = by_class[c];
    std::sort(members.begin(), members.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });
    const std::size_t keep = std::min(memory.per_class_budget, members.size());
    Rng rng(derive_seed(memory.rng_seed, c));
    for (std::size_t i = 0; i < keep; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(members.size() - i));
      std::swap(members[i], members[j]);
    }
    std::vector<const Sample*> chosen(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
    std::sort(chosen.begin(), chosen.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });
    for (const Sample* s : chosen) {
      if (!present.emplace(task.index, s->id).second)
        fail(ErrorCode::Data, "duplicate sample id " + std::to_string(s->id) + " in task " + std::to_string(task.index + 1));
      memory.entries.push_back({s->x, c, task.index, s->id});
    }
  }
}

/// M_t followed by D_t, flagged by origin. Shuffling happens per epoch in the
/// trainer.
inline LabeledBatch build_training_set(const EpisodicMemory& memory, const Task& task) {
  LabeledBatch out;
  for (const auto& e : memory.entries) out.push(e.x, e.label, SampleSource::Memory);
  for (const auto& s : task.samples) out.push(s.x, s.label, SampleSource::CurrentTask);
  return out;
}

/// Splits a seeded permutation of `set` into consecutive minibatches; the
/// last one may be short.
inline std::vector<LabeledBatch> shuffled_batches(const LabeledBatch& set, std::size_t batch_size, Rng& rng) {
  require(batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be positive");
  std::vector<std::size_t> order(set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span(order));
  std::vector<LabeledBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    LabeledBatch b;
    for (std::size_t k = start; k < std::min(order.size(), start + batch_size); ++k)
      b.push(set.inputs[order[k]], set.labels[order[k]], set.sources[order[k]]);
    out.push_back(std::move(b));
  }
  return out;
}

inline Bytes serialize_memory(const EpisodicMemory& memory) {
  ByteWriter w;
  w.u64(memory.per_class_budget);
  w.u64(memory.rng_seed);
  w.u64(memory.entries.size());
  for (const auto& e : memory.entries) {
    w.u64(e.label);
    w.u64(e.task);
    w.u64(e.sample_id);
    w.u64(static_cast<std::uint64_t>(e.x.size()));
    for (Eigen::Index i = 0; i < e.x.size(); ++i) w.f64(e.x[i]);
  }
  return std::move(w).bytes();
}

inline EpisodicMemory deserialize_memory(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "memory");
  EpisodicMemory m;
  m.per_class_budget = r.u64();
  m.rng_seed = r.u64();
  const std::uint64_t n = r.u64();
  for (std::uint64_t k = 0; k < n; ++k) {
    MemoryEntry e;
    e.label = r.u64();
    e.task = r.u64();
    e.sample_id = r.u64();
    const std::uint64_t dim = r.u64();
    if (dim * 8 > r.remaining()) fail(ErrorCode::Corruption, "memory: truncated entry");
    e.x.resize(static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < e.x.size(); ++i) e.x[i] = r.f64();
    m.entries.push_back(std::move(e));
  }
  r.expect_done();
  return m;
}

}  // namespace cl2r
