// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-describing binary container shared by checkpoints, memory snapshots
// and gallery files.
//
// Layout (all integers little-endian):
//   magic[8]
//   u32 format_version
//   u32 section_count
//   section_count x { u16 name_len, name, u64 payload_len, payload, u64 fnv1a(payload) }
//   u64 fnv1a(all preceding bytes)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cl2r/error.hpp"

namespace cl2r {

using Bytes = std::vector<std::uint8_t>;

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> data,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (std::uint8_t byte : data) {
    hash ^= byte;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string hex64(std::uint64_t value) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << value;
  return out.str();
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }

  void str(std::string_view s) {
    u64(s.size());
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  void raw(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }

  const Bytes& bytes() const& { return bytes_; }
  Bytes bytes() && { return std::move(bytes_); }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  Bytes bytes_;
};

/// Bounds-checked little-endian reader. Any overrun is reported as corruption.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string context)
      : data_(data), context_(std::move(context)) {}

  std::uint8_t u8() { return get_le<std::uint8_t>(); }
  std::uint16_t u16() { return get_le<std::uint16_t>(); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }

  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::span<const std::uint8_t> raw(std::uint64_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

  void expect_done() const {
    if (!done()) fail(ErrorCode::Corruption, context_ + ": trailing bytes");
  }

 private:
  void need(std::uint64_t n) const {
    if (n > remaining()) fail(ErrorCode::Corruption, context_ + ": truncated");
  }

  template <typename U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

using Magic = std::array<char, 8>;

/// Named sections of a container, kept in insertion order.
class Container {
 public:
  Container(Magic magic, std::uint32_t version) : magic_(magic), version_(version) {}

  void add(std::string name, Bytes payload) {
    if (find(name) != nullptr) fail(ErrorCode::InvalidArgument, "duplicate section '" + name + "'");
    sections_.emplace_back(std::move(name), std::move(payload));
  }

  const Bytes& section(std::string_view name) const {
    const Bytes* found = find(name);
    if (found == nullptr) fail(ErrorCode::Corruption, "missing section '" + std::string(name) + "'");
    return *found;
  }

  bool has(std::string_view name) const { return find(name) != nullptr; }

  std::vector<std::string> section_names() const {
    std::vector<std::string> out;
    for (const auto& s : sections_) out.push_back(s.first);
    return out;
  }

  std::uint32_t version() const { return version_; }
  const Magic& magic() const { return magic_; }

  Bytes serialize() const {
    ByteWriter w;
    w.raw(std::span(reinterpret_cast<const std::uint8_t*>(magic_.data()), magic_.size()));
    w.u32(version_);
    w.u32(static_cast<std::uint32_t>(sections_.size()));
    for (const auto& [name, payload] : sections_) {
      w.u16(static_cast<std::uint16_t>(name.size()));
      w.raw(std::span(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()));
      w.u64(payload.size());
      w.raw(payload);
      w.u64(fnv1a64(payload));
    }
    Bytes out = std::move(w).bytes();
    const std::uint64_t total = fnv1a64(out);
    for (std::size_t i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(total >> (8 * i)));
    return out;
  }

  /// Parses a container, rejecting a foreign magic, a version newer than
  /// `max_version`, truncation and any checksum mismatch.
  static Container parse(std::span<const std::uint8_t> data, Magic expected, std::uint32_t max_version,
                         const std::string& context) {
    ByteReader r(data, context);
    auto magic_bytes = r.raw(expected.size());
    if (std::memcmp(magic_bytes.data(), expected.data(), expected.size()) != 0)
      fail(ErrorCode::Corruption, context + ": bad magic");
    const std::uint32_t version = r.u32();
    if (version > max_version)
      fail(ErrorCode::UnsupportedVersion, context + ": format version " + std::to_string(version) +
                                              " is newer than supported version " + std::to_string(max_version));
    if (version == 0) fail(ErrorCode::Corruption, context + ": format version 0");
    Container c(expected, version);
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint16_t name_len = r.u16();
      auto name_bytes = r.raw(name_len);
      std::string name(reinterpret_cast<const char*>(name_bytes.data()), name_len);
      const std::uint64_t len = r.u64();
      auto payload = r.raw(len);
      if (r.u64() != fnv1a64(payload)) fail(ErrorCode::Corruption, context + ": checksum mismatch in '" + name + "'");
      if (c.has(name)) fail(ErrorCode::Corruption, context + ": duplicate section '" + name + "'");
      c.sections_.emplace_back(std::move(name), Bytes(payload.begin(), payload.end()));
    }
    const std::size_t body = r.position();
    if (r.u64() != fnv1a64(data.first(body))) fail(ErrorCode::Corruption, context + ": file checksum mismatch");
    r.expect_done();
    return c;
  }

 private:
  const Bytes* find(std::string_view name) const {
    for (const auto& [n, payload] : sections_)
      if (n == name) return &payload;
    return nullptr;
  }

  Magic magic_;
  std::uint32_t version_;
  std::vector<std::pair<std::string, Bytes>> sections_;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) fail(ErrorCode::Io, "short write to '" + path.string() + "'");
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

inline std::uint64_t file_checksum(const std::filesystem::path& path) { return fnv1a64(read_file(path)); }

}  // namespace cl2r
