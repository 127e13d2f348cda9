// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cl2r {

/// Broad failure categories. The CLI maps each one onto an exit code.
enum class ErrorCode {
  InvalidArgument,   // violated precondition of a library call
  Config,            // bad configuration value or unknown key
  Data,              // malformed or inconsistent input data
  DegenerateFeature, // zero-norm feature where a direction is required
  Disjointness,      // class sets that must be disjoint overlap
  UndefinedMetric,   // metric not defined for the given input size
  Divergence,        // non-finite loss, gradient or parameter
  Io,                // file missing or unwritable
  Corruption,        // checksum mismatch, truncation, bad magic
  UnsupportedVersion // container written by a newer format
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::Config: return "config";
    case ErrorCode::Data: return "data";
    case ErrorCode::DegenerateFeature: return "degenerate-feature";
    case ErrorCode::Disjointness: return "disjointness";
    case ErrorCode::UndefinedMetric: return "undefined-metric";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::Io: return "io";
    case ErrorCode::Corruption: return "corruption";
    case ErrorCode::UnsupportedVersion: return "unsupported-version";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), message_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// The message without the category prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace cl2r
