// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace prefixmtl {

enum class ErrorCode {
  // data / format errors
  kParseError,
  kDuplicatePrefix,
  kInvalidGold,
  kPoolExhausted,
  kEmptyCorpus,
  kEmptyTask,
  kMissingPrefix,
  kUnknownTask,
  kUnknownStrategy,
  kUnsupportedVersion,
  kMixedOptionCount,
  kIo,
  // numeric errors
  kShapeMismatch,
  kNonScalarLoss,
  kStateMismatch,
  kLengthExceeded,
  kNonFinite,
  kConstantVector,
  // caller errors
  kInvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kDuplicatePrefix: return "DuplicatePrefix";
    case ErrorCode::kInvalidGold: return "InvalidGold";
    case ErrorCode::kPoolExhausted: return "PoolExhausted";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kEmptyTask: return "EmptyTask";
    case ErrorCode::kMissingPrefix: return "MissingPrefix";
    case ErrorCode::kUnknownTask: return "UnknownTask";
    case ErrorCode::kUnknownStrategy: return "UnknownStrategy";
    case ErrorCode::kUnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::kMixedOptionCount: return "MixedOptionCount";
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonScalarLoss: return "NonScalarLoss";
    case ErrorCode::kStateMismatch: return "StateMismatch";
    case ErrorCode::kLengthExceeded: return "LengthExceeded";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kConstantVector: return "ConstantVector";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Numeric failures map to exit code 3, everything else that is not a usage
/// problem maps to 2.
inline bool is_numeric(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kNonScalarLoss:
    case ErrorCode::kStateMismatch:
    case ErrorCode::kNonFinite:
    case ErrorCode::kConstantVector:
      return true;
    default:
      return false;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ParseError : public Error {
 public:
  ParseError(std::string file, std::size_t line, const std::string& what)
      : Error(ErrorCode::kParseError, file + ":" + std::to_string(line) + ": " + what),
        file_(std::move(file)),
        line_(line) {}

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

}  // namespace prefixmtl
