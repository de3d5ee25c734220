#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace uncertainty {

enum class ErrorCode {
  MalformedRecord,
  SchemaViolation,
  EmptyTrace,
  InvalidConfig,
  InsufficientMass,
  NotNormalized,
  UnbalancedBrackets,
  EmptyTree,
  AlignmentFailure,
  ZeroRow,
  AllBlockedMass,
  MissingInput,
  FormatVersionMismatch,
  ConfigMismatch,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::EmptyTrace: return "EmptyTrace";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InsufficientMass: return "InsufficientMass";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::UnbalancedBrackets: return "UnbalancedBrackets";
    case ErrorCode::EmptyTree: return "EmptyTree";
    case ErrorCode::AlignmentFailure: return "AlignmentFailure";
    case ErrorCode::ZeroRow: return "ZeroRow";
    case ErrorCode::AllBlockedMass: return "AllBlockedMass";
    case ErrorCode::MissingInput: return "MissingInput";
    case ErrorCode::FormatVersionMismatch: return "FormatVersionMismatch";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
  }
  return "Unknown";
}

// All library failures are reported through this type. `index()` carries the
// offending step / row index where one applies.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        index_(index) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

}  // namespace uncertainty
