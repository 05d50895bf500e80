#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace curvelang {

enum class ErrorCode {
  DegreeTooHigh,
  OutOfRange,
  LengthTooShort,
  LengthOutOfRange,
  NumericalFailure,
  ShapeMismatch,
  NonFinite,
  NotScalar,
  StepOutOfRange,
  NotUnitNorm,
  DegenerateDistribution,
  TooFewSamples,
  IoError,
  EmptyCorpus,
  CheckpointVersionMismatch,
  InvalidConfig,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers dispatch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegreeTooHigh: return "DegreeTooHigh";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::LengthTooShort: return "LengthTooShort";
    case ErrorCode::LengthOutOfRange: return "LengthOutOfRange";
    case ErrorCode::NumericalFailure: return "NumericalFailure";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::NotUnitNorm: return "NotUnitNorm";
    case ErrorCode::DegenerateDistribution: return "DegenerateDistribution";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::CheckpointVersionMismatch: return "CheckpointVersionMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

}  // namespace curvelang
