#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mtil {

enum class ErrorCode {
  kInvalidArgument,
  kUnstableMatrix,
  kNotConverged,
  kNotStabilizing,
  kUnstableClosedLoop,
  kRankDeficientLift,
  kNoFactorization,
  kCholeskyFailure,
  kSingularBlock,
  kDegenerateRank,
  kRankDeficient,
  kEmptyInput,
  kUnstablePair,
  kParseError,
  kValidationError,
  kIoError,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-checkable error kind alongside the message.
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
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kUnstableMatrix: return "UnstableMatrix";
    case ErrorCode::kNotConverged: return "NotConverged";
    case ErrorCode::kNotStabilizing: return "NotStabilizing";
    case ErrorCode::kUnstableClosedLoop: return "UnstableClosedLoop";
    case ErrorCode::kRankDeficientLift: return "RankDeficientLift";
    case ErrorCode::kNoFactorization: return "NoFactorization";
    case ErrorCode::kCholeskyFailure: return "CholeskyFailure";
    case ErrorCode::kSingularBlock: return "SingularBlock";
    case ErrorCode::kDegenerateRank: return "DegenerateRank";
    case ErrorCode::kRankDeficient: return "RankDeficient";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kUnstablePair: return "UnstablePair";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kValidationError: return "ValidationError";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace mtil
