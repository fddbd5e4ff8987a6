#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace minbackprop {

enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kNonFinite,
  kConvergenceFailure,
  kNotARoot,
  kRankDeficient,
  kDegenerateConfiguration,
  kNoRealSolution,
  kEmptyCandidates,
  kDegenerateSpectrum,
  kDegenerateLine,
  kTrackingFailure,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::kNotARoot: return "NotARoot";
    case ErrorCode::kRankDeficient: return "RankDeficient";
    case ErrorCode::kDegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::kNoRealSolution: return "NoRealSolution";
    case ErrorCode::kEmptyCandidates: return "EmptyCandidates";
    case ErrorCode::kDegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorCode::kDegenerateLine: return "DegenerateLine";
    case ErrorCode::kTrackingFailure: return "TrackingFailure";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable code so
/// callers (and the CLI exit-code mapping) can dispatch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace minbackprop
