#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace consensus {

enum class ErrorCode {
  kSchemaError,
  kDuplicateCaseId,
  kManifestError,
  kConfigError,
  kReplayMiss,
  kEndpointError,
  kRateLimitTimeout,
  kMissingInput,
  kBackendError,
  kParseError,
  kNoInterpreter,
  kCaseFailed,
  kEmptyInput,
  kLengthMismatch,
  kOneClassOnly,
  kDimMismatch,
  kEmptyText,
  kDegenerateInput,
  kWeightError,
  kMissingComponent,
  kMissingDimension,
  kInsufficientMaterial,
  kPrecondition,
  kUnknownCase,
  kAlreadyDecided,
  kBindError,
  kIoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSchemaError: return "SchemaError";
    case ErrorCode::kDuplicateCaseId: return "DuplicateCaseId";
    case ErrorCode::kManifestError: return "ManifestError";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kReplayMiss: return "ReplayMiss";
    case ErrorCode::kEndpointError: return "EndpointError";
    case ErrorCode::kRateLimitTimeout: return "RateLimitTimeout";
    case ErrorCode::kMissingInput: return "MissingInput";
    case ErrorCode::kBackendError: return "BackendError";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kNoInterpreter: return "NoInterpreter";
    case ErrorCode::kCaseFailed: return "CaseFailed";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kOneClassOnly: return "OneClassOnly";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kEmptyText: return "EmptyText";
    case ErrorCode::kDegenerateInput: return "DegenerateInput";
    case ErrorCode::kWeightError: return "WeightError";
    case ErrorCode::kMissingComponent: return "MissingComponent";
    case ErrorCode::kMissingDimension: return "MissingDimension";
    case ErrorCode::kInsufficientMaterial: return "InsufficientMaterial";
    case ErrorCode::kPrecondition: return "PreconditionError";
    case ErrorCode::kUnknownCase: return "UnknownCase";
    case ErrorCode::kAlreadyDecided: return "AlreadyDecided";
    case ErrorCode::kBindError: return "BindError";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above. The
/// `detail` string names the offending field, role, or item where one exists.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code),
        detail_(std::move(detail)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace consensus
