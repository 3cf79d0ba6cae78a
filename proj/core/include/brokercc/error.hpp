#pragma once

#include <stdexcept>
#include <string>

namespace brokercc {

enum class ErrorCode {
  kBadArgument,
  kSizeMismatch,
  kIo,
  kMissingFile,
  kMalformed,
  kBadConfig,
};

inline const char* to_code_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::kBadArgument: return "E_BAD_ARGUMENT";
    case ErrorCode::kSizeMismatch: return "E_SIZE_MISMATCH";
    case ErrorCode::kIo: return "E_IO";
    case ErrorCode::kMissingFile: return "E_MISSING_FILE";
    case ErrorCode::kMalformed: return "E_MALFORMED";
    case ErrorCode::kBadConfig: return "E_BAD_CONFIG";
  }
  return "E_UNKNOWN";
}

/// Hard error carrying a machine-parsable code; the CLI prints it as a
/// single "error[CODE]: message" line and exits nonzero.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace brokercc
