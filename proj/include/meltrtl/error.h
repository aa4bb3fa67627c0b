#pragma once

#include <stdexcept>
#include <string>

namespace meltrtl {

// Error categories double as CLI exit codes (see docs/cli.md).
enum class ErrorCode : int {
  kContract = 2,    // precondition violated by the caller
  kParse = 3,       // malformed text input (dataset record, config line)
  kFormat = 4,      // binary artifact: bad magic, version, checksum, shape
  kIo = 5,          // file could not be opened or written
  kConfig = 6,      // run configuration rejected
  kData = 7,        // data unusable for the requested operation
  kNumeric = 8,     // divergence (NaN / Inf) during optimization
  kCapability = 9,  // optional external tool unavailable
  kMissingArtifact = 10,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorCode::kContract, what);
}

const char* error_code_name(ErrorCode code);

}  // namespace meltrtl
