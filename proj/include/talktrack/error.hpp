#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace talktrack {

enum class ErrorKind {
  kConfig,
  kData,
  kLookup,
  kEligibility,
  kProtocol,
  kOracleSize,
  kDivergence,
  kNotFound,
  kConflict,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so the CLI and the
// HTTP layer can map it to an exit code or a status code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

// 0 success, 2 config, 3 data, 4 divergence, 1 anything else.
int exit_code_for(ErrorKind kind);

}  // namespace talktrack
