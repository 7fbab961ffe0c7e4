#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dv {

// Process exit codes, shared between the library's error categories and the CLI.
enum class ErrorCategory : int {
  usage = 2,
  io = 3,
  data_invalid = 4,
  numeric = 5,
};

// All library errors carry a short machine-parsable code (e.g. "SpatialMismatch")
// plus a human-readable message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, std::string code, const std::string& msg)
      : std::runtime_error(code + ": " + msg), category_(cat), code_(std::move(code)) {}

  ErrorCategory category() const noexcept { return category_; }
  const std::string& code() const noexcept { return code_; }

 private:
  ErrorCategory category_;
  std::string code_;
};

[[noreturn]] inline void fail(ErrorCategory cat, const char* code, const std::string& msg) {
  throw Error(cat, code, msg);
}

}  // namespace dv
