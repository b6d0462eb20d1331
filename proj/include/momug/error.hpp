#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace momug {

enum class ErrorCode {
  invalid_argument,
  out_of_range,
  shape_mismatch,
  unknown_word,
  zero_variance,
  parse_error,
  io_error,
  version_mismatch,
  non_finite,
  config_error,
  not_positive_semidefinite,
  state_mismatch,
};

std::string_view error_code_name(ErrorCode code);

// Single exception type for the library; the CLI turns it into an error JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace momug
