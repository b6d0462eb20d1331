#include "momug/tensor.hpp"

#include "momug/error.hpp"

namespace momug {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t counter) {
  Fnv1a h;
  h.update(std::as_bytes(std::span<const char>(label.data(), label.size())));
  return splitmix64(splitmix64(root ^ h.value()) + splitmix64(counter + 0x632BE59BD9B4E019ULL));
}

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::unknown_word: return "unknown_word";
    case ErrorCode::zero_variance: return "zero_variance";
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::config_error: return "config_error";
    case ErrorCode::not_positive_semidefinite: return "not_positive_semidefinite";
    case ErrorCode::state_mismatch: return "state_mismatch";
  }
  return "unknown";
}

}  // namespace momug
