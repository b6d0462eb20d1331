#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace momug {

// Full command-line entry point. Success prints a JSON summary to `out` and
// returns 0; failures print {"error", "message", "details"} JSON to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace momug
