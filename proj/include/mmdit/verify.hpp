#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mmdit {

struct PropertyResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured quantity (error, difference, ...)
  double tolerance = 0.0;  // pass threshold for `value`
  std::string detail;
};

// Self-checks behind the `verify` command. Suites: "grad" (finite-difference
// checks per op and for a small end-to-end model), "attention" (region
// masking against a gather oracle), "retarget" (warp decomposition
// round-trips), or "all". Unknown suites are a ConfigError.
std::vector<PropertyResult> run_verify(const std::string& suite, std::uint64_t seed = 0);

}  // namespace mmdit
