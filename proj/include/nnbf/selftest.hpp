#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nnbf::selftest {

struct CheckResult {
  std::string name;
  bool passed;
  double seconds;
  std::string detail;
};

// Fast invariant suite: gradient checks, closed-form combiner oracles,
// attention loop oracle, codec roundtrips. Prints one table row per check.
// Honors the NNBF_FAULT_INJECT environment variable (value "gelu") to
// exercise the failure path.
std::vector<CheckResult> run_selftest(std::ostream& os);
bool all_passed(const std::vector<CheckResult>& results);

}  // namespace nnbf::selftest
