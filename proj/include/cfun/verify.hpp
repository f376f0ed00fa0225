#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cfun {

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  int instances = 0;
  [[nodiscard]] bool passed() const { return max_error <= tolerance; }
};

struct VerifyOptions {
  int instances = 100;  // random instances per oracle comparison
  std::uint64_t seed = 2024;
  /// Runs the library side of the edge checks with a wrong Sobel profile.
  bool corrupt_sobel = false;
  bool oracles = true;    // brute-force oracle comparisons
  bool gradients = true;  // finite-difference gradient checks
};

/// Oracle comparisons and the gradient battery. Each entry reports the worst
/// error seen against its tolerance.
std::vector<CheckResult> run_verification(const VerifyOptions& opts = {});

}  // namespace cfun
