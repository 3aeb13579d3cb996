#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace glmask {

struct CheckResult {
  std::string name;
  bool passed = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

/// Full-model gradient against central differences on a 2-sentence batch.
CheckResult check_gradient(std::uint64_t seed);
/// Efficient alignment against the one-sweep-per-unit oracle, both granularities.
CheckResult check_alignment(std::uint64_t seed, std::size_t trials);
/// Gradient of the masked objective against the weighted sum of unit gradients.
CheckResult check_decomposition(std::uint64_t seed, std::size_t trials);
/// Forced all-positive scores against vanilla training, step by step.
CheckResult check_vanilla_equivalence(std::uint64_t seed, std::size_t steps);

/// Runs every check; `trials` must be positive.
std::vector<CheckResult> run_checks(std::uint64_t seed, std::size_t trials);

}  // namespace glmask
