#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Self-contained verification suites shared by the CLI and the test binaries.
namespace segnetr::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Round trips, permutation/zero-arithmetic, index-map placement and
/// displacement non-vacuity over `cases` random tensors per patch size.
std::vector<CheckResult> layout_suite(std::uint64_t seed = 0, std::size_t cases = 50);

struct GradcheckOptions {
  bool f64 = true;
  std::uint64_t seed = 0;
  std::size_t op_seeds = 20;     // random shapes per primitive op
  std::size_t block_seeds = 1;   // random draws for composite blocks
};

/// Central-difference comparison for every differentiable op, the
/// MBConv/branch/IRSC units and a SegNetr block in each interaction mode.
/// Limits in 64-bit: 1e-6 for ops affine in each input, 1e-3 otherwise.
/// 32-bit runs the same cases as a smoke test on the norm-wise relative
/// error with limits 1e-2 / 5e-2.
std::vector<CheckResult> gradcheck_suite(const GradcheckOptions& opt = {});

std::string format(const CheckResult& r);
bool all_passed(const std::vector<CheckResult>& rs);

}  // namespace segnetr::checks
