#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segpic/grad_check.hpp"

// Finite-difference checks of every differentiable building block, in
// double precision with central differences.
namespace segpic {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
  double seconds = 0.0;

  bool passed() const { return result.max_relative_error < kGradCheckTolerance; }
};

// dpsconv, sal, ctl, dkg, cag, rat, map, gdn, hyper, e2e.
std::vector<std::string> gradcheck_modules();

// module is one of gradcheck_modules() or "all"; anything else is a UsageError.
std::vector<GradCheckCase> run_gradcheck_suite(const std::string& module, std::uint64_t seed = 1);

}  // namespace segpic
