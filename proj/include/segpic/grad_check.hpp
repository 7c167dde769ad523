#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "segpic/tensor.hpp"

namespace segpic {

struct GradCheckOptions {
  double eps = 1e-4;
  // 0 checks every element; otherwise a seeded sample of this many per input.
  std::size_t max_elements_per_input = 0;
  std::uint64_t seed = 1;
  // Per-element error is |a - n| / max(|a|, |n|, floor_fraction * G) where
  // G is the largest numeric gradient magnitude seen in the check.
  double floor_fraction = 1e-3;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t elements_checked = 0;
};

using LossBuilder = std::function<Tensor<double>()>;

/// Compares reverse-mode gradients of `loss` against central differences on
/// the elements of `inputs`. Piecewise ops are frozen to the branches of the
/// unperturbed pass while differencing.
GradCheckResult grad_check(const LossBuilder& loss, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options = {});

}  // namespace segpic
