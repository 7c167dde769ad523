#include "segpic/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "segpic/rng.hpp"

namespace segpic {

namespace {

struct BranchModeScope {
  explicit BranchModeScope(detail::BranchMode mode) { detail::set_branch_mode(mode); }
  ~BranchModeScope() {
    detail::set_branch_mode(detail::BranchMode::off);
    detail::clear_branch_tape();
  }
};

}  // namespace

GradCheckResult grad_check(const LossBuilder& loss, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options) {
  std::vector<bool> previous(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    previous[i] = inputs[i].requires_grad();
    inputs[i].zero_grad();
    inputs[i].set_requires_grad(true);
  }

  detail::clear_branch_tape();
  BranchModeScope scope(detail::BranchMode::record);
  Tensor<double> root = loss();
  root.backward();
  std::vector<std::vector<double>> analytic(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].has_grad()) {
      analytic[i].assign(inputs[i].grad().begin(), inputs[i].grad().end());
    } else {
      analytic[i].assign(inputs[i].numel(), 0.0);
    }
  }
  root = Tensor<double>();

  Rng rng(options.seed);
  std::vector<double> a_all, n_all;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> idx(inputs[i].numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options.max_elements_per_input != 0 && idx.size() > options.max_elements_per_input) {
      // Partial Fisher-Yates for a seeded sample without replacement.
      for (std::size_t j = 0; j < options.max_elements_per_input; ++j) {
        std::swap(idx[j], idx[j + rng.index(idx.size() - j)]);
      }
      idx.resize(options.max_elements_per_input);
    }
    auto values = inputs[i].mutable_values();
    for (std::size_t e : idx) {
      const double saved = values[e];
      double f_plus, f_minus;
      {
        NoGradGuard no_grad;
        detail::set_branch_mode(detail::BranchMode::replay);
        values[e] = saved + options.eps;
        f_plus = loss().item();
        detail::set_branch_mode(detail::BranchMode::replay);
        values[e] = saved - options.eps;
        f_minus = loss().item();
      }
      values[e] = saved;
      a_all.push_back(analytic[i][e]);
      n_all.push_back((f_plus - f_minus) / (2.0 * options.eps));
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i].zero_grad();
    inputs[i].set_requires_grad(previous[i]);
  }

  GradCheckResult result;
  result.elements_checked = a_all.size();
  double scale = 0.0;
  for (double n : n_all) scale = std::max(scale, std::abs(n));
  for (double a : a_all) scale = std::max(scale, std::abs(a));
  const double floor = options.floor_fraction * scale;
  for (std::size_t j = 0; j < a_all.size(); ++j) {
    const double diff = std::abs(a_all[j] - n_all[j]);
    if (diff == 0.0) continue;
    const double denom = std::max({std::abs(a_all[j]), std::abs(n_all[j]), floor});
    result.max_relative_error = std::max(result.max_relative_error, diff / denom);
  }
  return result;
}

}  // namespace segpic
