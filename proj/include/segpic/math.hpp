#pragma once

#include <cmath>
#include <numbers>

namespace segpic {

// Standard normal CDF via erfc, accurate in both tails.
template <typename T>
T normal_cdf(T x) {
  return T(0.5) * std::erfc(-x / std::numbers::sqrt2_v<T>);
}

template <typename T>
T normal_pdf(T x) {
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
}

// Numerically stable logistic sigmoid.
template <typename T>
T logistic(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace segpic
