#pragma once

#include <cstddef>

#include "segpic/tensor.hpp"

// Differentiable primitives. Image-like tensors are [C,H,W] (single image,
// no batch axis). Every op validates shapes and throws DimensionError.
namespace segpic {

// Elementwise arithmetic on equal shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
// Values outside [lo, hi] are clipped and pass no gradient.
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

// Reductions to a scalar.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// [C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W]
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// x[C,...] scaled per leading-axis channel by s[C].
template <typename T> Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& s);

// Cross-correlation with zero padding. w is [O, C/groups, k, k], b is [O]
// or undefined for no bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t padding, std::size_t groups = 1);

// Adjoint of conv2d with the same (k, stride, padding): output is
// stride*H x stride*W. w is [C_in, O, k, k].
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t stride, std::size_t padding);

enum class Activation { gelu, leaky_relu, sigmoid };
inline constexpr double kLeakySlope = 0.01;

template <typename T> Tensor<T> activation(const Tensor<T>& x, Activation kind);
template <typename T> Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Activation::gelu); }
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& x) {
  return activation(x, Activation::leaky_relu);
}
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(x, Activation::sigmoid);
}

// y_c = x_c / sqrt(beta_c + sum_j gamma_cj x_j^2); inverse multiplies.
// beta [C] and gamma [C,C] are the effective (already positive) values.
template <typename T>
Tensor<T> gdn(const Tensor<T>& x, const Tensor<T>& beta, const Tensor<T>& gamma, bool inverse);

// Affine map over the last axis: x[..., Cin], w[Cout, Cin], b[Cout].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// [C,H,W] -> [C]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// [C*g, H, W] -> [C, H, W, g]: moves each channel group to the innermost axis.
template <typename T> Tensor<T> group_to_last(const Tensor<T>& x, std::size_t group);

// Softmax over consecutive runs of `group` values along the last axis.
template <typename T> Tensor<T> softmax_last(const Tensor<T>& x, std::size_t group);

}  // namespace segpic
