#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "segpic/param_store.hpp"
#include "segpic/region.hpp"
#include "segpic/rng.hpp"

// Region-adaptive transform: per-pixel depthwise kernels generated from the
// local features and the expanded region prototypes.
namespace segpic {

// Y[c,h,w] = sum_{i,j} X[c, h+i-k/2, w+j-k/2] * K[c,h,w,i,j], zero padded.
// kernels is [C,H,W,k,k] with odd k.
template <typename T>
Tensor<T> dpsconv(const Tensor<T>& x, const Tensor<T>& kernels);

template <typename T>
struct DpsGrads {
  std::vector<T> x;
  std::vector<T> kernels;
};

// Adjoints of dpsconv given the output gradient.
template <typename T>
DpsGrads<T> dpsconv_backward(std::span<const T> grad_out, const Tensor<T>& x, const Tensor<T>& kernels);

// Multiply-accumulates executed by dpsconv on this thread since the last reset.
std::uint64_t dpsconv_mac_count();
void reset_dpsconv_mac_count();

struct RatConfig {
  std::size_t channels = 0;
  std::size_t proto_dim = 0;
  std::size_t kernel = 3;
  // Softmax over the k*k taps of every generated kernel.
  bool normalize_kernels = true;

  std::size_t cag_hidden() const { return channels / 4 > 0 ? channels / 4 : 1; }
};

// Scale affine layer: Y = S(X) * X + B(X), where S and B are each
// conv1x1 -> GELU -> conv1x1 with C hidden channels.
template <typename T>
void add_sal(ParamStore<T>& s, const std::string& name, std::size_t channels, Rng& rng);
template <typename T>
Tensor<T> sal(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x);

template <typename T>
void add_rat(ParamStore<T>& s, const std::string& name, const RatConfig& cfg, Rng& rng);

// conv1x1 -> LeakyReLU -> conv1x1, C -> C.
template <typename T>
Tensor<T> ctl(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x);
// [C+P,H,W] -> kernels [C,H,W,k,k].
template <typename T>
Tensor<T> dkg(const ParamStore<T>& s, const std::string& name, const RatConfig& cfg, const Tensor<T>& fused);
// [C+P,H,W] -> channel attention [C] in (0,1).
template <typename T>
Tensor<T> cag(const ParamStore<T>& s, const std::string& name, const Tensor<T>& fused);

// prototypes is [n, P] for the n regions of rm, which is at x's resolution.
template <typename T>
Tensor<T> rat_forward(const ParamStore<T>& s, const std::string& name, const RatConfig& cfg, const Tensor<T>& x,
                      const Tensor<T>& prototypes, const RegionMap& rm);

}  // namespace segpic
