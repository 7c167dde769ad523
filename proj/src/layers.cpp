#include "segpic/layers.hpp"

#include <cmath>

#include "segpic/ops.hpp"

namespace segpic {

namespace {

template <typename T>
Tensor<T> optional(const ParamStore<T>& s, const std::string& name) {
  return s.contains(name) ? s.get(name) : Tensor<T>();
}

template <typename T>
void init_params(ParamStore<T>& s, const std::string& name, Shape wshape, std::size_t cout, std::size_t fan_in,
                 Rng& rng, LayerInit init) {
  init_uniform(s.add(name + ".weight", std::move(wshape)), init.weight_gain / std::sqrt(double(fan_in)), rng);
  for (auto& v : s.add(name + ".bias", {cout}).mutable_values()) v = static_cast<T>(init.bias);
}

}  // namespace

template <typename T>
void add_conv(ParamStore<T>& s, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              Rng& rng, std::size_t groups, LayerInit init) {
  if (groups == 0 || cin % groups || cout % groups) throw ConfigError(name + ": channels not divisible by groups");
  const std::size_t cg = cin / groups;
  init_params(s, name, {cout, cg, k, k}, cout, cg * k * k, rng, init);
}

template <typename T>
Tensor<T> apply_conv(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x, std::size_t stride,
                     std::size_t groups) {
  const Tensor<T>& w = s.get(name + ".weight");
  return conv2d(x, w, optional(s, name + ".bias"), stride, w.dim(3) / 2, groups);
}

template <typename T>
void add_tconv(ParamStore<T>& s, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               Rng& rng, LayerInit init) {
  init_params(s, name, {cin, cout, k, k}, cout, cin * k * k / 4, rng, init);
}

template <typename T>
Tensor<T> apply_tconv(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x) {
  const Tensor<T>& w = s.get(name + ".weight");
  return conv2d_transpose(x, w, optional(s, name + ".bias"), 2, w.dim(3) / 2);
}

template <typename T>
void add_linear(ParamStore<T>& s, const std::string& name, std::size_t cin, std::size_t cout, Rng& rng,
                LayerInit init) {
  init_params(s, name, {cout, cin}, cout, cin, rng, init);
}

template <typename T>
Tensor<T> apply_linear(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x) {
  return linear(x, s.get(name + ".weight"), optional(s, name + ".bias"));
}

template <typename T>
void add_gdn(ParamStore<T>& s, const std::string& name, std::size_t channels) {
  for (auto& v : s.add(name + ".beta", {channels}).mutable_values()) v = static_cast<T>(std::sqrt(1.0 - kGdnBetaMin));
  auto g = s.add(name + ".gamma", {channels, channels}).mutable_values();
  // Off-diagonal roots start small but nonzero; a zero root has zero gradient.
  for (std::size_t i = 0; i < channels; ++i) {
    for (std::size_t j = 0; j < channels; ++j) g[i * channels + j] = static_cast<T>(i == j ? std::sqrt(0.1) : 1e-3);
  }
}

template <typename T>
Tensor<T> apply_gdn(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x, bool inverse) {
  auto beta = add_scalar(square(s.get(name + ".beta")), static_cast<T>(kGdnBetaMin));
  auto gamma = square(s.get(name + ".gamma"));
  return gdn(x, beta, gamma, inverse);
}

#define SEGPIC_INSTANTIATE_LAYERS(T)                                                                         \
  template void add_conv(ParamStore<T>&, const std::string&, std::size_t, std::size_t, std::size_t, Rng&,   \
                         std::size_t, LayerInit);                                                            \
  template Tensor<T> apply_conv(const ParamStore<T>&, const std::string&, const Tensor<T>&, std::size_t,   \
                                std::size_t);                                                                \
  template void add_tconv(ParamStore<T>&, const std::string&, std::size_t, std::size_t, std::size_t, Rng&,  \
                          LayerInit);                                                                      \
  template Tensor<T> apply_tconv(const ParamStore<T>&, const std::string&, const Tensor<T>&);               \
  template void add_linear(ParamStore<T>&, const std::string&, std::size_t, std::size_t, Rng&, LayerInit);  \
  template Tensor<T> apply_linear(const ParamStore<T>&, const std::string&, const Tensor<T>&);              \
  template void add_gdn(ParamStore<T>&, const std::string&, std::size_t);                                    \
  template Tensor<T> apply_gdn(const ParamStore<T>&, const std::string&, const Tensor<T>&, bool);

SEGPIC_INSTANTIATE_LAYERS(float)
SEGPIC_INSTANTIATE_LAYERS(double)

}  // namespace segpic
