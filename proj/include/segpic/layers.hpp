#pragma once

#include <cstddef>
#include <string>

#include "segpic/param_store.hpp"
#include "segpic/rng.hpp"

// Parameterized layers over a ParamStore. add_* registers and initializes
// "<name>.weight" / "<name>.bias" (or GDN's "<name>.beta" / "<name>.gamma");
// the matching apply function looks them up by the same name.
namespace segpic {

struct LayerInit {
  // Multiplies the fan-in uniform bound of the weights.
  double weight_gain = 1.0;
  double bias = 0.0;
};

// Odd kernel k, "same" padding k/2. Weight [cout, cin/groups, k, k].
template <typename T>
void add_conv(ParamStore<T>& s, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              Rng& rng, std::size_t groups = 1, LayerInit init = {});
template <typename T>
Tensor<T> apply_conv(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x,
                     std::size_t stride = 1, std::size_t groups = 1);

// Stride-2 transposed conv with padding k/2. Weight [cin, cout, k, k].
template <typename T>
void add_tconv(ParamStore<T>& s, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               Rng& rng, LayerInit init = {});
template <typename T>
Tensor<T> apply_tconv(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x);

template <typename T>
void add_linear(ParamStore<T>& s, const std::string& name, std::size_t cin, std::size_t cout, Rng& rng,
                LayerInit init = {});
template <typename T>
Tensor<T> apply_linear(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x);

// Stored as square roots: beta = beta_raw^2 + kGdnBetaMin, gamma = gamma_raw^2.
inline constexpr double kGdnBetaMin = 1e-6;
template <typename T>
void add_gdn(ParamStore<T>& s, const std::string& name, std::size_t channels);
template <typename T>
Tensor<T> apply_gdn(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x, bool inverse);

}  // namespace segpic
