#include "segpic/rat.hpp"

#include <algorithm>

#include "segpic/layers.hpp"
#include "segpic/ops.hpp"

namespace segpic {

namespace {

thread_local std::uint64_t mac_count = 0;

struct DpsGeometry {
  std::size_t C, H, W, k;
};

template <typename T>
DpsGeometry check_dps(const Tensor<T>& x, const Tensor<T>& kernels) {
  if (!x.defined() || !kernels.defined() || x.rank() != 3 || kernels.rank() != 5) {
    throw DimensionError("dpsconv: expects x[C,H,W] and kernels[C,H,W,k,k]");
  }
  const auto& ks = kernels.shape();
  if (ks[0] != x.dim(0) || ks[1] != x.dim(1) || ks[2] != x.dim(2) || ks[3] != ks[4] || ks[3] % 2 == 0) {
    throw DimensionError("dpsconv: kernels " + shape_string(ks) + " do not fit input " + shape_string(x.shape()));
  }
  return {x.dim(0), x.dim(1), x.dim(2), ks[3]};
}

// Calls f(out_index, in_index, kernel_index) for every in-bounds tap.
template <typename F>
std::uint64_t for_each_tap(const DpsGeometry& g, F f) {
  const auto r = static_cast<std::ptrdiff_t>(g.k / 2);
  const auto H = static_cast<std::ptrdiff_t>(g.H), W = static_cast<std::ptrdiff_t>(g.W);
  std::uint64_t taps = 0;
  for (std::size_t c = 0; c < g.C; ++c) {
    for (std::ptrdiff_t h = 0; h < H; ++h) {
      const std::ptrdiff_t i0 = std::max<std::ptrdiff_t>(0, r - h), i1 = std::min<std::ptrdiff_t>(2 * r + 1, H + r - h);
      for (std::ptrdiff_t w = 0; w < W; ++w) {
        const std::ptrdiff_t j0 = std::max<std::ptrdiff_t>(0, r - w), j1 = std::min<std::ptrdiff_t>(2 * r + 1, W + r - w);
        const std::size_t o = (c * g.H + h) * g.W + w;
        const std::size_t kbase = o * g.k * g.k;
        for (std::ptrdiff_t i = i0; i < i1; ++i) {
          const std::size_t row = (c * g.H + (h + i - r)) * g.W;
          for (std::ptrdiff_t j = j0; j < j1; ++j) {
            f(o, row + (w + j - r), kbase + i * g.k + j);
          }
        }
        taps += static_cast<std::uint64_t>((i1 - i0) * (j1 - j0));
      }
    }
  }
  return taps;
}

}  // namespace

std::uint64_t dpsconv_mac_count() { return mac_count; }
void reset_dpsconv_mac_count() { mac_count = 0; }

template <typename T>
DpsGrads<T> dpsconv_backward(std::span<const T> grad_out, const Tensor<T>& x, const Tensor<T>& kernels) {
  const DpsGeometry g = check_dps(x, kernels);
  if (grad_out.size() != x.numel()) throw DimensionError("dpsconv_backward: gradient size mismatch");
  DpsGrads<T> out{std::vector<T>(x.numel(), T(0)), std::vector<T>(kernels.numel(), T(0))};
  auto xv = x.values(), kv = kernels.values();
  for_each_tap(g, [&](std::size_t o, std::size_t in, std::size_t ki) {
    out.x[in] += grad_out[o] * kv[ki];
    out.kernels[ki] += grad_out[o] * xv[in];
  });
  return out;
}

template <typename T>
Tensor<T> dpsconv(const Tensor<T>& x, const Tensor<T>& kernels) {
  const DpsGeometry g = check_dps(x, kernels);
  auto xv = x.values(), kv = kernels.values();
  std::vector<T> out(x.numel(), T(0));
  mac_count += for_each_tap(g, [&](std::size_t o, std::size_t in, std::size_t ki) { out[o] += xv[in] * kv[ki]; });
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &kernels}, [](detail::Node<T>& n) {
    auto xt = Tensor<T>::from_node(n.parents[0]);
    auto kt = Tensor<T>::from_node(n.parents[1]);
    auto grads = dpsconv_backward<T>(n.grad, xt, kt);
    detail::accumulate<T>(*n.parents[0], grads.x);
    detail::accumulate<T>(*n.parents[1], grads.kernels);
  });
}

template <typename T>
void add_sal(ParamStore<T>& s, const std::string& name, std::size_t channels, Rng& rng) {
  // Starts close to the identity: scale near 1, bias near 0.
  add_conv(s, name + ".scale.0", channels, channels, 1, rng);
  add_conv(s, name + ".scale.1", channels, channels, 1, rng, 1, LayerInit{0.1, 1.0});
  add_conv(s, name + ".bias.0", channels, channels, 1, rng);
  add_conv(s, name + ".bias.1", channels, channels, 1, rng, 1, LayerInit{0.1, 0.0});
}

template <typename T>
Tensor<T> sal(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x) {
  auto scale = apply_conv(s, name + ".scale.1", gelu(apply_conv(s, name + ".scale.0", x)));
  auto bias = apply_conv(s, name + ".bias.1", gelu(apply_conv(s, name + ".bias.0", x)));
  return add(mul(scale, x), bias);
}

template <typename T>
void add_rat(ParamStore<T>& s, const std::string& name, const RatConfig& cfg, Rng& rng) {
  const std::size_t C = cfg.channels, F = cfg.channels + cfg.proto_dim, kk = cfg.kernel * cfg.kernel;
  if (C == 0 || cfg.proto_dim == 0 || cfg.kernel % 2 == 0) throw ConfigError(name + ": invalid RAT config");
  add_conv(s, name + ".ctl.0", C, C, 1, rng);
  add_conv(s, name + ".ctl.1", C, C, 1, rng);
  add_conv(s, name + ".dkg.fuse", F, C, 1, rng);
  add_conv(s, name + ".dkg.gconv", C, kk * C, 3, rng, C);
  add_linear(s, name + ".cag.fc0", F, cfg.cag_hidden(), rng);
  add_linear(s, name + ".cag.fc1", cfg.cag_hidden(), C, rng);
  add_conv(s, name + ".merge", C, C, 1, rng);
}

template <typename T>
Tensor<T> ctl(const ParamStore<T>& s, const std::string& name, const Tensor<T>& x) {
  return apply_conv(s, name + ".ctl.1", leaky_relu(apply_conv(s, name + ".ctl.0", x)));
}

template <typename T>
Tensor<T> dkg(const ParamStore<T>& s, const std::string& name, const RatConfig& cfg, const Tensor<T>& fused) {
  const std::size_t C = cfg.channels, k = cfg.kernel;
  if (fused.rank() != 3 || fused.dim(0) != C + cfg.proto_dim) {
    throw DimensionError(name + ": dkg expects " + std::to_string(C + cfg.proto_dim) + " channels, got " +
                         shape_string(fused.shape()));
  }
  auto h = leaky_relu(apply_conv(s, name + ".dkg.fuse", fused));
  auto taps = group_to_last(apply_conv(s, name + ".dkg.gconv", h, 1, C), k * k);
  if (cfg.normalize_kernels) taps = softmax_last(taps, k * k);
  return reshape(taps, {C, fused.dim(1), fused.dim(2), k, k});
}

template <typename T>
Tensor<T> cag(const ParamStore<T>& s, const std::string& name, const Tensor<T>& fused) {
  auto h = leaky_relu(apply_linear(s, name + ".cag.fc0", global_avg_pool(fused)));
  return sigmoid(apply_linear(s, name + ".cag.fc1", h));
}

template <typename T>
Tensor<T> rat_forward(const ParamStore<T>& s, const std::string& name, const RatConfig& cfg, const Tensor<T>& x,
                      const Tensor<T>& prototypes, const RegionMap& rm) {
  if (x.rank() != 3 || x.dim(0) != cfg.channels || x.dim(1) != rm.height || x.dim(2) != rm.width) {
    throw DimensionError(name + ": input " + shape_string(x.shape()) + " does not match config/region map");
  }
  if (prototypes.rank() != 2 || prototypes.dim(1) != cfg.proto_dim) {
    throw DimensionError(name + ": prototypes " + shape_string(prototypes.shape()) + ", expected dim " +
                         std::to_string(cfg.proto_dim));
  }
  auto fused = concat_channels(ctl(s, name, x), expand_prototypes(prototypes, rm));
  auto filtered = mul_channels(dpsconv(x, dkg(s, name, cfg, fused)), cag(s, name, fused));
  return add(apply_conv(s, name + ".merge", filtered), x);
}

#define SEGPIC_INSTANTIATE_RAT(T)                                                                                 \
  template Tensor<T> dpsconv(const Tensor<T>&, const Tensor<T>&);                                                 \
  template DpsGrads<T> dpsconv_backward(std::span<const T>, const Tensor<T>&, const Tensor<T>&);                  \
  template void add_sal(ParamStore<T>&, const std::string&, std::size_t, Rng&);                                   \
  template Tensor<T> sal(const ParamStore<T>&, const std::string&, const Tensor<T>&);                             \
  template void add_rat(ParamStore<T>&, const std::string&, const RatConfig&, Rng&);                              \
  template Tensor<T> ctl(const ParamStore<T>&, const std::string&, const Tensor<T>&);                             \
  template Tensor<T> dkg(const ParamStore<T>&, const std::string&, const RatConfig&, const Tensor<T>&);          \
  template Tensor<T> cag(const ParamStore<T>&, const std::string&, const Tensor<T>&);                             \
  template Tensor<T> rat_forward(const ParamStore<T>&, const std::string&, const RatConfig&, const Tensor<T>&,  \
                                 const Tensor<T>&, const RegionMap&);

SEGPIC_INSTANTIATE_RAT(float)
SEGPIC_INSTANTIATE_RAT(double)

}  // namespace segpic
