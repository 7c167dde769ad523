#include "segpic/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "segpic/math.hpp"

namespace segpic {

namespace {

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

// Mass of the unit bin at distance |d| from the centre of a symmetric
// density with CDF F, scale s. Also returns the partial derivatives with
// respect to |d| and to s (for the logistic model, to log s).
struct BinMass {
  double mass;
  double d_abs;
  double d_scale;
};

BinMass gaussian_bin(double abs_d, double s) {
  const double a = (0.5 - abs_d) / s, b = (-0.5 - abs_d) / s;
  // 1 - Phi(-a) - Phi(b) keeps precision when the bin holds almost all mass.
  const double mass = a > 0 ? 1.0 - normal_cdf(-a) - normal_cdf(b) : normal_cdf(a) - normal_cdf(b);
  const double pa = normal_pdf(a), pb = normal_pdf(b);
  return {mass, (pb - pa) / s, (b * pb - a * pa) / s};
}

BinMass logistic_bin(double abs_d, double s) {
  const double a = (0.5 - abs_d) / s, b = (-0.5 - abs_d) / s;
  const double mass = a > 0 ? 1.0 - logistic(-a) - logistic(b) : logistic(a) - logistic(b);
  const double fa = logistic(a) * logistic(-a), fb = logistic(b) * logistic(-b);
  return {mass, (fb - fa) / s, b * fb - a * fa};
}

// Per-element bits with the floor applied through the branch tape.
struct BitsPass {
  double total = 0;
  std::vector<double> d_d;      // d bits / d (v - centre)
  std::vector<double> d_scale;  // d bits / d scale parameter
};

template <typename Mass>
BitsPass bits_pass(std::size_t n, Mass mass_at) {
  BitsPass out;
  out.d_d.resize(n);
  out.d_scale.resize(n);
  std::vector<BinMass> m(n);
  std::vector<double> d(n);
  std::vector<unsigned char> floored(n);
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = mass_at(i, d[i]);
    floored[i] = m[i].mass < kLikelihoodFloor ? 1 : 0;
  }
  detail::resolve_branches(floored);
  const double inv_ln2 = 1.0 / std::numbers::ln2;
  for (std::size_t i = 0; i < n; ++i) {
    if (floored[i]) {
      out.total += -std::log2(kLikelihoodFloor);
      out.d_d[i] = out.d_scale[i] = 0.0;
      continue;
    }
    const double mass = std::max(m[i].mass, 1e-300);
    out.total += -std::log2(mass);
    const double g = -inv_ln2 / mass;
    out.d_d[i] = g * m[i].d_abs * (d[i] < 0 ? -1.0 : 1.0);
    out.d_scale[i] = g * m[i].d_scale;
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> quantize(const Tensor<T>& y, const Tensor<T>& mu, QuantMode mode, Rng& rng) {
  if (mode == QuantMode::noise) {
    std::vector<T> out(y.values().begin(), y.values().end());
    for (auto& v : out) v += static_cast<T>(rng.uniform(-0.5, 0.5));
    return detail::make_result<T>(y.shape(), std::move(out), {&y},
                                  [](detail::Node<T>& n) { detail::accumulate<T>(*n.parents[0], n.grad); });
  }
  return from_symbols(to_symbols(y, mu), mu);
}

template <typename T>
std::vector<std::int32_t> to_symbols(const Tensor<T>& y, const Tensor<T>& mu) {
  require_same(y.shape(), mu.shape(), "to_symbols");
  std::vector<std::int32_t> out(y.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double r = round_half_away(static_cast<double>(y[i] - mu[i]));
    if (!std::isfinite(r) || std::abs(r) > 1e9) throw NumericError("to_symbols: latent out of range");
    out[i] = static_cast<std::int32_t>(r);
  }
  return out;
}

template <typename T>
Tensor<T> from_symbols(const std::vector<std::int32_t>& symbols, const Tensor<T>& mu) {
  if (symbols.size() != mu.numel()) throw DimensionError("from_symbols: count mismatch");
  std::vector<T> out(symbols.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(symbols[i]) + mu[i];
  return Tensor<T>(mu.shape(), std::move(out));
}

template <typename T>
Tensor<T> gaussian_bits(const Tensor<T>& y_hat, const Tensor<T>& mu, const Tensor<T>& sigma) {
  require_same(y_hat.shape(), mu.shape(), "gaussian_bits");
  require_same(y_hat.shape(), sigma.shape(), "gaussian_bits");
  for (T s : sigma.values()) {
    if (!(s >= T(kSigmaMin * 0.999) && s <= T(kSigmaMax * 1.001))) {
      throw NumericError("gaussian_bits: sigma " + std::to_string(double(s)) + " outside bounds");
    }
  }
  auto pass = bits_pass(y_hat.numel(), [&](std::size_t i, double& d) {
    d = static_cast<double>(y_hat[i]) - static_cast<double>(mu[i]);
    return gaussian_bin(std::abs(d), static_cast<double>(sigma[i]));
  });
  const T total = static_cast<T>(pass.total);
  return detail::make_result<T>({}, {total}, {&y_hat, &mu, &sigma}, [pass = std::move(pass)](detail::Node<T>& n) {
    const double g = n.grad[0];
    auto& yn = *n.parents[0];
    auto& mn = *n.parents[1];
    auto& sn = *n.parents[2];
    const std::size_t count = pass.d_d.size();
    if (yn.requires_grad) {
      auto& b = yn.grad_buffer();
      for (std::size_t i = 0; i < count; ++i) b[i] += static_cast<T>(g * pass.d_d[i]);
    }
    if (mn.requires_grad) {
      auto& b = mn.grad_buffer();
      for (std::size_t i = 0; i < count; ++i) b[i] -= static_cast<T>(g * pass.d_d[i]);
    }
    if (sn.requires_grad) {
      auto& b = sn.grad_buffer();
      for (std::size_t i = 0; i < count; ++i) b[i] += static_cast<T>(g * pass.d_scale[i]);
    }
  });
}

ChannelLayout layout_chw(const Shape& shape) {
  if (shape.size() != 3) throw DimensionError("layout_chw: expected [C,H,W]");
  return {1, shape[0], shape[1] * shape[2]};
}

ChannelLayout layout_rows(const Shape& shape) {
  if (shape.size() != 2) throw DimensionError("layout_rows: expected [n,C]");
  return {shape[0], shape[1], 1};
}

template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& loc, const ChannelLayout& layout, const Shape& shape) {
  if (loc.rank() != 1 || loc.dim(0) != layout.channels || shape_numel(shape) != layout.size()) {
    throw DimensionError("broadcast_channels: layout does not match " + shape_string(shape));
  }
  std::vector<T> out(layout.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = loc[layout.channel_of(i)];
  return detail::make_result<T>(shape, std::move(out), {&loc}, [layout](detail::Node<T>& n) {
    auto& b = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) b[layout.channel_of(i)] += n.grad[i];
  });
}

template <typename T>
Tensor<T> factorized_bits(const Tensor<T>& v_hat, const Tensor<T>& loc, const Tensor<T>& log_scale,
                          const ChannelLayout& layout) {
  if (v_hat.numel() != layout.size() || loc.rank() != 1 || loc.dim(0) != layout.channels ||
      log_scale.shape() != loc.shape()) {
    throw DimensionError("factorized_bits: parameters do not match " + shape_string(v_hat.shape()));
  }
  std::vector<double> scale(layout.channels);
  for (std::size_t c = 0; c < layout.channels; ++c) {
    scale[c] = std::exp(static_cast<double>(log_scale[c]));
    if (!(scale[c] >= kSigmaMin && scale[c] <= kSigmaMax)) throw NumericError("factorized_bits: scale out of bounds");
  }
  auto pass = bits_pass(v_hat.numel(), [&](std::size_t i, double& d) {
    const std::size_t c = layout.channel_of(i);
    d = static_cast<double>(v_hat[i]) - static_cast<double>(loc[c]);
    return logistic_bin(std::abs(d), scale[c]);
  });
  const T total = static_cast<T>(pass.total);
  return detail::make_result<T>(
      {}, {total}, {&v_hat, &loc, &log_scale}, [pass = std::move(pass), layout](detail::Node<T>& n) {
        const double g = n.grad[0];
        auto& vn = *n.parents[0];
        auto& ln = *n.parents[1];
        auto& sn = *n.parents[2];
        const std::size_t count = pass.d_d.size();
        if (vn.requires_grad) {
          auto& b = vn.grad_buffer();
          for (std::size_t i = 0; i < count; ++i) b[i] += static_cast<T>(g * pass.d_d[i]);
        }
        if (ln.requires_grad || sn.requires_grad) {
          std::vector<double> gl(layout.channels, 0.0), gs(layout.channels, 0.0);
          for (std::size_t i = 0; i < count; ++i) {
            gl[layout.channel_of(i)] -= pass.d_d[i];
            gs[layout.channel_of(i)] += pass.d_scale[i];
          }
          if (ln.requires_grad) {
            auto& b = ln.grad_buffer();
            for (std::size_t c = 0; c < layout.channels; ++c) b[c] += static_cast<T>(g * gl[c]);
          }
          if (sn.requires_grad) {
            auto& b = sn.grad_buffer();
            for (std::size_t c = 0; c < layout.channels; ++c) b[c] += static_cast<T>(g * gs[c]);
          }
        }
      });
}

std::ptrdiff_t CdfTable::index_of(std::int32_t value) const {
  const std::int64_t i = static_cast<std::int64_t>(value) - offset;
  const std::int64_t in_range = static_cast<std::int64_t>(symbol_count()) - (has_escape ? 1 : 0);
  if (i >= 0 && i < in_range) return static_cast<std::ptrdiff_t>(i);
  return has_escape ? static_cast<std::ptrdiff_t>(escape_index()) : -1;
}

CdfTable build_cdf(std::span<const double> pmf, std::int32_t offset, double escape_mass) {
  const bool escape = escape_mass >= 0.0;
  const std::size_t n = pmf.size() + (escape ? 1 : 0);
  if (n == 0 || n > kCdfTotal) throw ConfigError("build_cdf: symbol count out of range");
  std::vector<std::int64_t> freq(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = i < pmf.size() ? pmf[i] : escape_mass;
    if (!(p >= 0.0) || !std::isfinite(p)) throw NumericError("build_cdf: invalid probability");
    freq[i] = std::max<std::int64_t>(1, std::llround(p * kCdfTotal));
  }
  std::int64_t total = 0;
  for (auto f : freq) total += f;
  while (total != static_cast<std::int64_t>(kCdfTotal)) {
    auto it = std::max_element(freq.begin(), freq.end());
    if (total < static_cast<std::int64_t>(kCdfTotal)) {
      *it += kCdfTotal - total;
      total = kCdfTotal;
    } else {
      const std::int64_t taken = std::min(total - static_cast<std::int64_t>(kCdfTotal), *it - 1);
      *it -= taken;
      total -= taken;
    }
  }
  CdfTable t;
  t.offset = offset;
  t.has_escape = escape;
  t.cdf.resize(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) t.cdf[i + 1] = t.cdf[i] + static_cast<std::uint32_t>(freq[i]);
  return t;
}

std::int32_t table_range(double scale) {
  const double r = std::ceil(8.0 * scale);
  return static_cast<std::int32_t>(std::clamp(r, 16.0, static_cast<double>(kMaxTableRange)));
}

namespace {

template <typename Bin>
CdfTable symmetric_table(double scale, Bin bin, double tail_one_side) {
  const std::int32_t R = table_range(scale);
  std::vector<double> pmf(2 * static_cast<std::size_t>(R) + 1);
  for (std::int32_t s = -R; s <= R; ++s) pmf[static_cast<std::size_t>(s + R)] = bin(std::abs(double(s)), scale).mass;
  return build_cdf(pmf, -R, 2.0 * tail_one_side);
}

}  // namespace

CdfTable gaussian_table(double sigma) {
  const double R = table_range(sigma);
  return symmetric_table(sigma, gaussian_bin, normal_cdf((-R - 0.5) / sigma));
}

CdfTable logistic_table(double scale) {
  const double R = table_range(scale);
  return symmetric_table(scale, logistic_bin, logistic((-R - 0.5) / scale));
}

#define SEGPIC_INSTANTIATE_ENTROPY(T)                                                                          \
  template Tensor<T> quantize(const Tensor<T>&, const Tensor<T>&, QuantMode, Rng&);                            \
  template std::vector<std::int32_t> to_symbols(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> from_symbols(const std::vector<std::int32_t>&, const Tensor<T>&);                         \
  template Tensor<T> gaussian_bits(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> broadcast_channels(const Tensor<T>&, const ChannelLayout&, const Shape&);                  \
  template Tensor<T> factorized_bits(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ChannelLayout&);

SEGPIC_INSTANTIATE_ENTROPY(float)
SEGPIC_INSTANTIATE_ENTROPY(double)

}  // namespace segpic
