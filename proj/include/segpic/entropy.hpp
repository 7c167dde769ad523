#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "segpic/rng.hpp"
#include "segpic/tensor.hpp"

// Quantization and discretized likelihood models. Symbols are integers
// relative to a per-element mean (Gaussian) or per-channel location
// (factorized), and every likelihood integrates the density over the unit
// bin around the quantized value.
namespace segpic {

enum class QuantMode { noise, round };

// Half away from zero; shared by the encoder and every dequantizer.
inline double round_half_away(double v) { return std::round(v); }

// noise: y + U(-0.5, 0.5) drawn from rng (mu unused).
// round: round(y - mu) + mu, detached from the graph.
template <typename T>
Tensor<T> quantize(const Tensor<T>& y, const Tensor<T>& mu, QuantMode mode, Rng& rng);

// round(y - mu) as integers.
template <typename T>
std::vector<std::int32_t> to_symbols(const Tensor<T>& y, const Tensor<T>& mu);
// symbols + mu; equals quantize(y, mu, round) bit for bit.
template <typename T>
Tensor<T> from_symbols(const std::vector<std::int32_t>& symbols, const Tensor<T>& mu);

inline constexpr double kLikelihoodFloor = 1.0 / 65536.0;
inline constexpr double kSigmaMin = 1e-4;
inline constexpr double kSigmaMax = 1e4;

// Sum over elements of -log2 P(y_hat), P the Gaussian mass of the bin
// [y_hat - 0.5, y_hat + 0.5], floored at kLikelihoodFloor. Differentiable in
// all three inputs; sigma outside [kSigmaMin, kSigmaMax] is a NumericError.
template <typename T>
Tensor<T> gaussian_bits(const Tensor<T>& y_hat, const Tensor<T>& mu, const Tensor<T>& sigma);

// Element i of a flat tensor belongs to channel (i / inner) % channels.
struct ChannelLayout {
  std::size_t outer = 1;
  std::size_t channels = 0;
  std::size_t inner = 1;

  std::size_t channel_of(std::size_t i) const { return (i / inner) % channels; }
  std::size_t size() const { return outer * channels * inner; }
};
// [C,H,W] -> channels C; [n,C] -> channels C.
ChannelLayout layout_chw(const Shape& shape);
ChannelLayout layout_rows(const Shape& shape);

// Per-channel values loc[C] spread to the full layout; differentiable.
template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& loc, const ChannelLayout& layout, const Shape& shape);

// Factorized logistic model: channel c has location loc[c] and scale
// exp(log_scale[c]). Same bin integration and floor as gaussian_bits.
template <typename T>
Tensor<T> factorized_bits(const Tensor<T>& v_hat, const Tensor<T>& loc, const Tensor<T>& log_scale,
                          const ChannelLayout& layout);

// Quantized CDF with 16-bit total. Index i < cdf.size() - 1 covers symbol
// offset + i; when has_escape the last index is the escape symbol, after
// which the coder writes the raw value.
inline constexpr std::uint32_t kCdfBits = 16;
inline constexpr std::uint32_t kCdfTotal = 1u << kCdfBits;
inline constexpr std::int32_t kMaxTableRange = 4096;

struct CdfTable {
  std::int32_t offset = 0;
  bool has_escape = false;
  std::vector<std::uint32_t> cdf;  // cdf.front() == 0, cdf.back() == kCdfTotal

  std::size_t symbol_count() const { return cdf.size() - 1; }
  std::uint32_t freq(std::size_t index) const { return cdf[index + 1] - cdf[index]; }
  // Index for value, or the escape index; -1 if out of range without escape.
  std::ptrdiff_t index_of(std::int32_t value) const;
  std::size_t escape_index() const { return cdf.size() - 2; }
};

// Quantizes probabilities (plus an escape mass when escape_mass >= 0) so
// every entry gets at least 1 and the total is exactly kCdfTotal; rounding
// surplus or deficit is settled against the largest entry.
CdfTable build_cdf(std::span<const double> pmf, std::int32_t offset, double escape_mass = -1.0);

// Symbol half-width max(16, ceil(8 * scale)), capped at kMaxTableRange.
std::int32_t table_range(double scale);

// Tables for symbols relative to the mean / location.
CdfTable gaussian_table(double sigma);
CdfTable logistic_table(double scale);

}  // namespace segpic
