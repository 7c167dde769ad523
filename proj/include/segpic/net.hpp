#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "segpic/entropy.hpp"
#include "segpic/param_store.hpp"
#include "segpic/rat.hpp"
#include "segpic/region.hpp"

namespace segpic {

// Region maps meet features at these strides: the fine prototypes and the
// analysis/synthesis RAT stages live at 1/4, the coarse prototypes and the
// hyper RAT stages at 1/16. Inputs are padded to multiples of 64.
inline constexpr std::size_t kFineFactor = 4;
inline constexpr std::size_t kCoarseFactor = 16;
inline constexpr std::size_t kPadMultiple = 64;

struct NetConfig {
  std::size_t N = 192;
  std::size_t M = 320;
  // Prototype codec widths, input first, code last.
  std::vector<std::size_t> fine_schedule{192, 128, 96, 96};
  std::vector<std::size_t> coarse_schedule{320, 192, 128, 96};
  std::size_t kernel = 3;
  std::size_t grid_n = 4;
  bool normalize_kernels = true;

  // Hyper path widths M, ..., N in four equal steps (320, 288, 256, 224, 192
  // for the default widths).
  std::size_t hyper_width(std::size_t i) const { return M - i * (M - N) / 4; }
  void validate() const;

  std::string to_text() const;
  static NetConfig from_text(const std::string& text);
};

NetConfig load_net_config(const std::string& path);
void save_net_config(const std::string& path, const NetConfig& cfg);

// The full-resolution map with its two downsampled levels.
struct RegionLevels {
  RegionMap full;
  DownsampledRegions fine;
  DownsampledRegions coarse;
};
RegionLevels region_levels(const RegionMap& rm);

enum class ProtoLevel { fine, coarse };

template <typename T>
struct PrototypeBranch {
  Tensor<T> raw;        // [n, dim] pooled features
  Tensor<T> code;       // [n, code_dim] before quantization
  Tensor<T> quantized;  // [n, code_dim]
  Tensor<T> recon;      // [n, dim] what every downstream stage sees
};

template <typename T>
struct LatentBundle {
  Tensor<T> y_fine;  // [N, H/4, W/4]
  PrototypeBranch<T> fine;
  Tensor<T> y;  // [M, H/16, W/16]
  PrototypeBranch<T> coarse;
  Tensor<T> z;  // [N, H/64, W/64]
  Tensor<T> z_hat;
  Tensor<T> mu;
  Tensor<T> sigma;
  Tensor<T> y_hat;
  // Scalar estimates of the four substreams, in bits.
  Tensor<T> bits_y, bits_z, bits_fine, bits_coarse;
};

template <typename T>
struct GaussianParams {
  Tensor<T> mu;
  Tensor<T> sigma;
};

template <typename T>
struct FactorizedParams {
  Tensor<T> loc;
  Tensor<T> log_scale;  // clamped to the coder's scale bounds
};

/// The codec network: analysis and synthesis transforms with SAL blocks and
/// RAT stages, the prototype sub-codecs, the hyper path, and the factorized
/// entropy parameters. Parameters are created deterministically from seed.
template <typename T>
class Codec {
 public:
  Codec(NetConfig cfg, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // x [3,H,W] with H, W multiples of 64; levels built from a map at (H,W).
  LatentBundle<T> encode_features(const Tensor<T>& x, const RegionLevels& levels, QuantMode mode, Rng& rng) const;
  // Unclamped reconstruction from the quantized latent and fine prototypes.
  Tensor<T> decode_features(const Tensor<T>& y_hat, const Tensor<T>& fine_recon, const RegionLevels& levels) const;

  Tensor<T> analysis_fine(const Tensor<T>& x) const;
  Tensor<T> analysis_coarse(const Tensor<T>& y_fine, const Tensor<T>& fine_recon, const RegionMap& fine_map) const;
  Tensor<T> hyper_encode(const Tensor<T>& y) const;
  // Outputs of each of the five convolutions of the hyper encoder and of the
  // scales / means decoder stacks (before their RAT stages).
  std::vector<Tensor<T>> hyper_encoder_layers(const Tensor<T>& y) const;
  std::vector<Tensor<T>> hyper_decoder_layers(bool means, const Tensor<T>& z_hat) const;
  GaussianParams<T> hyper_decode(const Tensor<T>& z_hat, const Tensor<T>& coarse_recon,
                                 const RegionMap& coarse_map) const;

  // Linear chain with LeakyReLU between layers, then the learned gain.
  Tensor<T> prototype_encode(ProtoLevel level, const Tensor<T>& raw) const;
  // Undoes the gain, then the mirrored chain back to the feature width.
  Tensor<T> prototype_decode(ProtoLevel level, const Tensor<T>& quantized) const;
  // Factorized entropy models of the prototype codes and of z.
  FactorizedParams<T> prototype_entropy(ProtoLevel level) const;
  FactorizedParams<T> z_entropy() const;

  RatConfig rat_config(ProtoLevel level) const;

 private:
  Tensor<T> down(std::size_t i, const Tensor<T>& x) const;
  Tensor<T> up(std::size_t i, const Tensor<T>& x) const;
  PrototypeBranch<T> prototype_branch(ProtoLevel level, const Tensor<T>& features, const RegionMap& map,
                                      QuantMode mode, Rng& rng) const;
  FactorizedParams<T> factorized(const std::string& name) const;

  NetConfig cfg_;
  ParamStore<T> params_;
};

// Weights live in an .spw file with the architecture next to it under the
// same stem and a .cfg extension.
std::string model_config_path(const std::string& weights_path);
void save_model(const std::string& weights_path, const Codec<float>& net);

struct LoadedModel {
  Codec<float> net;
  std::uint64_t hash;  // FNV-1a of the weight file bytes
};
LoadedModel load_model(const std::string& weights_path);

}  // namespace segpic
