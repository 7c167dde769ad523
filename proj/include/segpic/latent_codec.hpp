#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "segpic/net.hpp"

// Entropy coding of a round-mode LatentBundle into four substreams, and the
// decoder that rebuilds every table from previously decoded data.
namespace segpic {

enum Substream : std::size_t { kStreamFine = 0, kStreamCoarse = 1, kStreamZ = 2, kStreamY = 3, kStreamCount = 4 };

struct Substreams {
  std::array<std::vector<std::uint8_t>, kStreamCount> bytes;

  std::size_t total_bytes() const;
};

// Latent dimensions the decoder needs, derived from the padded image size
// and the region levels.
struct LatentGeometry {
  std::size_t height = 0;  // padded image height
  std::size_t width = 0;
  std::size_t fine_regions = 0;
  std::size_t coarse_regions = 0;
};
LatentGeometry latent_geometry(const RegionLevels& levels);

template <typename T>
struct DecodedLatents {
  Tensor<T> fine_quantized;
  Tensor<T> fine_recon;
  Tensor<T> coarse_quantized;
  Tensor<T> coarse_recon;
  Tensor<T> z_hat;
  Tensor<T> mu;
  Tensor<T> sigma;
  Tensor<T> y_hat;
};

// Codes p', p, z, y in that order. bundle must come from round mode. With
// verify, the streams are decoded again and any symbol that differs raises
// ConsistencyError.
template <typename T>
Substreams code_latents(const Codec<T>& net, const LatentBundle<T>& bundle, const RegionLevels& levels,
                        bool verify = false);

template <typename T>
DecodedLatents<T> decode_latents(const Codec<T>& net, const Substreams& streams, const RegionLevels& levels);

}  // namespace segpic
