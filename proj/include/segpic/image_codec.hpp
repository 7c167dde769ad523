#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "segpic/container.hpp"
#include "segpic/image_io.hpp"
#include "segpic/net.hpp"

// Whole-image encode/decode: reflect padding to multiples of 64, region
// levels, latent coding and the container.
namespace segpic {

// Either an n x n grid over the padded image (grid_n > 0) or an external
// map at the true image size.
struct RegionSource {
  std::size_t grid_n = 0;
  const RegionMap* map = nullptr;
};

// Region map at the padded size (grid or mirrored external map).
RegionMap padded_regions(const RegionSource& src, std::size_t height, std::size_t width);

struct EncodedImage {
  std::vector<std::uint8_t> container;
  Substreams streams;
  // Model estimate in bits per substream (same order as the streams).
  std::array<double, kStreamCount> estimated_bits{};
  // What the decoder will reproduce.
  RgbImage reconstruction;
};

EncodedImage encode_image(const Codec<float>& net, std::uint64_t model_hash, const RgbImage& image,
                          const RegionSource& src, bool verify = true);

// external is required when the container was written in map mode.
RgbImage decode_image(const Codec<float>& net, std::uint64_t model_hash, std::span<const std::uint8_t> container,
                      const RegionMap* external = nullptr);

}  // namespace segpic
