#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "segpic/latent_codec.hpp"

// Bitstream container, little-endian throughout:
//   "SPIC" | version u8 | width u32 | height u32 | region mode u8 |
//   region count u8 | model hash u64 | 4 x (length u32, bytes) | crc32 u32
// Substreams appear in coding order p', p, z, y. The CRC covers every
// preceding byte. Region mode 0 means the decoder must be given the same
// external map; any other value n means an n x n grid on the padded image.
namespace segpic {

inline constexpr std::uint8_t kContainerVersion = 1;
inline constexpr std::size_t kContainerOverhead = 4 + 1 + 4 + 4 + 1 + 1 + 8 + 4 * kStreamCount + 4;

struct Container {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint8_t region_mode = 0;
  std::uint8_t region_count = 0;
  std::uint64_t model_hash = 0;
  Substreams streams;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> write_container(const Container& c);
// ParseError on bad magic, version, truncation or trailing bytes;
// ConsistencyError on a CRC mismatch.
Container read_container(std::span<const std::uint8_t> bytes);

}  // namespace segpic
