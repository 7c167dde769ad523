#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "segpic/tensor.hpp"

namespace segpic {

// The container stores the region count in one byte and the codec caps it.
inline constexpr std::size_t kMaxRegions = 64;

/// Label raster: each pixel belongs to exactly one of `count` regions,
/// labels are 0..count-1 and every label is used.
struct RegionMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t count = 0;
  std::vector<std::uint32_t> labels;

  std::uint32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  // Pixels per label.
  std::vector<std::size_t> histogram() const;
};

// Relabels arbitrary ids to 0..n-1 in order of first appearance.
RegionMap make_region_map(std::size_t height, std::size_t width, const std::vector<std::uint32_t>& raw);

RegionMap parse_region_map(const std::vector<std::uint8_t>& pgm_bytes);
RegionMap load_region_map(const std::string& path);
void save_region_map(const std::string& path, const RegionMap& rm);

// n_side x n_side tiles; cell (r, c) spans rows [r*H/n, (r+1)*H/n) and has
// label r*n_side + c.
RegionMap grid_partition(std::size_t height, std::size_t width, std::size_t n_side);

struct DownsampledRegions {
  RegionMap map;
  // survivors[new_label] = label in the source map.
  std::vector<std::uint32_t> survivors;
};

// Majority vote over factor x factor blocks (edge blocks are clipped), ties
// to the smallest label. Labels that vanish are dropped and the rest are
// renumbered in their original order.
DownsampledRegions downsample_region_map(const RegionMap& rm, std::size_t factor);

// Mirror-pads the raster the same way images are padded.
RegionMap reflect_pad(const RegionMap& rm, std::size_t height, std::size_t width);

template <typename T>
struct PrototypeSet {
  // [count, dim]
  Tensor<T> vectors;
  std::size_t source_height = 0;
  std::size_t source_width = 0;

  std::size_t count() const { return vectors.dim(0); }
  std::size_t dim() const { return vectors.dim(1); }
};

// Per-region channel means of features [C,H,W]; differentiable.
template <typename T>
PrototypeSet<T> masked_average_pool(const Tensor<T>& features, const RegionMap& rm);

// out[c,h,w] = vectors[label(h,w), c]; differentiable in the vectors.
template <typename T>
Tensor<T> expand_prototypes(const Tensor<T>& vectors, const RegionMap& rm);

template <typename T>
Tensor<T> expand_prototypes(const PrototypeSet<T>& ps, const RegionMap& rm) {
  return expand_prototypes(ps.vectors, rm);
}

}  // namespace segpic
