#include "segpic/region.hpp"

#include <algorithm>
#include <unordered_map>

#include "segpic/bytes.hpp"
#include "segpic/image_io.hpp"

namespace segpic {

std::vector<std::size_t> RegionMap::histogram() const {
  std::vector<std::size_t> h(count, 0);
  for (auto l : labels) ++h[l];
  return h;
}

RegionMap make_region_map(std::size_t height, std::size_t width, const std::vector<std::uint32_t>& raw) {
  if (raw.size() != height * width || raw.empty()) throw DimensionError("region map: raster size mismatch");
  RegionMap rm{height, width, 0, std::vector<std::uint32_t>(raw.size())};
  std::unordered_map<std::uint32_t, std::uint32_t> ids;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto [it, inserted] = ids.try_emplace(raw[i], static_cast<std::uint32_t>(ids.size()));
    rm.labels[i] = it->second;
  }
  rm.count = ids.size();
  return rm;
}

RegionMap parse_region_map(const std::vector<std::uint8_t>& pgm_bytes) {
  GrayImage g = parse_pgm(pgm_bytes);
  return make_region_map(g.height, g.width, std::vector<std::uint32_t>(g.pixels.begin(), g.pixels.end()));
}

RegionMap load_region_map(const std::string& path) { return parse_region_map(read_file(path)); }

void save_region_map(const std::string& path, const RegionMap& rm) {
  if (rm.count > 65536) throw ConfigError("region map: too many labels for PGM");
  GrayImage g{rm.width, rm.height, static_cast<std::uint16_t>(rm.count <= 256 ? 255 : 65535), {}};
  g.pixels.assign(rm.labels.begin(), rm.labels.end());
  write_file(path, format_pgm(g));
}

RegionMap grid_partition(std::size_t height, std::size_t width, std::size_t n_side) {
  if (n_side == 0 || height < n_side || width < n_side) {
    throw ConfigError("grid_partition: " + std::to_string(n_side) + "x" + std::to_string(n_side) +
                      " grid does not fit " + std::to_string(height) + "x" + std::to_string(width));
  }
  RegionMap rm{height, width, n_side * n_side, std::vector<std::uint32_t>(height * width)};
  std::vector<std::uint32_t> row_cell(height), col_cell(width);
  for (std::size_t r = 0; r < n_side; ++r) {
    for (std::size_t y = r * height / n_side; y < (r + 1) * height / n_side; ++y) row_cell[y] = static_cast<std::uint32_t>(r);
    for (std::size_t x = r * width / n_side; x < (r + 1) * width / n_side; ++x) col_cell[x] = static_cast<std::uint32_t>(r);
  }
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      rm.labels[y * width + x] = row_cell[y] * static_cast<std::uint32_t>(n_side) + col_cell[x];
    }
  }
  return rm;
}

DownsampledRegions downsample_region_map(const RegionMap& rm, std::size_t factor) {
  if (factor == 0) throw ConfigError("downsample_region_map: zero factor");
  const std::size_t Ho = (rm.height + factor - 1) / factor;
  const std::size_t Wo = (rm.width + factor - 1) / factor;
  std::vector<std::uint32_t> voted(Ho * Wo);
  std::vector<std::size_t> votes(rm.count, 0);
  for (std::size_t oy = 0; oy < Ho; ++oy) {
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      std::fill(votes.begin(), votes.end(), 0);
      for (std::size_t y = oy * factor; y < std::min(rm.height, (oy + 1) * factor); ++y) {
        for (std::size_t x = ox * factor; x < std::min(rm.width, (ox + 1) * factor); ++x) ++votes[rm.at(y, x)];
      }
      // max_element returns the first maximum, which is the smallest label.
      voted[oy * Wo + ox] = static_cast<std::uint32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
  }
  std::vector<bool> used(rm.count, false);
  for (auto l : voted) used[l] = true;
  DownsampledRegions out;
  std::vector<std::uint32_t> remap(rm.count, 0);
  for (std::uint32_t l = 0; l < rm.count; ++l) {
    if (!used[l]) continue;
    remap[l] = static_cast<std::uint32_t>(out.survivors.size());
    out.survivors.push_back(l);
  }
  for (auto& l : voted) l = remap[l];
  out.map = RegionMap{Ho, Wo, out.survivors.size(), std::move(voted)};
  return out;
}

RegionMap reflect_pad(const RegionMap& rm, std::size_t height, std::size_t width) {
  if (height < rm.height || width < rm.width) throw DimensionError("reflect_pad: target smaller than region map");
  RegionMap out{height, width, rm.count, std::vector<std::uint32_t>(height * width)};
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y), rm.height);
    for (std::size_t x = 0; x < width; ++x) {
      out.labels[y * width + x] = rm.at(sy, reflect_index(static_cast<std::ptrdiff_t>(x), rm.width));
    }
  }
  return out;
}

template <typename T>
PrototypeSet<T> masked_average_pool(const Tensor<T>& features, const RegionMap& rm) {
  if (!features.defined() || features.rank() != 3 || features.dim(1) != rm.height || features.dim(2) != rm.width) {
    throw DimensionError("masked_average_pool: features " + shape_string(features.shape()) + " vs map " +
                         std::to_string(rm.height) + "x" + std::to_string(rm.width));
  }
  const std::size_t C = features.dim(0), HW = rm.height * rm.width, n = rm.count;
  auto hist = rm.histogram();
  std::vector<T> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (hist[i] == 0) throw DimensionError("masked_average_pool: empty region " + std::to_string(i));
    inv[i] = T(1) / static_cast<T>(hist[i]);
  }
  auto fv = features.values();
  std::vector<T> out(n * C, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < HW; ++p) out[rm.labels[p] * C + c] += fv[c * HW + p];
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < C; ++c) out[i * C + c] *= inv[i];
  }
  // The closure may outlive the caller's map.
  auto lab = std::make_shared<std::vector<std::uint32_t>>(rm.labels);
  auto result = detail::make_result<T>({n, C}, std::move(out), {&features},
                                       [lab, inv, C, HW](detail::Node<T>& node) {
                                         auto& g = node.parents[0]->grad_buffer();
                                         for (std::size_t c = 0; c < C; ++c) {
                                           for (std::size_t p = 0; p < HW; ++p) {
                                             const auto l = (*lab)[p];
                                             g[c * HW + p] += node.grad[l * C + c] * inv[l];
                                           }
                                         }
                                       });
  return PrototypeSet<T>{result, rm.height, rm.width};
}

template <typename T>
Tensor<T> expand_prototypes(const Tensor<T>& vectors, const RegionMap& rm) {
  if (!vectors.defined() || vectors.rank() != 2 || vectors.dim(0) != rm.count) {
    throw DimensionError("expand_prototypes: " + std::to_string(vectors.defined() && vectors.rank() == 2 ? vectors.dim(0) : 0) +
                         " prototypes for " + std::to_string(rm.count) + " regions");
  }
  const std::size_t C = vectors.dim(1), HW = rm.height * rm.width;
  auto pv = vectors.values();
  std::vector<T> out(C * HW);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < HW; ++p) out[c * HW + p] = pv[rm.labels[p] * C + c];
  }
  auto lab = std::make_shared<std::vector<std::uint32_t>>(rm.labels);
  return detail::make_result<T>({C, rm.height, rm.width}, std::move(out), {&vectors},
                                [lab, C, HW](detail::Node<T>& node) {
                                  auto& g = node.parents[0]->grad_buffer();
                                  for (std::size_t c = 0; c < C; ++c) {
                                    for (std::size_t p = 0; p < HW; ++p) g[(*lab)[p] * C + c] += node.grad[c * HW + p];
                                  }
                                });
}

template PrototypeSet<float> masked_average_pool(const Tensor<float>&, const RegionMap&);
template PrototypeSet<double> masked_average_pool(const Tensor<double>&, const RegionMap&);
template Tensor<float> expand_prototypes(const Tensor<float>&, const RegionMap&);
template Tensor<double> expand_prototypes(const Tensor<double>&, const RegionMap&);

}  // namespace segpic
