#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "segpic/tensor.hpp"

namespace segpic {

// 8-bit RGB, interleaved row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::uint16_t maxval = 255;
  std::vector<std::uint16_t> pixels;
};

// Binary netpbm: P6 with maxval 255, P5 with maxval up to 65535.
RgbImage parse_ppm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> format_ppm(const RgbImage& image);
GrayImage parse_pgm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> format_pgm(const GrayImage& image);

RgbImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const RgbImage& image);

// [3,H,W] in [0,1].
Tensor<float> image_to_tensor(const RgbImage& image);
// Clamps to [0,1] and rounds to the nearest 8-bit level.
RgbImage tensor_to_image(const Tensor<float>& x);

// Mirror padding without edge repetition (index H maps to H-2), applied
// periodically so the pad may exceed the source size.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);
Tensor<float> reflect_pad(const Tensor<float>& x, std::size_t height, std::size_t width);
Tensor<float> crop(const Tensor<float>& x, std::size_t height, std::size_t width);

// Smallest multiple of `unit` that is >= n.
inline std::size_t round_up(std::size_t n, std::size_t unit) { return (n + unit - 1) / unit * unit; }

}  // namespace segpic
