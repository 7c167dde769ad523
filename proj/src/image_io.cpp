#include "segpic/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "segpic/bytes.hpp"

namespace segpic {

namespace {

// Netpbm header: magic, then whitespace-separated decimal fields with '#'
// comments, then exactly one whitespace byte before the raster.
class HeaderReader {
 public:
  HeaderReader(const std::vector<std::uint8_t>& bytes, const char* what) : b_(bytes), what_(what) {}

  std::string magic() {
    if (b_.size() < 2) fail("missing magic");
    pos_ = 2;
    return std::string(b_.begin(), b_.begin() + 2);
  }

  std::size_t field() {
    skip_space();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) fail("expected a number in header");
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (v > 1u << 30) fail("header value out of range");
    }
    return v;
  }

  std::size_t raster_start() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) fail("missing whitespace after header");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(std::string(what_) + ": " + msg); }

 private:
  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& b_;
  const char* what_;
  std::size_t pos_ = 0;
};

std::string header(const char* magic, std::size_t w, std::size_t h, std::size_t maxval) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n" +
         std::to_string(maxval) + "\n";
}

}  // namespace

RgbImage parse_ppm(const std::vector<std::uint8_t>& bytes) {
  HeaderReader r(bytes, "ppm");
  if (r.magic() != "P6") r.fail("not a binary PPM (P6)");
  RgbImage img;
  img.width = r.field();
  img.height = r.field();
  const std::size_t maxval = r.field();
  if (img.width == 0 || img.height == 0) r.fail("zero image size");
  if (maxval != 255) r.fail("only maxval 255 is supported");
  const std::size_t start = r.raster_start();
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() < start + n) r.fail("truncated raster");
  img.pixels.assign(bytes.begin() + start, bytes.begin() + start + n);
  return img;
}

std::vector<std::uint8_t> format_ppm(const RgbImage& image) {
  if (image.pixels.size() != image.width * image.height * 3) throw DimensionError("ppm: pixel count mismatch");
  ByteWriter w;
  w.text(header("P6", image.width, image.height, 255));
  w.bytes(image.pixels);
  return w.take();
}

GrayImage parse_pgm(const std::vector<std::uint8_t>& bytes) {
  HeaderReader r(bytes, "pgm");
  if (r.magic() != "P5") r.fail("not a binary PGM (P5)");
  GrayImage img;
  img.width = r.field();
  img.height = r.field();
  const std::size_t maxval = r.field();
  if (img.width == 0 || img.height == 0) r.fail("zero image size");
  if (maxval == 0 || maxval > 65535) r.fail("maxval out of range");
  img.maxval = static_cast<std::uint16_t>(maxval);
  const std::size_t start = r.raster_start();
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  const std::size_t n = img.width * img.height;
  if (bytes.size() < start + n * bpp) r.fail("truncated raster");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    img.pixels[i] = bpp == 1 ? bytes[start + i]
                             : static_cast<std::uint16_t>(bytes[start + 2 * i] << 8 | bytes[start + 2 * i + 1]);
    if (img.pixels[i] > maxval) r.fail("sample exceeds maxval");
  }
  return img;
}

std::vector<std::uint8_t> format_pgm(const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw DimensionError("pgm: pixel count mismatch");
  ByteWriter w;
  w.text(header("P5", image.width, image.height, image.maxval));
  for (auto v : image.pixels) {
    if (image.maxval > 255) w.u8(static_cast<std::uint8_t>(v >> 8));
    w.u8(static_cast<std::uint8_t>(v & 0xFF));
  }
  return w.take();
}

RgbImage read_ppm(const std::string& path) { return parse_ppm(read_file(path)); }

void write_ppm(const std::string& path, const RgbImage& image) { write_file(path, format_ppm(image)); }

Tensor<float> image_to_tensor(const RgbImage& image) {
  const std::size_t H = image.height, W = image.width;
  std::vector<float> v(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < H * W; ++i) v[c * H * W + i] = image.pixels[i * 3 + c] / 255.0f;
  }
  return Tensor<float>({3, H, W}, std::move(v));
}

RgbImage tensor_to_image(const Tensor<float>& x) {
  if (x.rank() != 3 || x.dim(0) != 3) throw DimensionError("tensor_to_image: expected [3,H,W]");
  RgbImage img;
  img.height = x.dim(1);
  img.width = x.dim(2);
  const std::size_t HW = img.height * img.width;
  img.pixels.resize(3 * HW);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < HW; ++i) {
      const float v = std::clamp(x[c * HW + i], 0.0f, 1.0f);
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return img;
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * n - 2);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - m);
}

Tensor<float> reflect_pad(const Tensor<float>& x, std::size_t height, std::size_t width) {
  if (x.rank() != 3 || height < x.dim(1) || width < x.dim(2)) {
    throw DimensionError("reflect_pad: cannot pad " + shape_string(x.shape()) + " to " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<float> v(C * height * width);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y), H);
      for (std::size_t xx = 0; xx < width; ++xx) {
        v[(c * height + y) * width + xx] = x[(c * H + sy) * W + reflect_index(static_cast<std::ptrdiff_t>(xx), W)];
      }
    }
  }
  return Tensor<float>({C, height, width}, std::move(v));
}

Tensor<float> crop(const Tensor<float>& x, std::size_t height, std::size_t width) {
  if (x.rank() != 3 || height > x.dim(1) || width > x.dim(2)) throw DimensionError("crop: target exceeds source");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<float> v(C * height * width);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      std::copy_n(x.values().begin() + (c * H + y) * W, width, v.begin() + (c * height + y) * width);
    }
  }
  return Tensor<float>({C, height, width}, std::move(v));
}

}  // namespace segpic
