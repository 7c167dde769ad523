#include "segpic/image_codec.hpp"

#include "segpic/ops.hpp"

namespace segpic {

namespace {

RgbImage reconstruct(const Codec<float>& net, const Tensor<float>& y_hat, const Tensor<float>& fine_recon,
                     const RegionLevels& levels, std::size_t height, std::size_t width) {
  const auto x_hat = clamp(net.decode_features(y_hat, fine_recon, levels), 0.0f, 1.0f);
  return tensor_to_image(crop(x_hat, height, width));
}

}  // namespace

RegionMap padded_regions(const RegionSource& src, std::size_t height, std::size_t width) {
  const std::size_t hp = round_up(height, kPadMultiple), wp = round_up(width, kPadMultiple);
  if (src.grid_n > 0) {
    if (src.map) throw UsageError("give either a grid or a region map, not both");
    if (src.grid_n * src.grid_n > kMaxRegions) throw UsageError("grid has more than 64 regions");
    return grid_partition(hp, wp, src.grid_n);
  }
  if (!src.map) throw UsageError("a region map or a grid size is required");
  if (src.map->height != height || src.map->width != width) {
    throw DimensionError("region map size does not match the image");
  }
  return reflect_pad(*src.map, hp, wp);
}

EncodedImage encode_image(const Codec<float>& net, std::uint64_t model_hash, const RgbImage& image,
                          const RegionSource& src, bool verify) {
  NoGradGuard ng;
  const std::size_t H = image.height, W = image.width;
  if (H == 0 || W == 0) throw DimensionError("empty image");
  const std::size_t hp = round_up(H, kPadMultiple), wp = round_up(W, kPadMultiple);
  const auto x = reflect_pad(image_to_tensor(image), hp, wp);
  const auto levels = region_levels(padded_regions(src, H, W));

  Rng unused(0);  // round mode draws nothing
  const auto bundle = net.encode_features(x, levels, QuantMode::round, unused);

  EncodedImage out;
  out.streams = code_latents(net, bundle, levels, verify);
  out.estimated_bits = {static_cast<double>(bundle.bits_fine.item()), static_cast<double>(bundle.bits_coarse.item()),
                        static_cast<double>(bundle.bits_z.item()), static_cast<double>(bundle.bits_y.item())};

  Container c;
  c.width = static_cast<std::uint32_t>(W);
  c.height = static_cast<std::uint32_t>(H);
  c.region_mode = static_cast<std::uint8_t>(src.grid_n);
  c.region_count = static_cast<std::uint8_t>(levels.full.count);
  c.model_hash = model_hash;
  c.streams = out.streams;
  out.container = write_container(c);
  out.reconstruction = reconstruct(net, bundle.y_hat, bundle.fine.recon, levels, H, W);
  return out;
}

RgbImage decode_image(const Codec<float>& net, std::uint64_t model_hash, std::span<const std::uint8_t> bytes,
                      const RegionMap* external) {
  NoGradGuard ng;
  const Container c = read_container(bytes);
  if (c.model_hash != model_hash) throw ConsistencyError("container was written with a different model");
  RegionSource src;
  if (c.region_mode == 0) {
    if (!external) throw UsageError("container uses an external region map; pass --regions");
    src.map = external;
  } else {
    src.grid_n = c.region_mode;
  }
  const auto levels = region_levels(padded_regions(src, c.height, c.width));
  if (levels.full.count != c.region_count) throw ConsistencyError("region map does not match the container");
  const auto latents = decode_latents(net, c.streams, levels);
  return reconstruct(net, latents.y_hat, latents.fine_recon, levels, c.height, c.width);
}

}  // namespace segpic
