#include "segpic/latent_codec.hpp"

#include <cmath>
#include <cstring>
#include <unordered_map>

#include "segpic/range_coder.hpp"

namespace segpic {

namespace {

// Gaussian tables keyed by the exact sigma value; sigma maps repeat a lot
// once the hyper decoder saturates.
class GaussianTableCache {
 public:
  const CdfTable& get(double sigma) {
    std::uint64_t key = 0;
    std::memcpy(&key, &sigma, sizeof key);
    auto it = tables_.find(key);
    if (it == tables_.end()) it = tables_.emplace(key, gaussian_table(sigma)).first;
    return it->second;
  }

 private:
  std::unordered_map<std::uint64_t, CdfTable> tables_;
};

template <typename T>
std::vector<CdfTable> channel_tables(const FactorizedParams<T>& fp) {
  std::vector<CdfTable> out;
  for (T ls : fp.log_scale.values()) out.push_back(logistic_table(std::exp(static_cast<double>(ls))));
  return out;
}

template <typename T>
std::vector<std::uint8_t> encode_factorized(const Tensor<T>& v, const FactorizedParams<T>& fp,
                                            const ChannelLayout& layout) {
  const auto loc = broadcast_channels(fp.loc, layout, v.shape());
  const auto symbols = to_symbols(v, loc);
  const auto tables = channel_tables(fp);
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode_symbol(tables[layout.channel_of(i)], symbols[i]);
  return enc.finish();
}

template <typename T>
Tensor<T> decode_factorized(const std::vector<std::uint8_t>& bytes, const Shape& shape, const FactorizedParams<T>& fp,
                            const ChannelLayout& layout) {
  const auto tables = channel_tables(fp);
  RangeDecoder dec(bytes);
  std::vector<std::int32_t> symbols(shape_numel(shape));
  for (std::size_t i = 0; i < symbols.size(); ++i) symbols[i] = dec.decode_symbol(tables[layout.channel_of(i)]);
  return from_symbols(symbols, broadcast_channels(fp.loc, layout, shape));
}

template <typename T>
void expect_identical(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape() || std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(T)) != 0) {
    throw ConsistencyError(std::string("latent codec self-test: decoded ") + what + " differs from the encoder");
  }
}

}  // namespace

std::size_t Substreams::total_bytes() const {
  std::size_t n = 0;
  for (const auto& b : bytes) n += b.size();
  return n;
}

LatentGeometry latent_geometry(const RegionLevels& levels) {
  return {levels.full.height, levels.full.width, levels.fine.map.count, levels.coarse.map.count};
}

template <typename T>
Substreams code_latents(const Codec<T>& net, const LatentBundle<T>& bundle, const RegionLevels& levels, bool verify) {
  NoGradGuard ng;
  Substreams out;
  const auto& fq = bundle.fine.quantized;
  const auto& cq = bundle.coarse.quantized;
  out.bytes[kStreamFine] = encode_factorized(fq, net.prototype_entropy(ProtoLevel::fine), layout_rows(fq.shape()));
  out.bytes[kStreamCoarse] =
      encode_factorized(cq, net.prototype_entropy(ProtoLevel::coarse), layout_rows(cq.shape()));
  out.bytes[kStreamZ] = encode_factorized(bundle.z_hat, net.z_entropy(), layout_chw(bundle.z_hat.shape()));

  const auto symbols = to_symbols(bundle.y_hat, bundle.mu);
  GaussianTableCache cache;
  RangeEncoder enc;
  const auto sigma = bundle.sigma.values();
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode_symbol(cache.get(sigma[i]), symbols[i]);
  out.bytes[kStreamY] = enc.finish();

  if (verify) {
    const auto back = decode_latents(net, out, levels);
    expect_identical(back.fine_quantized, fq, "fine prototypes");
    expect_identical(back.coarse_quantized, cq, "coarse prototypes");
    expect_identical(back.z_hat, bundle.z_hat, "hyper latent");
    expect_identical(back.sigma, bundle.sigma, "scales");
    expect_identical(back.y_hat, bundle.y_hat, "latent");
  }
  return out;
}

template <typename T>
DecodedLatents<T> decode_latents(const Codec<T>& net, const Substreams& streams, const RegionLevels& levels) {
  NoGradGuard ng;
  const NetConfig& cfg = net.config();
  const LatentGeometry g = latent_geometry(levels);
  if (g.height % kPadMultiple != 0 || g.width % kPadMultiple != 0) {
    throw DimensionError("latent codec: region map is not at a padded size");
  }
  DecodedLatents<T> out;

  const Shape fine_shape{g.fine_regions, cfg.fine_schedule.back()};
  out.fine_quantized = decode_factorized(streams.bytes[kStreamFine], fine_shape,
                                         net.prototype_entropy(ProtoLevel::fine), layout_rows(fine_shape));
  out.fine_recon = net.prototype_decode(ProtoLevel::fine, out.fine_quantized);

  const Shape coarse_shape{g.coarse_regions, cfg.coarse_schedule.back()};
  out.coarse_quantized = decode_factorized(streams.bytes[kStreamCoarse], coarse_shape,
                                           net.prototype_entropy(ProtoLevel::coarse), layout_rows(coarse_shape));
  out.coarse_recon = net.prototype_decode(ProtoLevel::coarse, out.coarse_quantized);

  const Shape z_shape{cfg.N, g.height / kPadMultiple, g.width / kPadMultiple};
  out.z_hat = decode_factorized(streams.bytes[kStreamZ], z_shape, net.z_entropy(), layout_chw(z_shape));

  const auto gp = net.hyper_decode(out.z_hat, out.coarse_recon, levels.coarse.map);
  out.mu = gp.mu;
  out.sigma = gp.sigma;
  GaussianTableCache cache;
  RangeDecoder dec(streams.bytes[kStreamY]);
  const auto sigma = out.sigma.values();
  std::vector<std::int32_t> symbols(out.mu.numel());
  for (std::size_t i = 0; i < symbols.size(); ++i) symbols[i] = dec.decode_symbol(cache.get(sigma[i]));
  out.y_hat = from_symbols(symbols, out.mu);
  return out;
}

template Substreams code_latents(const Codec<float>&, const LatentBundle<float>&, const RegionLevels&, bool);
template Substreams code_latents(const Codec<double>&, const LatentBundle<double>&, const RegionLevels&, bool);
template DecodedLatents<float> decode_latents(const Codec<float>&, const Substreams&, const RegionLevels&);
template DecodedLatents<double> decode_latents(const Codec<double>&, const Substreams&, const RegionLevels&);

}  // namespace segpic
