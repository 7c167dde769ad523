#include "segpic/net.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

#include "segpic/bytes.hpp"
#include "segpic/layers.hpp"
#include "segpic/ops.hpp"

namespace segpic {

namespace {

constexpr int kConfigVersion = 1;

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw ConfigError("model config: bad value for " + key + ": '" + text + "'");
  }
  if (used != text.size()) throw ConfigError("model config: bad value for " + key + ": '" + text + "'");
  return static_cast<std::size_t>(v);
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
  return out;
}

std::string level_name(ProtoLevel level) { return level == ProtoLevel::fine ? "fine" : "coarse"; }

// Weight std 1/sqrt(fan_in), so activations keep their scale through the
// (near-identity at init) SAL and GDN stages instead of shrinking per layer.
const LayerInit kPreserve{std::sqrt(3.0), 0.0};

const double kLogSigmaMin = std::log(kSigmaMin);
const double kLogSigmaMax = std::log(kSigmaMax);

}  // namespace

void NetConfig::validate() const {
  if (N == 0 || M == 0) throw ConfigError("model config: widths must be positive");
  if (M < N) throw ConfigError("model config: M must be at least N");
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("model config: kernel must be odd");
  if (grid_n == 0) throw ConfigError("model config: grid_n must be positive");
  auto check_schedule = [](const std::vector<std::size_t>& s, std::size_t input, const char* what) {
    if (s.size() < 2) throw ConfigError(std::string("model config: ") + what + " schedule needs two widths");
    if (s.front() != input) throw ConfigError(std::string("model config: ") + what + " schedule must start at the feature width");
    for (auto w : s) {
      if (w == 0) throw ConfigError(std::string("model config: ") + what + " schedule has a zero width");
    }
  };
  check_schedule(fine_schedule, N, "fine");
  check_schedule(coarse_schedule, M, "coarse");
}

std::string NetConfig::to_text() const {
  std::ostringstream os;
  os << "version=" << kConfigVersion << '\n'
     << "N=" << N << '\n'
     << "M=" << M << '\n'
     << "fine_schedule=" << join(fine_schedule) << '\n'
     << "coarse_schedule=" << join(coarse_schedule) << '\n'
     << "kernel=" << kernel << '\n'
     << "grid_n=" << grid_n << '\n'
     << "normalize_kernels=" << (normalize_kernels ? 1 : 0) << '\n';
  return os.str();
}

NetConfig NetConfig::from_text(const std::string& text) {
  NetConfig cfg;
  bool have_version = false;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model config: expected key=value, got '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "version") {
      if (parse_size(key, value) != kConfigVersion) throw ConfigError("model config: unsupported version " + value);
      have_version = true;
    } else if (key == "N") {
      cfg.N = parse_size(key, value);
    } else if (key == "M") {
      cfg.M = parse_size(key, value);
    } else if (key == "fine_schedule") {
      cfg.fine_schedule = parse_list(key, value);
    } else if (key == "coarse_schedule") {
      cfg.coarse_schedule = parse_list(key, value);
    } else if (key == "kernel") {
      cfg.kernel = parse_size(key, value);
    } else if (key == "grid_n") {
      cfg.grid_n = parse_size(key, value);
    } else if (key == "normalize_kernels") {
      cfg.normalize_kernels = parse_size(key, value) != 0;
    } else {
      throw ConfigError("model config: unknown key '" + key + "'");
    }
  }
  if (!have_version) throw ConfigError("model config: missing version");
  cfg.validate();
  return cfg;
}

NetConfig load_net_config(const std::string& path) {
  const auto bytes = read_file(path);
  return NetConfig::from_text(std::string(bytes.begin(), bytes.end()));
}

void save_net_config(const std::string& path, const NetConfig& cfg) {
  const std::string text = cfg.to_text();
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

RegionLevels region_levels(const RegionMap& rm) {
  return RegionLevels{rm, downsample_region_map(rm, kFineFactor), downsample_region_map(rm, kCoarseFactor)};
}

template <typename T>
Codec<T>::Codec(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t N = cfg_.N, M = cfg_.M;

  const std::size_t down_in[4] = {3, N, N, N};
  const std::size_t down_out[4] = {N, N, N, M};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string b = "enc.down" + std::to_string(i);
    add_conv(params_, b + ".conv0", down_in[i], down_out[i], 5, rng, 1, kPreserve);
    add_sal(params_, b + ".sal", down_out[i], rng);
    add_conv(params_, b + ".conv1", down_out[i], down_out[i], 3, rng, 1, kPreserve);
    add_gdn(params_, b + ".gdn", down_out[i]);
  }
  const std::size_t up_in[4] = {M, N, N, N};
  const std::size_t up_out[4] = {N, N, N, 3};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string b = "dec.up" + std::to_string(i);
    add_tconv(params_, b + ".tconv", up_in[i], up_out[i], 5, rng, kPreserve);
    add_sal(params_, b + ".sal", up_out[i], rng);
    add_conv(params_, b + ".conv", up_out[i], up_out[i], 3, rng, 1, kPreserve);
    add_gdn(params_, b + ".igdn", up_out[i]);
  }

  add_rat(params_, "rat.enc", rat_config(ProtoLevel::fine), rng);
  add_rat(params_, "rat.dec", rat_config(ProtoLevel::fine), rng);
  add_rat(params_, "rat.hyper_scales", rat_config(ProtoLevel::coarse), rng);
  add_rat(params_, "rat.hyper_means", rat_config(ProtoLevel::coarse), rng);

  std::size_t in = M;
  for (std::size_t i = 0; i < 5; ++i) {
    add_conv(params_, "hyper.enc." + std::to_string(i), in, cfg_.hyper_width(i), 3, rng, 1, kPreserve);
    in = cfg_.hyper_width(i);
  }
  for (const char* which : {"hyper.scales.", "hyper.means."}) {
    in = N;
    for (std::size_t i = 0; i < 5; ++i) {
      const std::size_t out = cfg_.hyper_width(4 - i);
      const std::string name = which + std::to_string(i);
      if (i % 2 == 1) {
        add_tconv(params_, name, in, out, 3, rng, kPreserve);
      } else {
        add_conv(params_, name, in, out, 3, rng, 1, kPreserve);
      }
      in = out;
    }
  }

  for (ProtoLevel level : {ProtoLevel::fine, ProtoLevel::coarse}) {
    const auto& sched = level == ProtoLevel::fine ? cfg_.fine_schedule : cfg_.coarse_schedule;
    const std::string b = "proto." + level_name(level);
    for (std::size_t i = 0; i + 1 < sched.size(); ++i) {
      add_linear(params_, b + ".enc." + std::to_string(i), sched[i], sched[i + 1], rng, kPreserve);
    }
    // The decoder mirrors the chain: layer i maps sched[L-i] -> sched[L-i-1].
    const std::size_t L = sched.size() - 1;
    for (std::size_t i = 0; i < L; ++i) {
      add_linear(params_, b + ".dec." + std::to_string(i), sched[L - i], sched[L - i - 1], rng, kPreserve);
    }
    params_.add(b + ".log_gain", {1});
    const std::size_t code_dim = sched.back();
    params_.add("entropy." + level_name(level) + ".loc", {code_dim});
    params_.add("entropy." + level_name(level) + ".log_scale", {code_dim});
  }
  params_.add("entropy.z.loc", {N});
  params_.add("entropy.z.log_scale", {N});
}

template <typename T>
RatConfig Codec<T>::rat_config(ProtoLevel level) const {
  RatConfig rc;
  rc.channels = level == ProtoLevel::fine ? cfg_.N : cfg_.M;
  rc.proto_dim = rc.channels;
  rc.kernel = cfg_.kernel;
  rc.normalize_kernels = cfg_.normalize_kernels;
  return rc;
}

template <typename T>
Tensor<T> Codec<T>::down(std::size_t i, const Tensor<T>& x) const {
  const std::string b = "enc.down" + std::to_string(i);
  auto h = apply_conv(params_, b + ".conv0", x, 2);
  h = sal(params_, b + ".sal", h);
  h = apply_conv(params_, b + ".conv1", h);
  return apply_gdn(params_, b + ".gdn", h, false);
}

template <typename T>
Tensor<T> Codec<T>::up(std::size_t i, const Tensor<T>& x) const {
  const std::string b = "dec.up" + std::to_string(i);
  auto h = apply_tconv(params_, b + ".tconv", x);
  h = sal(params_, b + ".sal", h);
  h = apply_conv(params_, b + ".conv", h);
  return apply_gdn(params_, b + ".igdn", h, true);
}

template <typename T>
Tensor<T> Codec<T>::analysis_fine(const Tensor<T>& x) const {
  if (x.rank() != 3 || x.dim(0) != 3) throw DimensionError("codec: expected a [3,H,W] image, got " + shape_string(x.shape()));
  if (x.dim(1) % kPadMultiple != 0 || x.dim(2) % kPadMultiple != 0) {
    throw DimensionError("codec: image dims must be multiples of 64, got " + shape_string(x.shape()));
  }
  return down(1, down(0, x));
}

template <typename T>
Tensor<T> Codec<T>::analysis_coarse(const Tensor<T>& y_fine, const Tensor<T>& fine_recon,
                                    const RegionMap& fine_map) const {
  auto h = rat_forward(params_, "rat.enc", rat_config(ProtoLevel::fine), y_fine, fine_recon, fine_map);
  return down(3, down(2, h));
}

template <typename T>
std::vector<Tensor<T>> Codec<T>::hyper_encoder_layers(const Tensor<T>& y) const {
  std::vector<Tensor<T>> out;
  Tensor<T> h = y;
  for (std::size_t i = 0; i < 5; ++i) {
    if (i > 0) h = gelu(h);
    // Layers 2 and 4 halve the resolution.
    h = apply_conv(params_, "hyper.enc." + std::to_string(i), h, (i == 2 || i == 4) ? 2 : 1);
    out.push_back(h);
  }
  return out;
}

template <typename T>
Tensor<T> Codec<T>::hyper_encode(const Tensor<T>& y) const {
  return hyper_encoder_layers(y).back();
}

template <typename T>
std::vector<Tensor<T>> Codec<T>::hyper_decoder_layers(bool means, const Tensor<T>& z_hat) const {
  const std::string name = means ? "hyper.means" : "hyper.scales";
  std::vector<Tensor<T>> out;
  Tensor<T> h = z_hat;
  for (std::size_t i = 0; i < 5; ++i) {
    if (i > 0) h = gelu(h);
    const std::string layer = name + "." + std::to_string(i);
    h = i % 2 == 1 ? apply_tconv(params_, layer, h) : apply_conv(params_, layer, h);
    out.push_back(h);
  }
  return out;
}

template <typename T>
GaussianParams<T> Codec<T>::hyper_decode(const Tensor<T>& z_hat, const Tensor<T>& coarse_recon,
                                         const RegionMap& coarse_map) const {
  const RatConfig rc = rat_config(ProtoLevel::coarse);
  auto raw_scale = hyper_decoder_layers(false, z_hat).back();
  raw_scale = rat_forward(params_, "rat.hyper_scales", rc, raw_scale, coarse_recon, coarse_map);
  auto mu = hyper_decoder_layers(true, z_hat).back();
  mu = rat_forward(params_, "rat.hyper_means", rc, mu, coarse_recon, coarse_map);
  auto sigma = exp(clamp(raw_scale, static_cast<T>(kLogSigmaMin), static_cast<T>(kLogSigmaMax)));
  return {mu, sigma};
}

template <typename T>
Tensor<T> Codec<T>::decode_features(const Tensor<T>& y_hat, const Tensor<T>& fine_recon,
                                    const RegionLevels& levels) const {
  auto h = up(1, up(0, y_hat));
  h = rat_forward(params_, "rat.dec", rat_config(ProtoLevel::fine), h, fine_recon, levels.fine.map);
  return up(3, up(2, h));
}

template <typename T>
Tensor<T> Codec<T>::prototype_encode(ProtoLevel level, const Tensor<T>& raw) const {
  const auto& sched = level == ProtoLevel::fine ? cfg_.fine_schedule : cfg_.coarse_schedule;
  if (raw.rank() != 2 || raw.dim(1) != sched.front()) {
    throw ConfigError("prototype codec: input width does not match the schedule");
  }
  const std::string b = "proto." + level_name(level);
  Tensor<T> h = raw;
  for (std::size_t i = 0; i + 1 < sched.size(); ++i) {
    if (i > 0) h = leaky_relu(h);
    h = apply_linear(params_, b + ".enc." + std::to_string(i), h);
  }
  auto gain = exp(params_.get(b + ".log_gain"));
  return mul(h, broadcast_channels(gain, ChannelLayout{1, 1, h.numel()}, h.shape()));
}

template <typename T>
Tensor<T> Codec<T>::prototype_decode(ProtoLevel level, const Tensor<T>& quantized) const {
  const auto& sched = level == ProtoLevel::fine ? cfg_.fine_schedule : cfg_.coarse_schedule;
  if (quantized.rank() != 2 || quantized.dim(1) != sched.back()) {
    throw ConfigError("prototype codec: code width does not match the schedule");
  }
  const std::string b = "proto." + level_name(level);
  auto inv_gain = exp(mul_scalar(params_.get(b + ".log_gain"), T(-1)));
  Tensor<T> h = mul(quantized, broadcast_channels(inv_gain, ChannelLayout{1, 1, quantized.numel()}, quantized.shape()));
  const std::size_t L = sched.size() - 1;
  for (std::size_t i = 0; i < L; ++i) {
    if (i > 0) h = leaky_relu(h);
    h = apply_linear(params_, b + ".dec." + std::to_string(i), h);
  }
  return h;
}

template <typename T>
FactorizedParams<T> Codec<T>::factorized(const std::string& name) const {
  auto log_scale = clamp(params_.get(name + ".log_scale"), static_cast<T>(kLogSigmaMin), static_cast<T>(kLogSigmaMax));
  return {params_.get(name + ".loc"), log_scale};
}

template <typename T>
FactorizedParams<T> Codec<T>::prototype_entropy(ProtoLevel level) const {
  return factorized("entropy." + level_name(level));
}

template <typename T>
FactorizedParams<T> Codec<T>::z_entropy() const {
  return factorized("entropy.z");
}

template <typename T>
PrototypeBranch<T> Codec<T>::prototype_branch(ProtoLevel level, const Tensor<T>& features, const RegionMap& map,
                                              QuantMode mode, Rng& rng) const {
  PrototypeBranch<T> b;
  b.raw = masked_average_pool(features, map).vectors;
  b.code = prototype_encode(level, b.raw);
  const auto fp = prototype_entropy(level);
  const auto loc = broadcast_channels(fp.loc, layout_rows(b.code.shape()), b.code.shape());
  b.quantized = quantize(b.code, loc, mode, rng);
  b.recon = prototype_decode(level, b.quantized);
  return b;
}

template <typename T>
LatentBundle<T> Codec<T>::encode_features(const Tensor<T>& x, const RegionLevels& levels, QuantMode mode,
                                          Rng& rng) const {
  if (levels.full.height != x.dim(1) || levels.full.width != x.dim(2)) {
    throw DimensionError("codec: region map does not match the image size");
  }
  LatentBundle<T> out;
  out.y_fine = analysis_fine(x);
  out.fine = prototype_branch(ProtoLevel::fine, out.y_fine, levels.fine.map, mode, rng);
  out.y = analysis_coarse(out.y_fine, out.fine.recon, levels.fine.map);
  out.coarse = prototype_branch(ProtoLevel::coarse, out.y, levels.coarse.map, mode, rng);

  out.z = hyper_encode(out.y);
  const auto zp = z_entropy();
  const auto z_layout = layout_chw(out.z.shape());
  out.z_hat = quantize(out.z, broadcast_channels(zp.loc, z_layout, out.z.shape()), mode, rng);
  const auto g = hyper_decode(out.z_hat, out.coarse.recon, levels.coarse.map);
  out.mu = g.mu;
  out.sigma = g.sigma;
  out.y_hat = quantize(out.y, out.mu, mode, rng);

  out.bits_y = gaussian_bits(out.y_hat, out.mu, out.sigma);
  out.bits_z = factorized_bits(out.z_hat, zp.loc, zp.log_scale, z_layout);
  const auto fp = prototype_entropy(ProtoLevel::fine);
  out.bits_fine = factorized_bits(out.fine.quantized, fp.loc, fp.log_scale, layout_rows(out.fine.quantized.shape()));
  const auto cp = prototype_entropy(ProtoLevel::coarse);
  out.bits_coarse =
      factorized_bits(out.coarse.quantized, cp.loc, cp.log_scale, layout_rows(out.coarse.quantized.shape()));
  return out;
}

template class Codec<float>;
template class Codec<double>;

std::string model_config_path(const std::string& weights_path) {
  return std::filesystem::path(weights_path).replace_extension(".cfg").string();
}

void save_model(const std::string& weights_path, const Codec<float>& net) {
  write_file(weights_path, net.params().serialize());
  save_net_config(model_config_path(weights_path), net.config());
}

LoadedModel load_model(const std::string& weights_path) {
  const auto bytes = read_file(weights_path);
  LoadedModel m{Codec<float>(load_net_config(model_config_path(weights_path)), 0), fnv1a64(bytes)};
  m.net.params().deserialize(bytes);
  return m;
}

}  // namespace segpic
