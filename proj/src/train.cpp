#include "segpic/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "segpic/bytes.hpp"
#include "segpic/metrics.hpp"
#include "segpic/ops.hpp"

namespace segpic {

template <typename T>
RdLoss<T> rd_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const Tensor<T>& bits_y, const Tensor<T>& bits_z,
                  const Tensor<T>& bits_p, const Tensor<T>& bits_p_prime, double lambda, double distortion_scale) {
  if (x.shape() != x_hat.shape() || x.rank() != 3) throw DimensionError("rd_loss: image shape mismatch");
  const T per_pixel = static_cast<T>(1.0 / static_cast<double>(x.dim(1) * x.dim(2)));
  RdLoss<T> out;
  out.lambda = lambda;
  out.distortion_scale = distortion_scale;
  out.rate_y = mul_scalar(bits_y, per_pixel);
  out.rate_z = mul_scalar(bits_z, per_pixel);
  out.rate_p = mul_scalar(bits_p, per_pixel);
  out.rate_p_prime = mul_scalar(bits_p_prime, per_pixel);
  out.distortion = mse(x_hat, x);
  const auto rate = add(add(out.rate_y, out.rate_z), add(out.rate_p, out.rate_p_prime));
  out.total = add(rate, mul_scalar(out.distortion, static_cast<T>(lambda * distortion_scale)));
  return out;
}

template <typename T>
RdLoss<T> rd_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const LatentBundle<T>& b, double lambda,
                  double distortion_scale) {
  return rd_loss(x, x_hat, b.bits_y, b.bits_z, b.bits_coarse, b.bits_fine, lambda, distortion_scale);
}

template <typename T>
void Adam::step(ParamStore<T>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, entry] : params.entries()) {
    if (!entry.trainable || !entry.tensor.has_grad()) continue;
    auto& [m, v] = moments_[name];
    Tensor<T>& p = params.get(name);
    const auto g = p.grad();
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double update = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
    }
  }
}

template void Adam::step(ParamStore<float>&);
template void Adam::step(ParamStore<double>&);

std::vector<Sample> synth_dataset(const DatasetConfig& cfg) {
  if (cfg.size == 0 || cfg.regions_per_image == 0 || cfg.regions_per_image > kMaxRegions ||
      cfg.regions_per_image > cfg.size * cfg.size) {
    throw ConfigError("synth_dataset: bad region count or size");
  }
  Rng rng(cfg.seed);
  const std::size_t S = cfg.size, n = cfg.regions_per_image;
  std::vector<Sample> out;
  out.reserve(cfg.count);
  for (std::size_t k = 0; k < cfg.count; ++k) {
    std::vector<std::pair<std::size_t, std::size_t>> seeds;
    while (seeds.size() < n) {
      std::pair<std::size_t, std::size_t> s{rng.index(S), rng.index(S)};
      if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
    }
    struct Look {
      double base[3], weight[3], fy, fx, phase;
    };
    std::vector<Look> looks(n);
    for (auto& l : looks) {
      for (int c = 0; c < 3; ++c) {
        l.base[c] = rng.uniform(0.15, 0.85);
        l.weight[c] = rng.uniform(0.5, 1.0);
      }
      // 1 to 6 cycles across the image along each axis.
      l.fy = rng.uniform(-6.0, 6.0) / static_cast<double>(S);
      l.fx = rng.uniform(-6.0, 6.0) / static_cast<double>(S);
      l.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    std::vector<std::uint32_t> labels(S * S);
    std::vector<float> pix(3 * S * S);
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        std::size_t best = 0;
        long best_d = -1;
        for (std::size_t r = 0; r < n; ++r) {
          const long dy = long(y) - long(seeds[r].first), dx = long(x) - long(seeds[r].second);
          const long d = dy * dy + dx * dx;
          if (best_d < 0 || d < best_d) {
            best_d = d;
            best = r;
          }
        }
        labels[y * S + x] = static_cast<std::uint32_t>(best);
        const Look& l = looks[best];
        const double t = std::sin(2.0 * std::numbers::pi * (l.fy * double(y) + l.fx * double(x)) + l.phase);
        for (int c = 0; c < 3; ++c) {
          const double v = std::clamp(l.base[c] + cfg.texture_amp * l.weight[c] * t, 0.0, 1.0);
          pix[std::size_t(c) * S * S + y * S + x] = static_cast<float>(std::lround(v * 255.0) / 255.0);
        }
      }
    }
    out.push_back({Tensor<float>({3, S, S}, std::move(pix)), make_region_map(S, S, labels), std::move(seeds)});
  }
  return out;
}

RgbImage sample_to_image(const Sample& s) { return tensor_to_image(s.image); }

std::string trace_csv_header() { return "step,total,rate_y,rate_z,rate_p,rate_p_prime,mse,psnr\n"; }

std::string trace_csv_row(const TraceRow& r) {
  std::ostringstream os;
  os.precision(8);
  os << r.step << ',' << r.total << ',' << r.rate_y << ',' << r.rate_z << ',' << r.rate_p << ',' << r.rate_p_prime
     << ',' << r.mse << ',' << r.psnr << '\n';
  return os.str();
}

std::vector<double> smooth(const std::vector<double>& v, std::size_t window) {
  std::vector<double> out(v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += v[i];
    if (i >= window) s -= v[i - window];
    out[i] = s / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

std::vector<TraceRow> train_loop(const TrainConfig& cfg, const std::vector<Sample>& data, Codec<float>& net,
                                 const std::function<void(const TraceRow&)>& on_step) {
  if (data.empty()) throw ConfigError("train: empty dataset");
  if (cfg.batch == 0) throw ConfigError("train: batch must be positive");
  std::vector<RegionLevels> levels;
  levels.reserve(data.size());
  for (const auto& s : data) {
    levels.push_back(region_levels(cfg.regions == RegionMode::masks
                                       ? s.regions
                                       : grid_partition(s.image.dim(1), s.image.dim(2), cfg.grid_n)));
  }

  Rng rng(cfg.seed);
  Rng pick = rng.split();
  Adam opt(cfg.lr);
  const auto decay_start =
      static_cast<std::size_t>(std::llround(double(cfg.steps) * (1.0 - cfg.lr_decay_fraction)));
  std::vector<TraceRow> trace;
  trace.reserve(cfg.steps);
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (step > decay_start) opt.set_lr(cfg.lr * cfg.lr_decay);
    TraceRow row;
    row.step = step;
    Tensor<float> total;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t i = pick.index(data.size());
      const auto& x = data[i].image;
      const auto bundle = net.encode_features(x, levels[i], QuantMode::noise, rng);
      const auto x_hat = net.decode_features(bundle.y_hat, bundle.fine.recon, levels[i]);
      const auto l = rd_loss(x, x_hat, bundle, cfg.lambda, cfg.distortion_scale);
      total = total.defined() ? add(total, l.total) : l.total;
      row.rate_y += l.rate_y.item() * inv_batch;
      row.rate_z += l.rate_z.item() * inv_batch;
      row.rate_p += l.rate_p.item() * inv_batch;
      row.rate_p_prime += l.rate_p_prime.item() * inv_batch;
      row.mse += l.distortion.item() * inv_batch;
    }
    total = mul_scalar(total, inv_batch);
    row.total = total.item();
    row.psnr = psnr_from_mse(row.mse);
    if (!std::isfinite(row.total)) {
      std::ostringstream os;
      os << "train: non-finite loss at step " << step << " (rate_y " << row.rate_y << ", rate_z " << row.rate_z
         << ", rate_p " << row.rate_p << ", rate_p_prime " << row.rate_p_prime << ", mse " << row.mse << ")";
      throw NumericError(os.str());
    }
    total.backward();
    opt.step(net.params());
    net.params().zero_grad();
    trace.push_back(row);
    if (on_step) on_step(row);
  }
  return trace;
}

std::vector<EvalRow> eval_rd(const Codec<float>& net, std::uint64_t model_hash, const std::vector<Sample>& data,
                             RegionMode mode, std::size_t grid_n) {
  std::vector<EvalRow> rows;
  for (const auto& s : data) {
    const RgbImage img = sample_to_image(s);
    RegionSource src;
    if (mode == RegionMode::masks) {
      src.map = &s.regions;
    } else {
      src.grid_n = grid_n;
    }
    const auto enc = encode_image(net, model_hash, img, src, false);
    EvalRow r;
    r.bytes = enc.container.size();
    r.payload_bytes = enc.streams.total_bytes();
    r.bpp = bpp(r.bytes, img.height, img.width);
    for (double b : enc.estimated_bits) r.estimated_bits += b;
    r.estimated_bpp = r.estimated_bits / static_cast<double>(img.height * img.width);
    r.mse = mse(img, enc.reconstruction) / (255.0 * 255.0);
    r.psnr = psnr(img, enc.reconstruction);
    rows.push_back(r);
  }
  return rows;
}

double mean_rd_loss(const std::vector<EvalRow>& rows, double lambda, double distortion_scale) {
  if (rows.empty()) throw ConfigError("mean_rd_loss: no rows");
  double s = 0.0;
  for (const auto& r : rows) s += r.bpp + lambda * distortion_scale * r.mse;
  return s / static_cast<double>(rows.size());
}

template RdLoss<float> rd_loss(const Tensor<float>&, const Tensor<float>&, const LatentBundle<float>&, double, double);
template RdLoss<double> rd_loss(const Tensor<double>&, const Tensor<double>&, const LatentBundle<double>&, double,
                                double);
template RdLoss<float> rd_loss(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                               const Tensor<float>&, const Tensor<float>&, double, double);
template RdLoss<double> rd_loss(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, double, double);

namespace {

double parse_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || !std::isfinite(v)) {
    throw ConfigError("train config: bad value for " + key + ": '" + text + "'");
  }
  return v;
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  const double v = parse_double(key, text);
  if (v < 0 || v != std::floor(v)) throw ConfigError("train config: " + key + " must be a whole number");
  return static_cast<std::size_t>(v);
}

}  // namespace

std::string TrainFile::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "version=1\n";
  std::istringstream model_text(model.to_text());
  std::string line;
  while (std::getline(model_text, line)) {
    if (!line.empty() && line.rfind("version=", 0) != 0) os << "model." << line << '\n';
  }
  os << "data.count=" << data.count << "\ndata.size=" << data.size << "\ndata.regions=" << data.regions_per_image
     << "\ndata.texture_amp=" << data.texture_amp << "\ndata.seed=" << data.seed << '\n';
  os << "lambda=" << train.lambda << "\ndistortion_scale=" << train.distortion_scale << "\nbatch=" << train.batch
     << "\nsteps=" << train.steps << "\nlr=" << train.lr << "\nlr_decay=" << train.lr_decay
     << "\nlr_decay_fraction=" << train.lr_decay_fraction << "\nseed=" << train.seed
     << "\nregions=" << (train.regions == RegionMode::masks ? "masks" : "grid") << "\ngrid_n=" << train.grid_n
     << '\n';
  return os.str();
}

TrainFile parse_train_file(const std::string& text) {
  TrainFile f;
  std::string model_text = "version=1\n";
  bool have_version = false;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("train config: expected key=value, got '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    auto& t = f.train;
    auto& d = f.data;
    if (key == "version") {
      if (value != "1") throw ConfigError("train config: unsupported version " + value);
      have_version = true;
    } else if (key.rfind("model.", 0) == 0) {
      model_text += key.substr(6) + "=" + value + "\n";
    } else if (key == "data.count") {
      d.count = parse_count(key, value);
    } else if (key == "data.size") {
      d.size = parse_count(key, value);
    } else if (key == "data.regions") {
      d.regions_per_image = parse_count(key, value);
    } else if (key == "data.texture_amp") {
      d.texture_amp = parse_double(key, value);
    } else if (key == "data.seed") {
      d.seed = parse_count(key, value);
    } else if (key == "lambda") {
      t.lambda = parse_double(key, value);
    } else if (key == "distortion_scale") {
      t.distortion_scale = parse_double(key, value);
    } else if (key == "batch") {
      t.batch = parse_count(key, value);
    } else if (key == "steps") {
      t.steps = parse_count(key, value);
    } else if (key == "lr") {
      t.lr = parse_double(key, value);
    } else if (key == "lr_decay") {
      t.lr_decay = parse_double(key, value);
    } else if (key == "lr_decay_fraction") {
      t.lr_decay_fraction = parse_double(key, value);
    } else if (key == "seed") {
      t.seed = parse_count(key, value);
    } else if (key == "regions") {
      if (value == "masks") {
        t.regions = RegionMode::masks;
      } else if (value == "grid") {
        t.regions = RegionMode::grid;
      } else {
        throw ConfigError("train config: regions must be masks or grid, got '" + value + "'");
      }
    } else if (key == "grid_n") {
      t.grid_n = parse_count(key, value);
    } else {
      throw ConfigError("train config: unknown key '" + key + "'");
    }
  }
  if (!have_version) throw ConfigError("train config: missing version");
  f.model = NetConfig::from_text(model_text);
  if (f.train.lr <= 0 || f.train.lambda < 0 || f.train.batch == 0) {
    throw ConfigError("train config: lr and batch must be positive, lambda non-negative");
  }
  if (f.train.lr_decay_fraction < 0 || f.train.lr_decay_fraction > 1) {
    throw ConfigError("train config: lr_decay_fraction must lie in [0,1]");
  }
  return f;
}

TrainFile load_train_file(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_train_file(std::string(bytes.begin(), bytes.end()));
}

}  // namespace segpic
