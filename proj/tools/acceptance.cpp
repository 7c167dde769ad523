// Acceptance run: one PASS/FAIL line per primary criterion. The two toy
// models are trained once and cached next to the build (or in
// $SEGPIC_CACHE_DIR); later runs reuse them.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "oracles.hpp"
#include "segpic/bytes.hpp"
#include "segpic/gradcheck_suite.hpp"
#include "segpic/image_codec.hpp"
#include "segpic/metrics.hpp"
#include "segpic/ops.hpp"
#include "segpic/range_coder.hpp"
#include "segpic/rat.hpp"
#include "segpic/train.hpp"

using namespace segpic;
namespace fs = std::filesystem;

namespace {

constexpr double kLambda = 0.013;
constexpr std::size_t kHeldOut = 20;
constexpr std::size_t kGrid = 4;

int g_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::cout << "[PRIMARY] " << name << ": " << (pass ? "PASS" : "FAIL") << " (" << detail << ")" << std::endl;
  if (!pass) ++g_failures;
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

// Desk-scale widths; see README for the reasoning.
TrainFile toy_train_file(RegionMode mode) {
  TrainFile f;
  f.model.N = 48;
  f.model.M = 64;
  f.model.fine_schedule = {48, 32, 24};
  f.model.coarse_schedule = {64, 42, 32};
  f.model.grid_n = kGrid;
  f.data = DatasetConfig{500, 64, 6, 0.08, 1};
  f.train.lambda = kLambda;
  f.train.steps = 5000;
  f.train.batch = 8;
  f.train.lr = 1e-4;
  f.train.seed = 1;
  f.train.regions = mode;
  f.train.grid_n = kGrid;
  return f;
}

fs::path cache_dir() {
  if (const char* d = std::getenv("SEGPIC_CACHE_DIR"); d != nullptr && *d != '\0') return d;
  return SEGPIC_ACCEPTANCE_CACHE;
}

struct ToyModel {
  LoadedModel model;
  std::vector<TraceRow> trace;
  double train_seconds = 0;
};

std::vector<TraceRow> parse_trace(const std::string& text) {
  std::vector<TraceRow> rows;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    TraceRow r;
    char c;
    std::istringstream ls(line);
    ls >> r.step >> c >> r.total >> c >> r.rate_y >> c >> r.rate_z >> c >> r.rate_p >> c >> r.rate_p_prime >> c >>
        r.mse >> c >> r.psnr;
    rows.push_back(r);
  }
  return rows;
}

ToyModel toy_model(RegionMode mode, const std::vector<Sample>& data) {
  const TrainFile f = toy_train_file(mode);
  const std::string text = f.to_text();
  std::ostringstream stem;
  stem << "toy_" << (mode == RegionMode::masks ? "masks" : "grid") << "_" << std::hex
       << fnv1a64(std::vector<std::uint8_t>(text.begin(), text.end()));
  const fs::path base = cache_dir() / stem.str();
  const fs::path weights = fs::path(base).replace_extension(".spw");
  const fs::path trace_path = fs::path(base).replace_extension(".trace.csv");
  const fs::path time_path = fs::path(base).replace_extension(".seconds");

  if (!(fs::exists(weights) && fs::exists(trace_path) && fs::exists(time_path))) {
    std::cout << "training " << stem.str() << " (" << f.train.steps << " steps)" << std::endl;
    fs::create_directories(cache_dir());
    Codec<float> net(f.model, f.train.seed);
    const std::clock_t c0 = std::clock();
    std::string csv = trace_csv_header();
    train_loop(f.train, data, net, [&](const TraceRow& r) {
      csv += trace_csv_row(r);
      if (r.step % 500 == 0) std::cout << "  step " << r.step << " loss " << fmt(r.total) << std::endl;
    });
    const double cpu = double(std::clock() - c0) / CLOCKS_PER_SEC;
    save_model(weights.string(), net);
    write_file(trace_path.string(), std::vector<std::uint8_t>(csv.begin(), csv.end()));
    std::ofstream(time_path) << std::setprecision(10) << cpu << '\n';
  }
  ToyModel m{load_model(weights.string()), {}, 0};
  const auto trace_bytes = read_file(trace_path.string());
  m.trace = parse_trace(std::string(trace_bytes.begin(), trace_bytes.end()));
  std::ifstream(time_path) >> m.train_seconds;
  return m;
}

double mean_psnr(const std::vector<EvalRow>& rows) {
  double s = 0;
  for (const auto& r : rows) s += r.psnr;
  return s / double(rows.size());
}

double mean_bpp(const std::vector<EvalRow>& rows) {
  double s = 0;
  for (const auto& r : rows) s += r.bpp;
  return s / double(rows.size());
}

void check_gradients() {
  const std::clock_t c0 = std::clock();
  double worst = 0;
  std::string worst_name;
  bool ok = true;
  for (const auto& c : run_gradcheck_suite("all", 1)) {
    ok = ok && c.passed();
    if (c.result.max_relative_error >= worst) {
      worst = c.result.max_relative_error;
      worst_name = c.name;
    }
  }
  const double cpu = double(std::clock() - c0) / CLOCKS_PER_SEC;
  report("gradient suite", ok && cpu < 600.0,
         "max rel error " + fmt(worst, 3) + " at " + worst_name + ", tol 1e-4; " + fmt(cpu, 3) + " s CPU, limit 600");
}

void check_oracles() {
  Rng rng(11);
  // dpsconv against the direct loop, 20 random geometries.
  double dps = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 1 + rng.index(5), H = 2 + rng.index(9), W = 2 + rng.index(9), k = trial % 3 == 2 ? 5 : 3;
    const auto x = oracle::random_tensor({C, H, W}, rng);
    const auto kern = oracle::random_tensor({C, H, W, k, k}, rng);
    dps = std::max(dps, oracle::max_abs_diff(dpsconv(x, kern), oracle::dpsconv(x, kern)));
  }
  // Masked average pooling and expansion against per-region loops.
  double pool = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t H = 3 + rng.index(14), W = 3 + rng.index(14), n = 1 + rng.index(8), C = 1 + rng.index(6);
    std::vector<std::uint32_t> raw(H * W);
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<std::uint32_t>(i < n ? i : rng.index(n));
    const auto rm = make_region_map(H, W, raw);
    const auto f = oracle::random_tensor({C, H, W}, rng);
    const auto ps = masked_average_pool(f, rm).vectors;
    const auto means = oracle::region_means(f, rm);
    for (std::size_t i = 0; i < means.size(); ++i) pool = std::max(pool, std::abs(ps[i] - means[i]));
    const auto p = oracle::random_tensor({n, C}, rng);
    const auto e = expand_prototypes(p, rm);
    const auto g = oracle::gather_regions(p, rm);
    for (std::size_t i = 0; i < g.size(); ++i) pool = std::max(pool, std::abs(e[i] - g[i]));
  }
  // Position-invariant kernels reduce dpsconv to a depthwise convolution.
  double depthwise = 0;
  for (std::size_t C : {2u, 4u, 7u}) {
    const auto x = oracle::random_tensor({C, 9, 8}, rng);
    const auto w = oracle::random_tensor({C, 1, 3, 3}, rng);
    Tensor<double> k({C, 9, 8, 3, 3});
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t p = 0; p < 72; ++p) {
        for (std::size_t t = 0; t < 9; ++t) k.mutable_values()[(c * 72 + p) * 9 + t] = w[c * 9 + t];
      }
    }
    depthwise = std::max(depthwise, oracle::max_abs_diff(dpsconv(x, k), conv2d(x, w, Tensor<double>(), 1, 1, C)));
  }
  // BD-rate against dense numeric integration.
  double bd = 0;
  int compared = 0;
  auto curve = [&](std::size_t n) {
    const double a = rng.uniform(28, 34), b = rng.uniform(3, 6), c = rng.uniform(-0.6, 0.0);
    RdCurve out;
    double r = rng.uniform(0.1, 0.3);
    for (std::size_t i = 0; i < n; ++i) {
      const double l = std::log(r);
      out.push_back({r, a + b * l + c * l * l});
      r *= rng.uniform(1.3, 1.9);
    }
    return out;
  };
  while (compared < 30) {
    const auto t = curve(4 + rng.index(4)), a = curve(4 + rng.index(4));
    if (!(std::min(t.back().psnr, a.back().psnr) > std::max(t.front().psnr, a.front().psnr) + 0.5)) continue;
    bd = std::max(bd, std::abs(bd_rate(t, a) - oracle::bd_rate_trapezoid(t, a)));
    ++compared;
  }
  report("oracle equivalences", dps < 1e-6 && pool < 1e-6 && depthwise < 1e-6 && bd < 0.1,
         "dpsconv " + fmt(dps, 2) + ", pool/expand " + fmt(pool, 2) + ", depthwise " + fmt(depthwise, 2) +
             " (atol 1e-6); BD-rate " + fmt(bd, 2) + " (< 0.1)");
}

CdfTable random_table(Rng& rng) {
  const std::size_t n = 1 + rng.index(40);
  std::vector<double> pmf(n);
  double s = 0;
  for (auto& p : pmf) {
    p = std::pow(rng.uniform(), 1 + double(rng.index(8)));
    s += p;
  }
  for (auto& p : pmf) p /= s;
  const bool escape = rng.index(2) == 0;
  return build_cdf(pmf, static_cast<std::int32_t>(rng.index(41)) - 20, escape ? rng.uniform() * 0.01 : -1.0);
}

void check_entropy_coding(const LoadedModel& masks_model, const std::vector<Sample>& held_out) {
  Rng rng(12);
  int mismatched = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<CdfTable> tables;
    for (std::size_t i = 0, n = 1 + rng.index(4); i < n; ++i) tables.push_back(random_table(rng));
    std::vector<std::pair<std::size_t, std::int32_t>> seq;
    for (std::size_t i = 0, len = rng.index(60); i < len; ++i) {
      const std::size_t ti = rng.index(tables.size());
      const auto& t = tables[ti];
      std::int32_t v = t.offset + static_cast<std::int32_t>(rng.index(t.symbol_count() - (t.has_escape ? 1 : 0)));
      if (t.has_escape && rng.index(10) == 0) v = static_cast<std::int32_t>(rng.next());
      seq.emplace_back(ti, v);
    }
    RangeEncoder enc;
    for (auto [ti, v] : seq) enc.encode_symbol(tables[ti], v);
    const auto bytes = enc.finish();
    RangeDecoder dec(bytes);
    bool ok = true;
    for (auto [ti, v] : seq) ok = ok && dec.decode_symbol(tables[ti]) == v;
    mismatched += ok ? 0 : 1;
  }

  const std::vector<double> p{0.9, 0.05, 0.05};
  const auto t = build_cdf(p, 0);
  const std::size_t n = 1000000;
  RangeEncoder enc;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    enc.encode_symbol(t, u < 0.9 ? 0 : (u < 0.95 ? 1 : 2));
  }
  const double bytes = double(enc.finish().size());
  double h = 0;
  for (double q : p) h -= q * std::log2(q);
  const double bound = h * double(n) / 8.0;

  int image_mismatch = 0;
  for (const auto& s : held_out) {
    const RgbImage img = sample_to_image(s);
    for (bool masks : {true, false}) {
      const RegionSource src = masks ? RegionSource{0, &s.regions} : RegionSource{kGrid, nullptr};
      const auto e = encode_image(masks_model.net, masks_model.hash, img, src);
      const auto d = decode_image(masks_model.net, masks_model.hash, e.container, masks ? &s.regions : nullptr);
      image_mismatch += d.pixels == e.reconstruction.pixels ? 0 : 1;
    }
  }
  report("entropy coding", mismatched == 0 && bytes <= bound * 1.01 + 8 && image_mismatch == 0,
         std::to_string(mismatched) + "/10000 round-trip failures; skewed source " + fmt(bytes, 8) + " B vs bound " +
             fmt(bound * 1.01 + 8, 8) + " B; " + std::to_string(image_mismatch) + "/" +
             std::to_string(2 * held_out.size()) + " image decodes differ");
}

void check_rate_accounting(const LoadedModel& m, const std::vector<Sample>& held_out) {
  double worst_excess = -1e300, worst_rel = 0;
  bool ok = true;
  for (RegionMode mode : {RegionMode::masks, RegionMode::grid}) {
    for (const auto& r : eval_rd(m.net, m.hash, held_out, mode, kGrid)) {
      const double actual = 8.0 * double(r.bytes);
      const double allowed = 0.02 * r.estimated_bits + 64 * 8;
      const double diff = std::abs(actual - r.estimated_bits);
      ok = ok && diff <= allowed;
      worst_excess = std::max(worst_excess, diff - allowed);
      worst_rel = std::max(worst_rel, diff / r.estimated_bits);
    }
  }
  report("rate accounting", ok,
         "container bits vs estimate, all four substreams, " + std::to_string(2 * held_out.size()) +
             " encodes; worst margin to 2% + 64 B is " + fmt(-worst_excess / 8.0, 3) + " B, worst relative gap " +
             fmt(100 * worst_rel, 3) + "%");
}

void check_training(const ToyModel& m, const std::vector<Sample>& held_out) {
  std::vector<double> totals;
  for (const auto& r : m.trace) totals.push_back(r.total);
  const auto sm = smooth(totals, 100);
  const double baseline = sm.at(99), last = sm.back();
  const TrainFile f = toy_train_file(RegionMode::masks);
  const Codec<float> untrained(f.model, f.train.seed);
  const auto hash = fnv1a64(untrained.params().serialize());
  const auto before = eval_rd(untrained, hash, held_out, RegionMode::masks, kGrid);
  const auto after = eval_rd(m.model.net, m.model.hash, held_out, RegionMode::masks, kGrid);
  const double gain = mean_psnr(after) - mean_psnr(before);
  report("toy training", last <= 0.5 * baseline && gain >= 5.0 && m.train_seconds <= 4 * 3600.0,
         "smoothed loss " + fmt(baseline) + " at step 100 -> " + fmt(last) + " (" +
             fmt(100 * (1 - last / baseline), 3) + "% lower, need 50); held-out " + fmt(mean_psnr(before)) + " dB at " +
             fmt(mean_bpp(before)) + " bpp untrained -> " + fmt(mean_psnr(after)) + " dB at " + fmt(mean_bpp(after)) +
             " bpp (+" + fmt(gain, 3) + " dB, need 5); " + fmt(m.train_seconds / 60, 3) + " min CPU");
}

void check_privilege(const ToyModel& masks, const ToyModel& grid, const std::vector<Sample>& held_out) {
  const double scale = 255.0 * 255.0;
  const double l_mm = mean_rd_loss(eval_rd(masks.model.net, masks.model.hash, held_out, RegionMode::masks, kGrid),
                                   kLambda, scale);
  const double l_mg = mean_rd_loss(eval_rd(masks.model.net, masks.model.hash, held_out, RegionMode::grid, kGrid),
                                   kLambda, scale);
  const double l_gg = mean_rd_loss(eval_rd(grid.model.net, grid.model.hash, held_out, RegionMode::grid, kGrid),
                                   kLambda, scale);
  const double gap = std::abs(l_mg - l_mm) / l_mm;
  report("privilege protocol", gap <= 0.05 && l_mg < l_gg,
         "mask-trained RD loss " + fmt(l_mm) + " with masks, " + fmt(l_mg) + " with 4x4 grid (gap " +
             fmt(100 * gap, 3) + "%, limit 5); grid-trained on grid " + fmt(l_gg) + " (mask-trained must be lower)");
}

void check_shapes() {
  const NetConfig cfg;
  Codec<float> net(cfg, 1);
  NoGradGuard ng;
  Rng rng(13);
  Tensor<float> x({3, 256, 256});
  for (auto& v : x.mutable_values()) v = static_cast<float>(rng.uniform());
  const auto levels = region_levels(grid_partition(256, 256, kGrid));
  const auto b = net.encode_features(x, levels, QuantMode::round, rng);
  auto d = [](std::size_t c, std::size_t h, std::size_t w) { return Shape{c, h, w}; };
  bool ok = b.y.shape() == d(320, 16, 16) && b.y_fine.shape() == d(192, 64, 64) && b.z.shape() == d(192, 4, 4);
  // Hyper path, layer by layer, at the default widths.
  const Shape enc[5] = {d(320, 16, 16), d(288, 16, 16), d(256, 8, 8), d(224, 8, 8), d(192, 4, 4)};
  const Shape dec[5] = {d(192, 4, 4), d(224, 8, 8), d(256, 8, 8), d(288, 16, 16), d(320, 16, 16)};
  const auto he = net.hyper_encoder_layers(b.y);
  for (std::size_t i = 0; i < 5; ++i) ok = ok && he[i].shape() == enc[i];
  for (bool means : {false, true}) {
    const auto hd = net.hyper_decoder_layers(means, b.z_hat);
    for (std::size_t i = 0; i < 5; ++i) ok = ok && hd[i].shape() == dec[i];
  }
  ok = ok && b.mu.shape() == b.y.shape() && b.sigma.shape() == b.y.shape();
  report("shape schedule", ok,
         "y " + shape_string(b.y.shape()) + ", y' " + shape_string(b.y_fine.shape()) + ", z " +
             shape_string(b.z.shape()) + ", hyper layers " + shape_string(he[0].shape()) + " ... " +
             shape_string(he[4].shape()));
}

}  // namespace

int main() {
  try {
    check_gradients();
    check_oracles();
    check_shapes();

    const auto train_data = synth_dataset(toy_train_file(RegionMode::masks).data);
    DatasetConfig held_cfg = toy_train_file(RegionMode::masks).data;
    held_cfg.count = kHeldOut;
    held_cfg.seed = 1001;
    const auto held_out = synth_dataset(held_cfg);
    const ToyModel masks = toy_model(RegionMode::masks, train_data);
    const ToyModel grid = toy_model(RegionMode::grid, train_data);

    check_entropy_coding(masks.model, held_out);
    check_rate_accounting(masks.model, held_out);
    check_training(masks, held_out);
    check_privilege(masks, grid, held_out);
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << (g_failures == 0 ? "all primary criteria pass" : std::to_string(g_failures) + " criteria failed")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
