#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "segpic/net.hpp"
#include "segpic/ops.hpp"

using namespace segpic;
using oracle::random_tensor;

namespace {

NetConfig small_config() {
  NetConfig c;
  c.N = 8;
  c.M = 12;
  c.fine_schedule = {8, 6, 4};
  c.coarse_schedule = {12, 8, 4};
  return c;
}

Shape dims(std::size_t c, std::size_t h, std::size_t w) { return Shape{c, h, w}; }

RegionMap random_map(std::size_t H, std::size_t W, std::size_t n, Rng& rng) {
  std::vector<std::uint32_t> raw(H * W);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<std::uint32_t>(i < n ? i : rng.index(n));
  return make_region_map(H, W, raw);
}

Tensor<float> random_image(std::size_t H, std::size_t W, Rng& rng) {
  Tensor<float> x({3, H, W});
  for (auto& v : x.mutable_values()) v = static_cast<float>(rng.uniform());
  return x;
}

}  // namespace

// Width schedule of the default network on a 256x256 input, layer by layer.
TEST(NetShapes, DefaultWidthsAt256) {
  const NetConfig cfg;
  EXPECT_EQ(cfg.N, 192u);
  EXPECT_EQ(cfg.M, 320u);
  Codec<float> net(cfg, 1);
  NoGradGuard ng;
  Rng rng(2);
  const auto x = random_image(256, 256, rng);
  const auto levels = region_levels(grid_partition(256, 256, 4));
  const auto b = net.encode_features(x, levels, QuantMode::round, rng);
  EXPECT_EQ(b.y_fine.shape(), dims(192, 64, 64));
  EXPECT_EQ(b.y.shape(), dims(320, 16, 16));
  EXPECT_EQ(b.z.shape(), dims(192, 4, 4));
  EXPECT_EQ(b.mu.shape(), b.y.shape());
  EXPECT_EQ(b.sigma.shape(), b.y.shape());
  EXPECT_EQ(b.fine.raw.shape(), (Shape{16, 192}));
  EXPECT_EQ(b.fine.code.shape(), (Shape{16, 96}));
  EXPECT_EQ(b.fine.recon.shape(), (Shape{16, 192}));
  EXPECT_EQ(b.coarse.raw.shape(), (Shape{16, 320}));
  EXPECT_EQ(b.coarse.code.shape(), (Shape{16, 96}));
  EXPECT_EQ(b.coarse.recon.shape(), (Shape{16, 320}));

  const auto enc = net.hyper_encoder_layers(b.y);
  const Shape enc_expect[5] = {dims(320, 16, 16), dims(288, 16, 16), dims(256, 8, 8), dims(224, 8, 8),
                               dims(192, 4, 4)};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(enc[i].shape(), enc_expect[i]) << "hyper encoder layer " << i;
  const Shape dec_expect[5] = {dims(192, 4, 4), dims(224, 8, 8), dims(256, 8, 8), dims(288, 16, 16),
                               dims(320, 16, 16)};
  for (bool means : {false, true}) {
    const auto dec = net.hyper_decoder_layers(means, b.z_hat);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(dec[i].shape(), dec_expect[i]) << "decoder layer " << i;
  }
  for (float s : b.sigma.values()) ASSERT_GT(s, 0.0f);

  const auto x_hat = net.decode_features(b.y_hat, b.fine.recon, levels);
  EXPECT_EQ(x_hat.shape(), x.shape());
}

TEST(NetShapes, TableDrivenSmallWidths) {
  Codec<float> net(small_config(), 3);
  NoGradGuard ng;
  Rng rng(4);
  for (auto [H, W] : {std::pair<std::size_t, std::size_t>{64, 64}, {64, 128}, {192, 64}}) {
    const auto x = random_image(H, W, rng);
    const auto levels = region_levels(random_map(H, W, 6, rng));
    const auto b = net.encode_features(x, levels, QuantMode::noise, rng);
    EXPECT_EQ(b.y_fine.shape(), dims(8, H / 4, W / 4));
    EXPECT_EQ(b.y.shape(), dims(12, H / 16, W / 16));
    EXPECT_EQ(b.z.shape(), dims(8, H / 64, W / 64));
    EXPECT_EQ(b.y_hat.shape(), b.y.shape());
    EXPECT_EQ(b.fine.recon.shape(), (Shape{levels.fine.map.count, 8}));
    EXPECT_EQ(b.coarse.recon.shape(), (Shape{levels.coarse.map.count, 12}));
    EXPECT_EQ(net.decode_features(b.y_hat, b.fine.recon, levels).shape(), x.shape());
  }
}

TEST(NetShapes, HyperWidthsInterpolate) {
  NetConfig c;
  const std::size_t expect[5] = {320, 288, 256, 224, 192};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(c.hyper_width(i), expect[i]);
}

TEST(NetShapes, RejectsBadSizes) {
  Codec<float> net(small_config(), 3);
  Rng rng(5);
  const auto levels = region_levels(grid_partition(64, 64, 2));
  EXPECT_THROW(net.encode_features(random_image(64, 96, rng), levels, QuantMode::round, rng), DimensionError);
  EXPECT_THROW(net.encode_features(random_image(128, 64, rng), levels, QuantMode::round, rng), DimensionError);
}

TEST(NetPrototypes, SingleRegionIsGlobalMean) {
  Codec<double> net(small_config(), 7);
  Rng rng(8);
  Tensor<double> x({3, 64, 64});
  for (auto& v : x.mutable_values()) v = rng.uniform();
  const auto levels = region_levels(grid_partition(64, 64, 1));
  const auto b = net.encode_features(x, levels, QuantMode::round, rng);
  ASSERT_EQ(b.fine.raw.shape(), (Shape{1, 8}));
  const std::size_t plane = 16 * 16;
  for (std::size_t c = 0; c < 8; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += b.y_fine[c * plane + i];
    EXPECT_NEAR(b.fine.raw[c], s / plane, 1e-12);
  }
}

TEST(NetPrototypes, DefaultScheduleWidths) {
  Codec<float> net(NetConfig{}, 1);
  Rng rng(9);
  const auto raw = random_tensor<float>({5, 192}, rng);
  const auto code = net.prototype_encode(ProtoLevel::fine, raw);
  EXPECT_EQ(code.shape(), (Shape{5, 96}));
  EXPECT_EQ(net.prototype_decode(ProtoLevel::fine, code).shape(), (Shape{5, 192}));
  const auto craw = random_tensor<float>({3, 320}, rng);
  const auto ccode = net.prototype_encode(ProtoLevel::coarse, craw);
  EXPECT_EQ(ccode.shape(), (Shape{3, 96}));
  EXPECT_EQ(net.prototype_decode(ProtoLevel::coarse, ccode).shape(), (Shape{3, 320}));
  EXPECT_THROW(net.prototype_encode(ProtoLevel::fine, craw), ConfigError);
  EXPECT_THROW(net.prototype_decode(ProtoLevel::coarse, raw), ConfigError);
}

TEST(NetPrototypes, ZeroInputWithZeroBiasesIsConstant) {
  Codec<double> net(small_config(), 10);
  for (auto& [name, e] : net.params().entries()) {
    if (name.rfind("proto.", 0) == 0 && name.size() > 5 && name.substr(name.size() - 5) == ".bias") {
      for (auto& v : net.params().get(name).mutable_values()) v = 0.0;
    }
  }
  const Tensor<double> zero({4, 8}, 0.0);
  const auto code = net.prototype_encode(ProtoLevel::fine, zero);
  for (double v : code.values()) EXPECT_EQ(v, 0.0);
  const auto recon = net.prototype_decode(ProtoLevel::fine, code);
  for (double v : recon.values()) EXPECT_EQ(v, recon[0]);
}

TEST(NetPrototypes, QuantizationErrorAtMostHalf) {
  Codec<double> net(small_config(), 11);
  // Spread the codes over many bins.
  net.params().get("proto.fine.log_gain").mutable_values()[0] = 3.0;
  net.params().get("proto.coarse.log_gain").mutable_values()[0] = 3.0;
  Rng rng(12);
  Tensor<double> x({3, 64, 64});
  for (auto& v : x.mutable_values()) v = rng.uniform();
  const auto levels = region_levels(random_map(64, 64, 20, rng));
  for (QuantMode mode : {QuantMode::round, QuantMode::noise}) {
    const auto b = net.encode_features(x, levels, mode, rng);
    for (const auto* br : {&b.fine, &b.coarse}) {
      for (std::size_t i = 0; i < br->code.numel(); ++i) {
        EXPECT_LE(std::abs(br->quantized[i] - br->code[i]), 0.5);
      }
    }
  }
}

TEST(NetHyper, SigmaPositiveAndShapes) {
  Codec<double> net(small_config(), 13);
  Rng rng(14);
  const auto y = random_tensor<double>({12, 8, 4}, rng, -3.0, 3.0);
  const auto z = net.hyper_encode(y);
  EXPECT_EQ(z.shape(), dims(8, 2, 1));
  const auto coarse = grid_partition(8, 4, 2);
  const auto protos = random_tensor<double>({coarse.count, 12}, rng);
  const auto g = net.hyper_decode(z, protos, coarse);
  EXPECT_EQ(g.mu.shape(), y.shape());
  EXPECT_EQ(g.sigma.shape(), y.shape());
  for (double s : g.sigma.values()) {
    EXPECT_GE(s, kSigmaMin);
    EXPECT_LE(s, kSigmaMax);
  }
}

TEST(NetDeterminism, RepeatedRunsBitIdentical) {
  Rng data(15);
  const auto x = random_image(64, 128, data);
  const auto levels = region_levels(random_map(64, 128, 6, data));
  Codec<float> a(small_config(), 16);
  Codec<float> b(small_config(), 16);
  Rng ra(17), rb(17);
  const auto pa = a.encode_features(x, levels, QuantMode::noise, ra);
  const auto pb = b.encode_features(x, levels, QuantMode::noise, rb);
  const auto xa = a.decode_features(pa.y_hat, pa.fine.recon, levels);
  const auto xb = b.decode_features(pb.y_hat, pb.fine.recon, levels);
  EXPECT_EQ(oracle::max_abs_diff(xa, xb), 0.0f);
  EXPECT_EQ(pa.bits_y.item(), pb.bits_y.item());
  EXPECT_EQ(pa.bits_fine.item(), pb.bits_fine.item());
}

TEST(NetDecoder, DecoderSideReconstructionMatchesEncoder) {
  Codec<float> net(small_config(), 18);
  NoGradGuard ng;
  Rng rng(19);
  const auto x = random_image(64, 64, rng);
  const auto levels = region_levels(random_map(64, 64, 5, rng));
  const auto b = net.encode_features(x, levels, QuantMode::round, rng);
  const auto enc_side = net.decode_features(b.y_hat, b.fine.recon, levels);

  // Rebuild everything the decoder would from integer symbols alone.
  const auto fp = net.prototype_entropy(ProtoLevel::fine);
  const auto loc = broadcast_channels(fp.loc, layout_rows(b.fine.code.shape()), b.fine.code.shape());
  const auto fine_q = from_symbols(to_symbols(b.fine.code, loc), loc);
  const auto fine_recon = net.prototype_decode(ProtoLevel::fine, fine_q);
  const auto y_hat = from_symbols(to_symbols(b.y, b.mu), b.mu);
  const auto dec_side = net.decode_features(y_hat, fine_recon, levels);
  EXPECT_EQ(oracle::max_abs_diff(enc_side, dec_side), 0.0f);
}

TEST(NetRegions, SameWeightsAcceptAnyRegionCount) {
  Codec<float> net(small_config(), 20);
  NoGradGuard ng;
  Rng rng(21);
  const auto x = random_image(128, 128, rng);
  std::vector<RegionMap> maps = {grid_partition(128, 128, 1), grid_partition(128, 128, 4),
                                 random_map(128, 128, kMaxRegions, rng)};
  for (const auto& rm : maps) {
    const auto levels = region_levels(rm);
    const auto b = net.encode_features(x, levels, QuantMode::round, rng);
    EXPECT_EQ(b.y.shape(), dims(12, 8, 8));
    EXPECT_EQ(net.decode_features(b.y_hat, b.fine.recon, levels).shape(), x.shape());
  }
}

TEST(NetTraining, EveryParameterReceivesGradient) {
  Codec<double> net(small_config(), 22);
  Rng rng(23);
  Tensor<double> x({3, 64, 64});
  for (auto& v : x.mutable_values()) v = rng.uniform();
  const auto levels = region_levels(random_map(64, 64, 6, rng));
  const auto b = net.encode_features(x, levels, QuantMode::noise, rng);
  const auto x_hat = net.decode_features(b.y_hat, b.fine.recon, levels);
  auto rate = add(add(b.bits_y, b.bits_z), add(b.bits_fine, b.bits_coarse));
  auto loss = add(mul_scalar(rate, 1.0 / 4096.0), mul_scalar(mse(x_hat, x), 100.0));
  loss.backward();
  for (const auto& [name, e] : net.params().entries()) {
    ASSERT_TRUE(e.tensor.has_grad()) << name;
    double m = 0.0;
    for (double g : e.tensor.grad()) m = std::max(m, std::abs(g));
    EXPECT_GT(m, 0.0) << name;
  }
}

TEST(NetConfigText, RoundTrip) {
  NetConfig c = small_config();
  c.grid_n = 3;
  c.normalize_kernels = false;
  const auto back = NetConfig::from_text(c.to_text());
  EXPECT_EQ(back.N, c.N);
  EXPECT_EQ(back.M, c.M);
  EXPECT_EQ(back.fine_schedule, c.fine_schedule);
  EXPECT_EQ(back.coarse_schedule, c.coarse_schedule);
  EXPECT_EQ(back.grid_n, 3u);
  EXPECT_FALSE(back.normalize_kernels);
  const auto defaults = NetConfig::from_text("version=1\n");
  EXPECT_EQ(defaults.fine_schedule, (std::vector<std::size_t>{192, 128, 96, 96}));
  EXPECT_EQ(defaults.coarse_schedule, (std::vector<std::size_t>{320, 192, 128, 96}));
}

TEST(NetConfigText, Errors) {
  EXPECT_THROW(NetConfig::from_text("N=8\n"), ConfigError);
  EXPECT_THROW(NetConfig::from_text("version=2\n"), ConfigError);
  EXPECT_THROW(NetConfig::from_text("version=1\nfoo=1\n"), ConfigError);
  EXPECT_THROW(NetConfig::from_text("version=1\nN=x\n"), ConfigError);
  EXPECT_THROW(NetConfig::from_text("version=1\nkernel=4\n"), ConfigError);
  // Schedule must start at the feature width.
  EXPECT_THROW(NetConfig::from_text("version=1\nfine_schedule=128,96\n"), ConfigError);
  EXPECT_THROW(NetConfig::from_text("version=1\nnoequals\n"), ConfigError);
}
