#include <gtest/gtest.h>

#include "oracles.hpp"
#include "segpic/grad_check.hpp"
#include "segpic/layers.hpp"
#include "segpic/ops.hpp"
#include "segpic/rat.hpp"

using namespace segpic;
using oracle::random_tensor;

namespace {

std::vector<Tensor<double>> all_params(ParamStore<double>& s) {
  std::vector<Tensor<double>> out;
  for (auto& [name, e] : s.entries()) out.push_back(e.tensor);
  return out;
}

std::vector<Tensor<double>> with(std::vector<Tensor<double>> v, std::initializer_list<Tensor<double>> extra) {
  v.insert(v.end(), extra);
  return v;
}

void fill(ParamStore<double>& s, const std::string& name, double value) {
  for (auto& v : s.get(name).mutable_values()) v = value;
}

RegionMap random_map(std::size_t H, std::size_t W, std::size_t n, Rng& rng) {
  std::vector<std::uint32_t> raw(H * W);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<std::uint32_t>(i < n ? i : rng.index(n));
  return make_region_map(H, W, raw);
}

}  // namespace

TEST(Dpsconv, DeltaKernelsAreIdentity) {
  Rng rng(1);
  auto x = random_tensor({3, 5, 4}, rng);
  Tensor<double> k({3, 5, 4, 3, 3}, 0.0);
  for (std::size_t p = 0; p < 60; ++p) k.mutable_values()[p * 9 + 4] = 1.0;
  EXPECT_EQ(oracle::max_abs_diff(dpsconv(x, k), x), 0.0);
}

TEST(Dpsconv, BoxKernelCenter) {
  Tensor<double> x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<double> k({1, 3, 3, 3, 3}, 1.0 / 9.0);
  EXPECT_NEAR(dpsconv(x, k)[4], 5.0, 1e-12);
  EXPECT_NEAR(dpsconv(x, k)[0], (1 + 2 + 4 + 5) / 9.0, 1e-12);
}

TEST(Dpsconv, MatchesNaiveLoop) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 1 + rng.index(5), H = 2 + rng.index(9), W = 2 + rng.index(9);
    const std::size_t k = trial % 3 == 2 ? 5 : 3;
    auto x = random_tensor({C, H, W}, rng);
    auto kern = random_tensor({C, H, W, k, k}, rng);
    EXPECT_LT(oracle::max_abs_diff(dpsconv(x, kern), oracle::dpsconv(x, kern)), 1e-6) << "trial " << trial;
  }
}

TEST(Dpsconv, ConstantKernelsEqualDepthwiseConv) {
  Rng rng(3);
  for (std::size_t C : {2u, 4u, 7u}) {
    auto x = random_tensor({C, 9, 8}, rng);
    auto w = random_tensor({C, 1, 3, 3}, rng);
    Tensor<double> k({C, 9, 8, 3, 3});
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t p = 0; p < 72; ++p) {
        for (std::size_t t = 0; t < 9; ++t) k.mutable_values()[(c * 72 + p) * 9 + t] = w[c * 9 + t];
      }
    }
    EXPECT_LT(oracle::max_abs_diff(dpsconv(x, k), conv2d(x, w, Tensor<double>(), 1, 1, C)), 1e-6);
  }
}

TEST(Dpsconv, MacCountIsLinearInWork) {
  // Exact count of in-bounds taps; zero padding removes the border ones.
  auto taps = [](std::size_t C, std::size_t H, std::size_t W, std::size_t k) {
    std::uint64_t n = 0;
    const long r = long(k / 2);
    for (long h = 0; h < long(H); ++h) {
      for (long w = 0; w < long(W); ++w) {
        for (long i = -r; i <= r; ++i) {
          for (long j = -r; j <= r; ++j) n += h + i >= 0 && h + i < long(H) && w + j >= 0 && w + j < long(W);
        }
      }
    }
    return n * C;
  };
  Rng rng(4);
  for (auto [C, H, W, k] : {std::tuple{2u, 8u, 8u, 3u}, std::tuple{4u, 8u, 8u, 3u}, std::tuple{2u, 16u, 8u, 5u}}) {
    auto x = oracle::to_float(random_tensor({C, H, W}, rng));
    Tensor<float> kern({C, H, W, k, k}, 0.1f);
    reset_dpsconv_mac_count();
    dpsconv(x, kern);
    EXPECT_EQ(dpsconv_mac_count(), taps(C, H, W, k));
    EXPECT_LE(dpsconv_mac_count(), std::uint64_t(C * H * W * k * k));
  }
  Tensor<float> k2({2, 8, 8, 3, 3}, 0.1f), k4({4, 8, 8, 3, 3}, 0.1f);
  reset_dpsconv_mac_count();
  dpsconv(Tensor<float>({2, 8, 8}, 1.0f), k2);
  const auto two = dpsconv_mac_count();
  reset_dpsconv_mac_count();
  dpsconv(Tensor<float>({4, 8, 8}, 1.0f), k4);
  EXPECT_EQ(dpsconv_mac_count(), 2 * two);
}

TEST(Dpsconv, ShapeMismatch) {
  EXPECT_THROW(dpsconv(Tensor<double>({2, 4, 4}), Tensor<double>({2, 4, 5, 3, 3})), DimensionError);
  EXPECT_THROW(dpsconv(Tensor<double>({2, 4, 4}), Tensor<double>({2, 4, 4, 2, 2})), DimensionError);
}

TEST(DpsconvBackward, ClosedFormsAndFiniteDifferences) {
  Tensor<double> x({1, 4, 4}, 0.75);
  Tensor<double> k({1, 4, 4, 3, 3}, 0.2);
  std::vector<double> ones(16, 1.0), zeros(16, 0.0);
  auto g = dpsconv_backward<double>(ones, x, k);
  // Interior pixel (1,1): every tap sees the constant.
  for (std::size_t t = 0; t < 9; ++t) EXPECT_DOUBLE_EQ(g.kernels[(1 * 4 + 1) * 9 + t], 0.75);
  // Corner (0,0): the top-left tap reads padding.
  EXPECT_DOUBLE_EQ(g.kernels[0], 0.0);
  auto z = dpsconv_backward<double>(zeros, x, k);
  for (double v : z.x) EXPECT_EQ(v, 0.0);
  for (double v : z.kernels) EXPECT_EQ(v, 0.0);

  Rng rng(5);
  for (auto [C, H, W] : {std::tuple{2u, 5u, 4u}, std::tuple{3u, 6u, 6u}, std::tuple{1u, 3u, 7u}}) {
    auto xr = random_tensor({C, H, W}, rng);
    auto kr = random_tensor({C, H, W, 3, 3}, rng);
    auto probe = random_tensor({C, H, W}, rng);
    EXPECT_LT(grad_check([&] { return sum(mul(dpsconv(xr, kr), probe)); }, {xr, kr}).max_relative_error, 1e-4);
  }
}

TEST(Sal, AffineIdentityAndConstant) {
  Rng rng(6);
  ParamStore<double> s;
  add_sal(s, "sal", 3, rng);
  auto x = random_tensor({3, 4, 5}, rng);
  fill(s, "sal.scale.1.weight", 0.0);
  fill(s, "sal.scale.1.bias", 1.0);
  fill(s, "sal.bias.1.weight", 0.0);
  fill(s, "sal.bias.1.bias", 0.0);
  EXPECT_LT(oracle::max_abs_diff(sal(s, "sal", x), x), 1e-15);
  fill(s, "sal.scale.1.bias", 0.0);
  fill(s, "sal.bias.1.bias", 0.25);
  auto y = sal(s, "sal", x);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Sal, GradCheck) {
  Rng rng(7);
  for (std::size_t C : {2u, 3u, 5u}) {
    ParamStore<double> s;
    add_sal(s, "sal", C, rng);
    auto x = random_tensor({C, 4, 3}, rng);
    auto probe = random_tensor({C, 4, 3}, rng);
    auto r = grad_check([&] { return sum(mul(sal(s, "sal", x), probe)); }, with(all_params(s), {x}));
    EXPECT_LT(r.max_relative_error, 1e-4) << C;
  }
}

class RatFixture : public ::testing::Test {
 protected:
  void build(std::size_t C, std::size_t P, bool normalize = true) {
    cfg = RatConfig{C, P, 3, normalize};
    store = ParamStore<double>();
    add_rat(store, "rat.t", cfg, rng);
  }
  Rng rng{8};
  RatConfig cfg;
  ParamStore<double> store;
};

TEST_F(RatFixture, CtlShapeZeroWeightsAndGradients) {
  build(4, 3);
  auto x = random_tensor({4, 5, 6}, rng);
  EXPECT_EQ(ctl(store, "rat.t", x).shape(), x.shape());
  fill(store, "rat.t.ctl.1.weight", 0.0);
  fill(store, "rat.t.ctl.1.bias", -0.5);
  auto y = ctl(store, "rat.t", x);
  for (double v : y.values()) EXPECT_EQ(v, -0.5);
  for (std::size_t C : {2u, 4u, 6u}) {
    build(C, 2);
    auto xr = random_tensor({C, 4, 4}, rng);
    auto probe = random_tensor({C, 4, 4}, rng);
    EXPECT_LT(grad_check([&] { return sum(mul(ctl(store, "rat.t", xr), probe)); }, with(all_params(store), {xr}))
                  .max_relative_error,
              1e-4);
  }
}

TEST_F(RatFixture, DkgShapeUniformityAndGradients) {
  build(4, 3);
  auto fused = random_tensor({7, 6, 5}, rng);
  EXPECT_EQ(dkg(store, "rat.t", cfg, fused).shape(), (Shape{4, 6, 5, 3, 3}));
  EXPECT_THROW(dkg(store, "rat.t", cfg, random_tensor({6, 6, 5}, rng)), DimensionError);

  // Spatially uniform input gives the same kernel at every pixel whose 3x3
  // neighbourhood lies inside the image.
  std::vector<double> vals(7 * 36);
  for (std::size_t c = 0; c < 7; ++c) std::fill_n(vals.begin() + c * 36, 36, 0.1 * double(c) - 0.3);
  auto k = dkg(store, "rat.t", cfg, Tensor<double>({7, 6, 6}, vals));
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t h = 1; h < 5; ++h) {
      for (std::size_t w = 1; w < 5; ++w) {
        for (std::size_t t = 0; t < 9; ++t) {
          EXPECT_NEAR(k[((c * 6 + h) * 6 + w) * 9 + t], k[((c * 6 + 1) * 6 + 1) * 9 + t], 1e-12);
        }
      }
    }
  }
  // Softmax-normalized taps sum to one.
  double s = 0;
  for (std::size_t t = 0; t < 9; ++t) s += k[t];
  EXPECT_NEAR(s, 1.0, 1e-12);

  for (bool normalize : {true, false}) {
    for (auto [C, P] : {std::pair{2u, 2u}, std::pair{3u, 1u}, std::pair{4u, 3u}}) {
      build(C, P, normalize);
      auto f = random_tensor({C + P, 4, 4}, rng);
      auto probe = random_tensor({C, 4, 4, 3, 3}, rng);
      auto r = grad_check([&] { return sum(mul(dkg(store, "rat.t", cfg, f), probe)); }, with(all_params(store), {f}));
      EXPECT_LT(r.max_relative_error, 1e-4) << C << " " << P << " " << normalize;
    }
  }
}

TEST_F(RatFixture, CagRangeHalfAndGradients) {
  build(8, 3);
  auto fused = random_tensor({11, 4, 4}, rng, -3.0, 3.0);
  auto a = cag(store, "rat.t", fused);
  ASSERT_EQ(a.shape(), (Shape{8}));
  for (double v : a.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  fill(store, "rat.t.cag.fc1.weight", 0.0);
  fill(store, "rat.t.cag.fc1.bias", 0.0);
  auto half = cag(store, "rat.t", fused);
  for (double v : half.values()) EXPECT_EQ(v, 0.5);
  for (auto [C, P] : {std::pair{4u, 2u}, std::pair{8u, 3u}, std::pair{5u, 5u}}) {
    build(C, P);
    auto f = random_tensor({C + P, 3, 5}, rng);
    auto probe = random_tensor({C}, rng);
    EXPECT_LT(grad_check([&] { return sum(mul(cag(store, "rat.t", f), probe)); }, with(all_params(store), {f}))
                  .max_relative_error,
              1e-4);
  }
}

TEST_F(RatFixture, ForwardShapeAndGridOrMaskSwap) {
  build(4, 3);
  auto x = random_tensor({4, 8, 8}, rng);
  auto one = rat_forward(store, "rat.t", cfg, x, random_tensor({1, 3}, rng), grid_partition(8, 8, 1));
  auto grid = rat_forward(store, "rat.t", cfg, x, random_tensor({16, 3}, rng), grid_partition(8, 8, 4));
  EXPECT_EQ(one.shape(), x.shape());
  EXPECT_EQ(grid.shape(), x.shape());
  EXPECT_THROW(rat_forward(store, "rat.t", cfg, x, random_tensor({3, 3}, rng), grid_partition(8, 8, 4)),
               DimensionError);
}

TEST_F(RatFixture, PermutingLabelsLeavesOutputUnchanged) {
  build(4, 3);
  auto x = random_tensor({4, 8, 8}, rng);
  auto rm = random_map(8, 8, 5, rng);
  auto p = random_tensor({5, 3}, rng);
  const std::vector<std::uint32_t> perm{3, 0, 4, 1, 2};
  RegionMap permuted = rm;
  for (auto& l : permuted.labels) l = perm[l];
  Tensor<double> pp({5, 3});
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 0; c < 3; ++c) pp.mutable_values()[perm[i] * 3 + c] = p[i * 3 + c];
  }
  EXPECT_LT(oracle::max_abs_diff(rat_forward(store, "rat.t", cfg, x, p, rm),
                                 rat_forward(store, "rat.t", cfg, x, pp, permuted)),
            1e-6);
}

TEST_F(RatFixture, EndToEndGradCheckThroughPooledPrototypes) {
  for (auto [C, P, n] : {std::tuple{3u, 2u, 3u}, std::tuple{4u, 3u, 4u}, std::tuple{2u, 4u, 2u}}) {
    build(C, P);
    auto x = random_tensor({C, 6, 6}, rng);
    auto feat = random_tensor({P, 6, 6}, rng);
    auto rm = random_map(6, 6, n, rng);
    auto probe = random_tensor({C, 6, 6}, rng);
    auto r = grad_check(
        [&] { return sum(mul(rat_forward(store, "rat.t", cfg, x, masked_average_pool(feat, rm).vectors, rm), probe)); },
        with(all_params(store), {x, feat}));
    EXPECT_LT(r.max_relative_error, 1e-4) << C << " " << P << " " << n;
  }
}
