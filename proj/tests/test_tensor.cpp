#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "segpic/grad_check.hpp"
#include "segpic/ops.hpp"
#include "segpic/param_store.hpp"

using namespace segpic;
using oracle::random_tensor;

namespace {

Tensor<double> empty_bias() { return Tensor<double>(); }

}  // namespace

TEST(Conv2d, AllOnesCountsOverlap) {
  Tensor<double> x({1, 3, 3}, 1.0);
  Tensor<double> w({1, 1, 3, 3}, 1.0);
  Tensor<double> b({1}, 0.0);
  auto y = conv2d(x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3}));
  EXPECT_DOUBLE_EQ(y[4], 9.0);
  EXPECT_DOUBLE_EQ(y[0], 4.0);
  EXPECT_DOUBLE_EQ(y[8], 4.0);
  EXPECT_DOUBLE_EQ(y[1], 6.0);
}

TEST(Conv2d, IdentityKernelReturnsInput) {
  Rng rng(3);
  auto x = random_tensor({2, 5, 6}, rng);
  Tensor<double> w({2, 1, 3, 3}, 0.0);
  w.mutable_values()[4] = 1.0;
  w.mutable_values()[9 + 4] = 1.0;
  auto y = conv2d(x, w, empty_bias(), 1, 1, 2);
  EXPECT_EQ(oracle::max_abs_diff(x, y), 0.0);
}

TEST(Conv2d, GroupedEqualsIndependentConvolutions) {
  Rng rng(11);
  auto x = random_tensor({2, 4, 4}, rng);
  auto w = random_tensor({2, 1, 3, 3}, rng);
  auto b = random_tensor({2}, rng);
  auto y = conv2d(x, w, b, 1, 1, 2);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<double> xc(x.values().begin() + c * 16, x.values().begin() + (c + 1) * 16);
    std::vector<double> wc(w.values().begin() + c * 9, w.values().begin() + (c + 1) * 9);
    auto yc = conv2d(Tensor<double>({1, 4, 4}, xc), Tensor<double>({1, 1, 3, 3}, wc),
                     Tensor<double>({1}, {b[c]}), 1, 1, 1);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[c * 16 + i], yc[i], 1e-6);
  }
}

TEST(Conv2d, MatchesNaiveLoopAcrossGeometries) {
  Rng rng(5);
  struct Case {
    std::size_t C, H, W, O, k, s, p, g;
  };
  for (Case c : {Case{3, 9, 7, 4, 5, 2, 2, 1}, Case{4, 8, 8, 6, 3, 1, 1, 2},
                 Case{6, 6, 5, 6, 3, 1, 1, 6}, Case{5, 4, 4, 3, 1, 1, 0, 1},
                 Case{2, 10, 10, 4, 3, 2, 1, 2}}) {
    auto x = random_tensor({c.C, c.H, c.W}, rng);
    auto w = random_tensor({c.O, c.C / c.g, c.k, c.k}, rng);
    auto b = random_tensor({c.O}, rng);
    std::size_t Ho, Wo;
    auto ref = oracle::conv2d({x.values().begin(), x.values().end()}, c.C, c.H, c.W,
                              {w.values().begin(), w.values().end()}, c.O, c.k,
                              {b.values().begin(), b.values().end()}, c.s, c.p, c.g, Ho, Wo);
    auto y = conv2d(x, w, b, c.s, c.p, c.g);
    ASSERT_EQ(y.shape(), (Shape{c.O, Ho, Wo}));
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-6);
  }
}

TEST(Conv2d, DepthwiseEqualsPerChannelConvolution) {
  Rng rng(21);
  for (std::size_t C : {3u, 5u, 8u}) {
    auto x = random_tensor({C, 7, 6}, rng);
    auto w = random_tensor({C, 1, 3, 3}, rng);
    auto y = conv2d(x, w, empty_bias(), 1, 1, C);
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> xc(x.values().begin() + c * 42, x.values().begin() + (c + 1) * 42);
      std::vector<double> wc(w.values().begin() + c * 9, w.values().begin() + (c + 1) * 9);
      auto yc = conv2d(Tensor<double>({1, 7, 6}, xc), Tensor<double>({1, 1, 3, 3}, wc),
                       empty_bias(), 1, 1, 1);
      for (std::size_t i = 0; i < 42; ++i) EXPECT_NEAR(y[c * 42 + i], yc[i], 1e-6);
    }
  }
}

TEST(Conv2d, ShapeErrors) {
  Tensor<double> x({3, 8, 8}, 1.0);
  EXPECT_THROW(conv2d(x, Tensor<double>({4, 2, 3, 3}, 1.0), empty_bias(), 1, 1), DimensionError);
  EXPECT_THROW(conv2d(x, Tensor<double>({4, 3, 3, 3}, 1.0), empty_bias(), 1, 1, 2), DimensionError);
  EXPECT_THROW(conv2d(x, Tensor<double>({4, 3, 2, 2}, 1.0), empty_bias(), 1, 1), DimensionError);
  EXPECT_THROW(conv2d(x, Tensor<double>({4, 3, 3, 3}, 1.0), Tensor<double>({3}, 0.0), 1, 1),
               DimensionError);
}

TEST(Conv2d, ForwardIsBitIdenticalAcrossRuns) {
  Rng rng(8);
  auto x = oracle::to_float(random_tensor({8, 16, 16}, rng));
  auto w = oracle::to_float(random_tensor({12, 8, 3, 3}, rng));
  auto a = conv2d(x, w, Tensor<float>(), 2, 1);
  auto b = conv2d(x, w, Tensor<float>(), 2, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]);
}

TEST(Conv2dTranspose, DoublesSpatialSize) {
  Tensor<double> x({4, 8, 8}, 0.5);
  Tensor<double> w({4, 3, 5, 5}, 0.1);
  EXPECT_EQ(conv2d_transpose(x, w, empty_bias(), 2, 2).shape(), (Shape{3, 16, 16}));
  Tensor<double> w3({4, 3, 3, 3}, 0.1);
  EXPECT_EQ(conv2d_transpose(x, w3, empty_bias(), 2, 1).shape(), (Shape{3, 16, 16}));
}

TEST(Conv2dTranspose, IdentityKernelStrideOne) {
  Rng rng(2);
  auto x = random_tensor({1, 6, 5}, rng);
  Tensor<double> w({1, 1, 3, 3}, 0.0);
  w.mutable_values()[4] = 1.0;
  auto y = conv2d_transpose(x, w, empty_bias(), 1, 1);
  EXPECT_EQ(oracle::max_abs_diff(x, y), 0.0);
}

TEST(Conv2dTranspose, RejectsNonInvertibleGeometry) {
  Tensor<double> x({2, 8, 8}, 1.0);
  EXPECT_THROW(conv2d_transpose(x, Tensor<double>({2, 2, 3, 3}, 1.0), empty_bias(), 2, 0),
               DimensionError);
  EXPECT_THROW(conv2d_transpose(x, Tensor<double>({2, 2, 3, 3}, 1.0), empty_bias(), 3, 1),
               DimensionError);
}

TEST(Conv2dTranspose, MatchesScatterOracleAndConvAdjoint) {
  Rng rng(13);
  for (auto [k, s, p] : {std::tuple{5u, 2u, 2u}, std::tuple{3u, 2u, 1u}, std::tuple{3u, 1u, 1u}}) {
    const std::size_t C = 3, O = 4, H = 5, W = 6;
    auto x = random_tensor({C, H, W}, rng);
    auto w = random_tensor({C, O, k, k}, rng);
    auto b = random_tensor({O}, rng);
    auto y = conv2d_transpose(x, w, b, s, p);
    auto ref = oracle::conv2d_transpose({x.values().begin(), x.values().end()}, C, H, W,
                                        {w.values().begin(), w.values().end()}, O, k,
                                        {b.values().begin(), b.values().end()}, s, p);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-9);

    // Transposed conv is the input-gradient of conv2d: d/du <conv(u), x> = convT(x).
    Tensor<double> u({O, s * H, s * W}, 0.0);
    u.set_requires_grad(true);
    Tensor<double> wc(Shape{C, O, k, k}, std::vector<double>(w.values().begin(), w.values().end()));
    auto loss = sum(mul(conv2d(u, wc, empty_bias(), s, p), x));
    loss.backward();
    auto yt = conv2d_transpose(x, w, empty_bias(), s, p);
    for (std::size_t i = 0; i < yt.numel(); ++i) ASSERT_NEAR(u.grad()[i], yt[i], 1e-9);
  }
}

TEST(Activation, ReferenceValues) {
  EXPECT_DOUBLE_EQ(gelu(Tensor<double>({1}, {0.0}))[0], 0.0);
  EXPECT_NEAR(leaky_relu(Tensor<double>({1}, {-2.0}))[0], -0.02, 1e-15);
  EXPECT_DOUBLE_EQ(leaky_relu(Tensor<double>({1}, {3.0}))[0], 3.0);
  const double phi1 = static_cast<double>(oracle::normal_cdf_quadrature(1.0L));
  EXPECT_NEAR(phi1, 0.841345, 5e-7);
  EXPECT_NEAR(gelu(Tensor<double>({1}, {1.0}))[0], phi1, 1e-12);
  EXPECT_NEAR(gelu(Tensor<float>({1}, {1.0f}))[0], 0.841345f, 1e-6f);
  EXPECT_DOUBLE_EQ(sigmoid(Tensor<double>({1}, {0.0}))[0], 0.5);
}

TEST(Gdn, ZeroInputGivesZero) {
  Tensor<double> x({3, 2, 2}, 0.0);
  Tensor<double> beta({3}, 1.0);
  Tensor<double> gamma({3, 3}, 0.1);
  auto y = gdn(x, beta, gamma, false);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Gdn, UnitBetaZeroGammaIsIdentity) {
  Rng rng(4);
  auto x = random_tensor({1, 3, 3}, rng);
  Tensor<double> beta({1}, 1.0);
  Tensor<double> gamma({1, 1}, 0.0);
  EXPECT_EQ(oracle::max_abs_diff(gdn(x, beta, gamma, false), x), 0.0);
  EXPECT_EQ(oracle::max_abs_diff(gdn(x, beta, gamma, true), x), 0.0);
}

TEST(Gdn, MatchesScalarLoop) {
  Rng rng(6);
  auto x = random_tensor({2, 3, 4}, rng);
  auto beta = random_tensor({2}, rng, 0.5, 1.5);
  auto gamma = random_tensor({2, 2}, rng, 0.0, 0.5);
  for (bool inverse : {false, true}) {
    auto y = gdn(x, beta, gamma, inverse);
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t p = 0; p < 12; ++p) {
        double norm = beta[c];
        for (std::size_t j = 0; j < 2; ++j) norm += gamma[c * 2 + j] * x[j * 12 + p] * x[j * 12 + p];
        const double expect = inverse ? x[c * 12 + p] * std::sqrt(norm) : x[c * 12 + p] / std::sqrt(norm);
        EXPECT_NEAR(y[c * 12 + p], expect, 1e-6);
      }
    }
  }
}

TEST(Gdn, NonPositiveDenominatorIsNumericError) {
  Tensor<double> x({1, 1, 1}, 1.0);
  EXPECT_THROW(gdn(x, Tensor<double>({1}, -2.0), Tensor<double>({1, 1}, 0.0), false), NumericError);
}

TEST(Linear, IdentityConstantAndMatmul) {
  Rng rng(9);
  auto x = random_tensor({5, 4}, rng);
  Tensor<double> eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_values()[i * 5] = 1.0;
  EXPECT_EQ(oracle::max_abs_diff(linear(x, eye, Tensor<double>({4}, 0.0)), x), 0.0);

  auto c = linear(x, Tensor<double>({3, 4}, 0.0), Tensor<double>({3}, 2.5));
  for (double v : c.values()) EXPECT_EQ(v, 2.5);

  auto w = random_tensor({3, 4}, rng);
  auto b = random_tensor({3}, rng);
  auto y = linear(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{5, 3}));
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < 4; ++i) acc += x[r * 4 + i] * w[o * 4 + i];
      EXPECT_NEAR(y[r * 3 + o], acc, 1e-12);
    }
  }
  EXPECT_THROW(linear(x, Tensor<double>({3, 5}, 0.0), Tensor<double>()), DimensionError);
}

TEST(GlobalAvgPool, MeansPerChannel) {
  auto ones = global_avg_pool(Tensor<double>({3, 4, 4}, 1.0));
  for (double v : ones.values()) EXPECT_DOUBLE_EQ(v, 1.0);
  auto single = global_avg_pool(Tensor<double>({2, 1, 1}, {0.25, -3.0}));
  EXPECT_DOUBLE_EQ(single[0], 0.25);
  EXPECT_DOUBLE_EQ(single[1], -3.0);
  Rng rng(10);
  auto x = random_tensor({3, 5, 7}, rng);
  auto g = global_avg_pool(x);
  for (std::size_t c = 0; c < 3; ++c) {
    long double s = 0;
    for (std::size_t i = 0; i < 35; ++i) s += x[c * 35 + i];
    EXPECT_NEAR(g[c], static_cast<double>(s / 35), 1e-12);
  }
}

TEST(Backward, SumAndSquare) {
  Tensor<double> x({2, 3}, 1.5);
  x.set_requires_grad(true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tensor<double> y({1}, 3.0);
  y.set_requires_grad(true);
  sum(square(y)).backward();
  EXPECT_DOUBLE_EQ(y.grad()[0], 6.0);
}

TEST(Backward, DisconnectedParameterKeepsNoGradient) {
  Tensor<double> used({2}, 1.0), unused({2}, 1.0);
  used.set_requires_grad(true);
  unused.set_requires_grad(true);
  sum(used).backward();
  EXPECT_TRUE(used.has_grad());
  EXPECT_FALSE(unused.has_grad());
}

TEST(Backward, ConvGeluSumMatchesFiniteDifferences) {
  Rng rng(12);
  auto x = random_tensor({3, 6, 6}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
  auto b = random_tensor({4}, rng);
  auto r = grad_check([&] { return sum(gelu(conv2d(x, w, b, 1, 1))); }, {x, w, b});
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_EQ(r.elements_checked, x.numel() + w.numel() + b.numel());
}

TEST(GradCheck, LinearGdnAndConstantGraph) {
  Rng rng(14);
  auto x = random_tensor({4, 3}, rng);
  auto w = random_tensor({2, 3}, rng);
  auto b = random_tensor({2}, rng);
  EXPECT_LT(grad_check([&] { return sum(square(linear(x, w, b))); }, {x, w, b}).max_relative_error, 1e-6);

  auto xg = random_tensor({3, 4, 4}, rng);
  auto beta = random_tensor({3}, rng, 0.5, 1.5);
  auto gamma = random_tensor({3, 3}, rng, 0.0, 0.3);
  for (bool inverse : {false, true}) {
    auto r = grad_check([&] { return sum(mul(gdn(xg, beta, gamma, inverse), xg)); }, {xg, beta, gamma});
    EXPECT_LT(r.max_relative_error, 1e-4);
  }

  Tensor<double> c({3}, 2.0);
  EXPECT_EQ(grad_check([&] { return sum(Tensor<double>({2}, 1.0)); }, {c}).max_relative_error, 0.0);
}

// Every differentiable op, three random shapes each.
TEST(GradCheck, EveryOpOnRandomShapes) {
  Rng rng(15);
  const std::vector<std::array<std::size_t, 3>> shapes{{2, 5, 4}, {3, 6, 6}, {4, 3, 7}};
  for (auto [C, H, W] : shapes) {
    auto x = random_tensor({C, H, W}, rng);
    auto y = random_tensor({C, H, W}, rng);
    auto probe = random_tensor({C, H, W}, rng);
    auto s = random_tensor({C}, rng);
    auto wsq = [&](const Tensor<double>& t) {
      return sum(mul(t, Tensor<double>(t.shape(), std::vector<double>(probe.values().begin(),
                                                                      probe.values().begin() + t.numel()))));
    };
    auto check = [&](const char* what, const LossBuilder& f, std::vector<Tensor<double>> in) {
      auto r = grad_check(f, std::move(in));
      EXPECT_LT(r.max_relative_error, 1e-4) << what << " at " << C << "x" << H << "x" << W;
    };
    check("add", [&] { return wsq(add(x, y)); }, {x, y});
    check("sub", [&] { return wsq(sub(x, y)); }, {x, y});
    check("mul", [&] { return wsq(mul(x, y)); }, {x, y});
    check("scalar", [&] { return wsq(mul_scalar(add_scalar(x, 0.3), -1.7)); }, {x});
    check("exp", [&] { return wsq(exp(x)); }, {x});
    check("clamp", [&] { return wsq(clamp(x, -0.5, 0.5)); }, {x});
    check("mse", [&] { return mse(x, y); }, {x, y});
    check("mean", [&] { return mean(square(x)); }, {x});
    check("gelu", [&] { return wsq(gelu(x)); }, {x});
    check("leaky", [&] { return wsq(leaky_relu(x)); }, {x});
    check("sigmoid", [&] { return wsq(sigmoid(x)); }, {x});
    check("mul_channels", [&] { return wsq(mul_channels(x, s)); }, {x, s});
    check("concat", [&] { return sum(square(concat_channels(x, y))); }, {x, y});
    check("gap", [&] { return sum(mul(global_avg_pool(x), s)); }, {x, s});
    check("reshape", [&] { return wsq(reshape(square(x), {C * H * W})); }, {x});
    auto wconv = random_tensor({3, C, 3, 3}, rng, -0.5, 0.5);
    auto bconv = random_tensor({3}, rng);
    check("conv s2", [&] { return sum(square(conv2d(x, wconv, bconv, 2, 1))); }, {x, wconv, bconv});
    auto wdw = random_tensor({C, 1, 3, 3}, rng, -0.5, 0.5);
    check("conv dw", [&] { return wsq(conv2d(x, wdw, Tensor<double>(), 1, 1, C)); }, {x, wdw});
    auto wt = random_tensor({C, 2, 5, 5}, rng, -0.5, 0.5);
    auto bt = random_tensor({2}, rng);
    check("tconv", [&] { return sum(square(conv2d_transpose(x, wt, bt, 2, 2))); }, {x, wt, bt});
    auto wl = random_tensor({5, W}, rng);
    auto bl = random_tensor({5}, rng);
    check("linear", [&] { return sum(square(linear(x, wl, bl))); }, {x, wl, bl});
    auto beta = random_tensor({C}, rng, 0.5, 1.5);
    auto gamma = random_tensor({C, C}, rng, 0.0, 0.3);
    check("gdn", [&] { return wsq(gdn(x, beta, gamma, false)); }, {x, beta, gamma});
    check("igdn", [&] { return wsq(gdn(x, beta, gamma, true)); }, {x, beta, gamma});
    auto grouped = random_tensor({C * 3, H, W}, rng);
    auto weights = random_tensor({C, H, W, 3}, rng);
    check("softmax", [&] { return sum(mul(softmax_last(group_to_last(grouped, 3), 3), weights)); },
          {grouped});
  }
}

TEST(ParamStore, SerializationRoundTripAndLayout) {
  Rng rng(16);
  ParamStore<float> store;
  init_uniform(store.add("b.weight", {3, 2}), 1.0, rng);
  init_uniform(store.add("a.bias", {4}), 1.0, rng);
  init_uniform(store.add("scalar", {}), 1.0, rng);
  auto bytes = store.serialize();
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SPW1");
  EXPECT_EQ(bytes[4], 3);
  // Sorted by name: "a.bias" first, u16 length 6.
  EXPECT_EQ(bytes[8], 6);
  EXPECT_EQ(std::string(bytes.begin() + 10, bytes.begin() + 16), "a.bias");

  ParamStore<float> other;
  other.add("b.weight", {3, 2});
  other.add("a.bias", {4});
  other.add("scalar", {});
  other.deserialize(bytes);
  EXPECT_EQ(other.serialize(), bytes);
  EXPECT_EQ(fnv1a64(other.serialize()), fnv1a64(bytes));

  ParamStore<float> wrong;
  wrong.add("b.weight", {2, 3});
  wrong.add("a.bias", {4});
  wrong.add("scalar", {});
  EXPECT_THROW(wrong.deserialize(bytes), ConfigError);
  auto corrupt = bytes;
  corrupt[0] = 'X';
  EXPECT_THROW(other.deserialize(corrupt), ParseError);
  corrupt = bytes;
  corrupt.pop_back();
  EXPECT_THROW(other.deserialize(corrupt), ParseError);
  EXPECT_THROW(store.add("a.bias", {1}), ConfigError);
}

TEST(Fnv1a, KnownVector) {
  // FNV-1a 64 of "a" is 0xaf63dc4c8601ec8c.
  EXPECT_EQ(fnv1a64({'a'}), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ull);
}
