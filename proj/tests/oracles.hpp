#pragma once

// Naive reference implementations used only by tests. They index straight
// from the textbook definitions and share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "segpic/metrics.hpp"
#include "segpic/region.hpp"
#include "segpic/rng.hpp"
#include "segpic/tensor.hpp"

namespace oracle {

using segpic::Shape;
using segpic::Tensor;

template <typename T = double>
Tensor<T> random_tensor(Shape shape, segpic::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(segpic::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v));
}

inline Tensor<float> to_float(const Tensor<double>& t) {
  std::vector<float> v(t.values().begin(), t.values().end());
  return Tensor<float>(t.shape(), std::move(v));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// out[o,y,x] = b[o] + sum_{c in group, i, j} x[c, y*s-p+i, x*s-p+j] * w[o, c', i, j]
inline std::vector<double> conv2d(const std::vector<double>& x, std::size_t C, std::size_t H,
                                  std::size_t W, const std::vector<double>& w, std::size_t O,
                                  std::size_t k, const std::vector<double>& b, std::size_t s,
                                  std::size_t p, std::size_t g, std::size_t& Ho, std::size_t& Wo) {
  Ho = (H + 2 * p - k) / s + 1;
  Wo = (W + 2 * p - k) / s + 1;
  const std::size_t Cg = C / g, Og = O / g;
  std::vector<double> out(O * Ho * Wo, 0.0);
  for (std::size_t o = 0; o < O; ++o) {
    const std::size_t grp = o / Og;
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        double acc = b.empty() ? 0.0 : b[o];
        for (std::size_t cc = 0; cc < Cg; ++cc) {
          const std::size_t c = grp * Cg + cc;
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              const long iy = long(y * s) - long(p) + long(i);
              const long ix = long(xx * s) - long(p) + long(j);
              if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
              acc += x[(c * H + iy) * W + ix] * w[((o * Cg + cc) * k + i) * k + j];
            }
          }
        }
        out[(o * Ho + y) * Wo + xx] = acc;
      }
    }
  }
  return out;
}

// Scatter form of the transposed convolution: every input pixel spreads its
// value through the kernel onto a stride-s output grid.
inline std::vector<double> conv2d_transpose(const std::vector<double>& x, std::size_t C,
                                            std::size_t H, std::size_t W,
                                            const std::vector<double>& w, std::size_t O,
                                            std::size_t k, const std::vector<double>& b,
                                            std::size_t s, std::size_t p) {
  const std::size_t Ho = s * H, Wo = s * W;
  std::vector<double> out(O * Ho * Wo, 0.0);
  for (std::size_t o = 0; o < O; ++o) {
    for (std::size_t i = 0; i < Ho * Wo; ++i) out[o * Ho * Wo + i] = b.empty() ? 0.0 : b[o];
  }
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t xx = 0; xx < W; ++xx) {
        const double v = x[(c * H + y) * W + xx];
        for (std::size_t o = 0; o < O; ++o) {
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              const long oy = long(y * s) - long(p) + long(i);
              const long ox = long(xx * s) - long(p) + long(j);
              if (oy < 0 || ox < 0 || oy >= long(Ho) || ox >= long(Wo)) continue;
              out[(o * Ho + oy) * Wo + ox] += v * w[((c * O + o) * k + i) * k + j];
            }
          }
        }
      }
    }
  }
  return out;
}

// Standard normal CDF by composite Simpson integration of the density.
inline long double normal_cdf_quadrature(long double x) {
  const long double pi = 3.141592653589793238462643383279502884L;
  const int n = 200000;
  const long double h = x / n;
  long double s = 0;
  for (int i = 0; i <= n; ++i) {
    const long double t = h * i;
    const long double f = std::exp(-0.5L * t * t) / std::sqrt(2.0L * pi);
    s += f * ((i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2));
  }
  return 0.5L + s * h / 3.0L;
}

// out[c,h,w] = sum_{i,j} x[c, h+i-r, w+j-r] * k[c,h,w,i,j], zero outside.
inline Tensor<double> dpsconv(const Tensor<double>& x, const Tensor<double>& kern) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), k = kern.dim(3);
  const long r = long(k / 2);
  std::vector<double> out(C * H * W, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < W; ++w) {
        double acc = 0;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const long yy = long(h) + long(i) - r, xx = long(w) + long(j) - r;
            if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
            acc += x[(c * H + yy) * W + xx] * kern[((((c * H + h) * W + w) * k + i) * k) + j];
          }
        }
        out[(c * H + h) * W + w] = acc;
      }
    }
  }
  return Tensor<double>(x.shape(), std::move(out));
}

// Per-region channel means, [n, C], one pass over the pixels per region.
inline std::vector<double> region_means(const Tensor<double>& f, const segpic::RegionMap& rm) {
  const std::size_t C = f.dim(0), H = rm.height, W = rm.width;
  std::vector<double> out(rm.count * C, 0.0);
  for (std::uint32_t r = 0; r < rm.count; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      int n = 0;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          if (rm.at(y, x) != r) continue;
          s += f[(c * H + y) * W + x];
          ++n;
        }
      }
      out[r * C + c] = s / n;
    }
  }
  return out;
}

// Gathers each pixel's region vector back onto the [C,H,W] grid.
inline std::vector<double> gather_regions(const Tensor<double>& p, const segpic::RegionMap& rm) {
  const std::size_t C = p.dim(1), H = rm.height, W = rm.width;
  std::vector<double> out(C * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = p[rm.at(y, x) * C + c];
    }
  }
  return out;
}

// Least-squares cubic via normal equations and Gauss-Jordan elimination with
// partial pivoting.
inline std::vector<double> cubic_fit(const std::vector<double>& x, const std::vector<double>& y) {
  double a[4][5] = {};
  for (std::size_t i = 0; i < x.size(); ++i) {
    double p[4] = {1, x[i], x[i] * x[i], x[i] * x[i] * x[i]};
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) a[r][c] += p[r] * p[c];
      a[r][4] += p[r] * y[i];
    }
  }
  for (int c = 0; c < 4; ++c) {
    int piv = c;
    for (int r = c + 1; r < 4; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    for (int k = 0; k < 5; ++k) std::swap(a[c][k], a[piv][k]);
    for (int r = 0; r < 4; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (int k = 0; k < 5; ++k) a[r][k] -= f * a[c][k];
    }
  }
  return {a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]};
}

inline double eval_cubic(const std::vector<double>& c, double x) { return c[0] + x * (c[1] + x * (c[2] + x * c[3])); }

// BD-rate by a dense trapezoid over the overlap of the two fitted log-rate
// curves.
inline double bd_rate_trapezoid(const segpic::RdCurve& t, const segpic::RdCurve& a) {
  auto fit = [](const segpic::RdCurve& c, double& lo, double& hi) {
    std::vector<double> x, y;
    lo = 1e300;
    hi = -1e300;
    for (auto& p : c) {
      x.push_back(p.psnr);
      y.push_back(std::log(p.bpp));
      lo = std::min(lo, p.psnr);
      hi = std::max(hi, p.psnr);
    }
    return cubic_fit(x, y);
  };
  double tl, th, al, ah;
  const auto ct = fit(t, tl, th);
  const auto ca = fit(a, al, ah);
  const double lo = std::max(tl, al), hi = std::min(th, ah);
  const int n = 200000;
  const double h = (hi - lo) / n;
  double s = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double q = lo + h * i;
    const double d = eval_cubic(ct, q) - eval_cubic(ca, q);
    s += (i == 0 || i == n) ? 0.5 * d : d;
  }
  return (std::exp(s * h / (hi - lo)) - 1.0) * 100.0;
}

}  // namespace oracle
