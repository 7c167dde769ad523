#include "segpic/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "segpic/math.hpp"

namespace segpic {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;

using detail::accumulate;
using detail::make_result;
using detail::Node;

void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.defined() && b.defined(), std::string(op) + ": undefined operand");
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Column range [lo, hi) of output positions whose input index o*s + off
// falls inside [0, n).
struct Span1 {
  std::size_t lo, hi;
};
Span1 valid_range(std::ptrdiff_t off, std::size_t stride, std::size_t n, std::size_t out) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t last = static_cast<std::ptrdiff_t>(n) - 1 - off;
  std::ptrdiff_t hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// cols[(c,ky,kx), (oy,ox)] = x[c, oy*s-p+ky, ox*s-p+kx] (zero outside).
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* cols) {
  const auto p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ky) - p;
      const Span1 ry = valid_range(offy, stride, H, Ho);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kx) - p;
        const Span1 rx = valid_range(offx, stride, W, Wo);
        T* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          T* dst = row + oy * Wo;
          if (oy < ry.lo || oy >= ry.hi) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + (oy * stride + offy)) * W;
          std::fill(dst, dst + rx.lo, T(0));
          for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) dst[ox] = src[ox * stride + offx];
          std::fill(dst + rx.hi, dst + Wo, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back into an image.
template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* x) {
  const auto p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ky) - p;
      const Span1 ry = valid_range(offy, stride, H, Ho);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kx) - p;
        const Span1 rx = valid_range(offx, stride, W, Wo);
        const T* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
          const T* src = row + oy * Wo;
          T* dst = x + (c * H + (oy * stride + offy)) * W;
          for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) dst[ox * stride + offx] += src[ox];
        }
      }
    }
  }
}

template <typename T>
void add_bias_rows(T* out, const T* bias, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T v = bias[r];
    T* row = out + r * cols;
    for (std::size_t i = 0; i < cols; ++i) row[i] += v;
  }
}

template <typename T>
void accumulate_row_sums(Node<T>& bias, const T* g, std::size_t rows, std::size_t cols) {
  if (!bias.requires_grad) return;
  auto& gb = bias.grad_buffer();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    const T* row = g + r * cols;
    for (std::size_t i = 0; i < cols; ++i) s += row[i];
    gb[r] += s;
  }
}

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, F f, D derivative) {
  require(a.defined(), "unary op on undefined tensor");
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result<T>(a.shape(), std::move(out), {&a}, [derivative](Node<T>& n) {
    Node<T>& in = *n.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * derivative(in.value[i], n.value[i]);
  });
}

// Elementwise op with a per-element branch decision that can be frozen by
// the branch tape. f(x, branch) and derivative(x, branch).
template <typename T, typename Decide, typename F, typename D>
Tensor<T> piecewise(const Tensor<T>& a, Decide decide, F f, D derivative) {
  require(a.defined(), "piecewise op on undefined tensor");
  auto av = a.values();
  std::vector<unsigned char> branch(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) branch[i] = decide(av[i]) ? 1 : 0;
  detail::resolve_branches(branch);
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], branch[i] != 0);
  return make_result<T>(a.shape(), std::move(out), {&a},
                        [derivative, branch = std::move(branch)](Node<T>& n) {
                          Node<T>& in = *n.parents[0];
                          if (!in.requires_grad) return;
                          auto& g = in.grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            g[i] += n.grad[i] * derivative(in.value[i], branch[i] != 0);
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& n) {
    accumulate<T>(*n.parents[0], n.grad);
    accumulate<T>(*n.parents[1], n.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& n) {
    accumulate<T>(*n.parents[0], n.grad);
    Node<T>& rhs = *n.parents[1];
    if (!rhs.requires_grad) return;
    auto& g = rhs.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& n) {
    Node<T>& l = *n.parents[0];
    Node<T>& r = *n.parents[1];
    if (l.requires_grad) {
      auto& g = l.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * r.value[i];
    }
    if (r.requires_grad) {
      auto& g = r.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * l.value[i];
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  auto out = unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
  for (T v : out.values()) {
    if (!std::isfinite(v)) throw NumericError("exp: overflow");
  }
  return out;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  // Branch 1 = inside [lo, hi]; outside values snap to the nearer bound.
  return piecewise(
      a, [lo, hi](T x) { return x >= lo && x <= hi; },
      [lo, hi](T x, bool inside) { return inside ? x : std::clamp(x, lo, hi); },
      [](T, bool inside) { return inside ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  require(a.defined(), "sum: undefined operand");
  T s = 0;
  for (T v : a.values()) s += v;
  return make_result<T>(Shape{}, {s}, {&a}, [](Node<T>& n) {
    Node<T>& in = *n.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (auto& v : g) v += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.defined() && a.numel() > 0, "mean: empty operand");
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mse");
  auto av = a.values(), bv = b.values();
  const T inv_n = T(1) / static_cast<T>(av.size());
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    s += d * d;
  }
  return make_result<T>(Shape{}, {s * inv_n}, {&a, &b}, [inv_n](Node<T>& n) {
    Node<T>& l = *n.parents[0];
    Node<T>& r = *n.parents[1];
    const T scale = T(2) * inv_n * n.grad[0];
    if (l.requires_grad) {
      auto& g = l.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (l.value[i] - r.value[i]);
    }
    if (r.requires_grad) {
      auto& g = r.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= scale * (l.value[i] - r.value[i]);
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_result<T>(std::move(shape), std::move(out), {&a},
                        [](Node<T>& n) { accumulate<T>(*n.parents[0], n.grad); });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined() && a.rank() >= 1 && a.rank() == b.rank(),
          "concat_channels: rank mismatch");
  for (std::size_t i = 1; i < a.rank(); ++i) {
    require(a.dim(i) == b.dim(i), "concat_channels: " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<T> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t split = a.numel();
  return make_result<T>(std::move(shape), std::move(out), {&a, &b}, [split](Node<T>& n) {
    std::span<const T> g(n.grad);
    accumulate<T>(*n.parents[0], g.subspan(0, split));
    accumulate<T>(*n.parents[1], g.subspan(split));
  });
}

template <typename T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& s) {
  require(x.defined() && s.defined() && x.rank() >= 1 && s.rank() == 1 && s.dim(0) == x.dim(0),
          "mul_channels: " + shape_string(x.shape()) + " by " + shape_string(s.shape()));
  const std::size_t C = x.dim(0), inner = x.numel() / C;
  auto xv = x.values(), sv = s.values();
  std::vector<T> out(xv.size());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] = xv[c * inner + i] * sv[c];
  }
  return make_result<T>(x.shape(), std::move(out), {&x, &s}, [C, inner](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    Node<T>& sn = *n.parents[1];
    if (xn.requires_grad) {
      auto& g = xn.grad_buffer();
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < inner; ++i) g[c * inner + i] += n.grad[c * inner + i] * sn.value[c];
      }
    }
    if (sn.requires_grad) {
      auto& g = sn.grad_buffer();
      for (std::size_t c = 0; c < C; ++c) {
        T acc = 0;
        for (std::size_t i = 0; i < inner; ++i) acc += n.grad[c * inner + i] * xn.value[c * inner + i];
        g[c] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t padding, std::size_t groups) {
  require(x.defined() && w.defined() && x.rank() == 3 && w.rank() == 4,
          "conv2d: expects x[C,H,W] and w[O,C/g,k,k]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), Cg = w.dim(1), k = w.dim(2);
  require(w.dim(3) == k && k % 2 == 1, "conv2d: kernel must be square with odd size");
  require(groups >= 1 && C % groups == 0 && O % groups == 0 && Cg == C / groups,
          "conv2d: channels " + std::to_string(C) + " / weights " + shape_string(w.shape()) +
              " incompatible with groups=" + std::to_string(groups));
  require(stride >= 1 && H + 2 * padding >= k && W + 2 * padding >= k,
          "conv2d: input smaller than kernel");
  const bool has_bias = b.defined();
  if (has_bias) require(b.rank() == 1 && b.dim(0) == O, "conv2d: bias must be [O]");

  const std::size_t Ho = conv_out(H, k, stride, padding), Wo = conv_out(W, k, stride, padding);
  const std::size_t P = Ho * Wo, Og = O / groups, Kg = Cg * k * k;
  const bool pointwise = k == 1 && stride == 1 && padding == 0;

  std::vector<T> cols;
  const T* colp = x.values().data();
  if (!pointwise) {
    cols.resize(C * k * k * P);
    im2col(x.values().data(), C, H, W, k, stride, padding, Ho, Wo, cols.data());
    colp = cols.data();
  }
  std::vector<T> out(O * P);
  const T* wp = w.values().data();
  for (std::size_t g = 0; g < groups; ++g) {
    MapM<T>(out.data() + g * Og * P, Og, P).noalias() =
        CMapM<T>(wp + g * Og * Kg, Og, Kg) * CMapM<T>(colp + g * Kg * P, Kg, P);
  }
  if (has_bias) add_bias_rows(out.data(), b.values().data(), O, P);

  auto backward = [=, cols = std::move(cols)](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    Node<T>& wn = *n.parents[1];
    const T* gp = n.grad.data();
    if (has_bias) accumulate_row_sums(*n.parents[2], gp, O, P);
    const T* colv = pointwise ? xn.value.data() : cols.data();
    if (wn.requires_grad) {
      T* gw = wn.grad_buffer().data();
      for (std::size_t g = 0; g < groups; ++g) {
        MapM<T>(gw + g * Og * Kg, Og, Kg).noalias() +=
            CMapM<T>(gp + g * Og * P, Og, P) * CMapM<T>(colv + g * Kg * P, Kg, P).transpose();
      }
    }
    if (xn.requires_grad) {
      T* gx = xn.grad_buffer().data();
      if (pointwise) {
        for (std::size_t g = 0; g < groups; ++g) {
          MapM<T>(gx + g * Kg * P, Kg, P).noalias() +=
              CMapM<T>(wn.value.data() + g * Og * Kg, Og, Kg).transpose() *
              CMapM<T>(gp + g * Og * P, Og, P);
        }
      } else {
        std::vector<T> dcols(C * k * k * P);
        for (std::size_t g = 0; g < groups; ++g) {
          MapM<T>(dcols.data() + g * Kg * P, Kg, P).noalias() =
              CMapM<T>(wn.value.data() + g * Og * Kg, Og, Kg).transpose() *
              CMapM<T>(gp + g * Og * P, Og, P);
        }
        col2im(dcols.data(), C, H, W, k, stride, padding, Ho, Wo, gx);
      }
    }
  };
  Shape shape{O, Ho, Wo};
  if (has_bias) return make_result<T>(std::move(shape), std::move(out), {&x, &w, &b}, std::move(backward));
  return make_result<T>(std::move(shape), std::move(out), {&x, &w}, std::move(backward));
}

template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t stride, std::size_t padding) {
  require(x.defined() && w.defined() && x.rank() == 3 && w.rank() == 4,
          "conv2d_transpose: expects x[C,H,W] and w[C,O,k,k]");
  require(stride == 1 || stride == 2, "conv2d_transpose: stride must be 1 or 2");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(1), k = w.dim(2);
  require(w.dim(0) == C && w.dim(3) == k && k % 2 == 1,
          "conv2d_transpose: weights " + shape_string(w.shape()) + " do not match input " +
              shape_string(x.shape()));
  const std::size_t Ho = stride * H, Wo = stride * W;
  // The forward conv with the same geometry must map (Ho, Wo) back to (H, W).
  require(Ho + 2 * padding >= k && conv_out(Ho, k, stride, padding) == H &&
              conv_out(Wo, k, stride, padding) == W,
          "conv2d_transpose: kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
              ", padding " + std::to_string(padding) + " cannot produce " +
              std::to_string(stride) + "x upsampling");
  const bool has_bias = b.defined();
  if (has_bias) require(b.rank() == 1 && b.dim(0) == O, "conv2d_transpose: bias must be [O]");

  const std::size_t P = H * W, Q = Ho * Wo, K = O * k * k;
  std::vector<T> cols(K * P);
  MapM<T>(cols.data(), K, P).noalias() =
      CMapM<T>(w.values().data(), C, K).transpose() * CMapM<T>(x.values().data(), C, P);
  std::vector<T> out(O * Q, T(0));
  col2im(cols.data(), O, Ho, Wo, k, stride, padding, H, W, out.data());
  if (has_bias) add_bias_rows(out.data(), b.values().data(), O, Q);

  auto backward = [=](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    Node<T>& wn = *n.parents[1];
    const T* gp = n.grad.data();
    if (has_bias) accumulate_row_sums(*n.parents[2], gp, O, Q);
    if (!xn.requires_grad && !wn.requires_grad) return;
    std::vector<T> gcols(K * P);
    im2col(gp, O, Ho, Wo, k, stride, padding, H, W, gcols.data());
    if (xn.requires_grad) {
      MapM<T>(xn.grad_buffer().data(), C, P).noalias() +=
          CMapM<T>(wn.value.data(), C, K) * CMapM<T>(gcols.data(), K, P);
    }
    if (wn.requires_grad) {
      MapM<T>(wn.grad_buffer().data(), C, K).noalias() +=
          CMapM<T>(xn.value.data(), C, P) * CMapM<T>(gcols.data(), K, P).transpose();
    }
  };
  Shape shape{O, Ho, Wo};
  if (has_bias) return make_result<T>(std::move(shape), std::move(out), {&x, &w, &b}, std::move(backward));
  return make_result<T>(std::move(shape), std::move(out), {&x, &w}, std::move(backward));
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  switch (kind) {
    case Activation::gelu:
      return unary(
          x, [](T v) { return v * normal_cdf(v); },
          [](T v, T) { return normal_cdf(v) + v * normal_pdf(v); });
    case Activation::leaky_relu:
      return piecewise(
          x, [](T v) { return v > T(0); },
          [](T v, bool pos) { return pos ? v : static_cast<T>(kLeakySlope) * v; },
          [](T, bool pos) { return pos ? T(1) : static_cast<T>(kLeakySlope); });
    case Activation::sigmoid:
      return unary(x, [](T v) { return logistic(v); }, [](T, T y) { return y * (T(1) - y); });
  }
  throw DimensionError("activation: unknown kind");
}

template <typename T>
Tensor<T> gdn(const Tensor<T>& x, const Tensor<T>& beta, const Tensor<T>& gamma, bool inverse) {
  require(x.defined() && x.rank() == 3, "gdn: expects x[C,H,W]");
  const std::size_t C = x.dim(0), P = x.dim(1) * x.dim(2);
  require(beta.defined() && beta.rank() == 1 && beta.dim(0) == C, "gdn: beta must be [C]");
  require(gamma.defined() && gamma.rank() == 2 && gamma.dim(0) == C && gamma.dim(1) == C,
          "gdn: gamma must be [C,C]");

  auto xv = x.values();
  std::vector<T> x2(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) x2[i] = xv[i] * xv[i];
  std::vector<T> norm(C * P);
  MapM<T>(norm.data(), C, P).noalias() =
      CMapM<T>(gamma.values().data(), C, C) * CMapM<T>(x2.data(), C, P);
  std::vector<T> factor(C * P);  // norm^(-1/2) forward, norm^(+1/2) inverse
  std::vector<T> out(C * P);
  for (std::size_t c = 0; c < C; ++c) {
    const T bc = beta.values()[c];
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t i = c * P + p;
      norm[i] += bc;
      if (!(norm[i] > T(0)) || !std::isfinite(norm[i])) {
        throw NumericError("gdn: non-finite or non-positive denominator");
      }
      const T r = std::sqrt(norm[i]);
      factor[i] = inverse ? r : T(1) / r;
      out[i] = xv[i] * factor[i];
    }
  }

  auto backward = [=, norm = std::move(norm), factor = std::move(factor),
                   x2 = std::move(x2)](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    Node<T>& bn = *n.parents[1];
    Node<T>& gn = *n.parents[2];
    // d out / d norm = x * a * norm^(a-1), a = -1/2 (forward) or +1/2 (inverse).
    std::vector<T> dnorm(C * P);
    for (std::size_t i = 0; i < C * P; ++i) {
      const T a = inverse ? T(0.5) : T(-0.5);
      dnorm[i] = n.grad[i] * xn.value[i] * a * factor[i] / norm[i];
    }
    if (bn.requires_grad) accumulate_row_sums(bn, dnorm.data(), C, P);
    if (gn.requires_grad) {
      MapM<T>(gn.grad_buffer().data(), C, C).noalias() +=
          CMapM<T>(dnorm.data(), C, P) * CMapM<T>(x2.data(), C, P).transpose();
    }
    if (xn.requires_grad) {
      std::vector<T> dx2(C * P);
      MapM<T>(dx2.data(), C, P).noalias() =
          CMapM<T>(gn.value.data(), C, C).transpose() * CMapM<T>(dnorm.data(), C, P);
      auto& g = xn.grad_buffer();
      for (std::size_t i = 0; i < C * P; ++i) {
        g[i] += n.grad[i] * factor[i] + T(2) * xn.value[i] * dx2[i];
      }
    }
  };
  return make_result<T>(x.shape(), std::move(out), {&x, &beta, &gamma}, std::move(backward));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.defined() && w.defined() && x.rank() >= 1 && w.rank() == 2,
          "linear: expects x[...,Cin] and w[Cout,Cin]");
  const std::size_t Cin = x.shape().back(), Cout = w.dim(0);
  require(w.dim(1) == Cin, "linear: weights " + shape_string(w.shape()) + " vs input " +
                               shape_string(x.shape()));
  const bool has_bias = b.defined();
  if (has_bias) require(b.rank() == 1 && b.dim(0) == Cout, "linear: bias must be [Cout]");
  const std::size_t R = x.numel() / Cin;

  std::vector<T> out(R * Cout);
  MapM<T> om(out.data(), R, Cout);
  om.noalias() = CMapM<T>(x.values().data(), R, Cin) * CMapM<T>(w.values().data(), Cout, Cin).transpose();
  if (has_bias) {
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t o = 0; o < Cout; ++o) out[r * Cout + o] += b.values()[o];
    }
  }
  Shape shape = x.shape();
  shape.back() = Cout;
  auto backward = [=](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    Node<T>& wn = *n.parents[1];
    CMapM<T> g(n.grad.data(), R, Cout);
    if (has_bias && n.parents[2]->requires_grad) {
      auto& gb = n.parents[2]->grad_buffer();
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t o = 0; o < Cout; ++o) gb[o] += n.grad[r * Cout + o];
      }
    }
    if (wn.requires_grad) {
      MapM<T>(wn.grad_buffer().data(), Cout, Cin).noalias() +=
          g.transpose() * CMapM<T>(xn.value.data(), R, Cin);
    }
    if (xn.requires_grad) {
      MapM<T>(xn.grad_buffer().data(), R, Cin).noalias() +=
          g * CMapM<T>(wn.value.data(), Cout, Cin);
    }
  };
  if (has_bias) return make_result<T>(std::move(shape), std::move(out), {&x, &w, &b}, std::move(backward));
  return make_result<T>(std::move(shape), std::move(out), {&x, &w}, std::move(backward));
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require(x.defined() && x.rank() == 3, "global_avg_pool: expects x[C,H,W]");
  const std::size_t C = x.dim(0), P = x.dim(1) * x.dim(2);
  require(P > 0, "global_avg_pool: empty spatial extent");
  std::vector<T> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    T s = 0;
    for (std::size_t p = 0; p < P; ++p) s += x.values()[c * P + p];
    out[c] = s / static_cast<T>(P);
  }
  return make_result<T>(Shape{C}, std::move(out), {&x}, [C, P](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t c = 0; c < C; ++c) {
      const T v = n.grad[c] / static_cast<T>(P);
      for (std::size_t p = 0; p < P; ++p) g[c * P + p] += v;
    }
  });
}

template <typename T>
Tensor<T> group_to_last(const Tensor<T>& x, std::size_t group) {
  require(x.defined() && x.rank() == 3 && group >= 1 && x.dim(0) % group == 0,
          "group_to_last: channels not divisible by group");
  const std::size_t C = x.dim(0) / group, P = x.dim(1) * x.dim(2);
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < group; ++t) {
      const T* src = xv.data() + (c * group + t) * P;
      T* dst = out.data() + c * P * group + t;
      for (std::size_t p = 0; p < P; ++p) dst[p * group] = src[p];
    }
  }
  Shape shape{C, x.dim(1), x.dim(2), group};
  return make_result<T>(std::move(shape), std::move(out), {&x}, [C, P, group](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t t = 0; t < group; ++t) {
        T* dst = g.data() + (c * group + t) * P;
        const T* src = n.grad.data() + c * P * group + t;
        for (std::size_t p = 0; p < P; ++p) dst[p] += src[p * group];
      }
    }
  });
}

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x, std::size_t group) {
  require(x.defined() && x.rank() >= 1 && group >= 1 && x.shape().back() % group == 0,
          "softmax_last: last axis not divisible by group");
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t base = 0; base < xv.size(); base += group) {
    T mx = xv[base];
    for (std::size_t t = 1; t < group; ++t) mx = std::max(mx, xv[base + t]);
    T s = 0;
    for (std::size_t t = 0; t < group; ++t) {
      out[base + t] = std::exp(xv[base + t] - mx);
      s += out[base + t];
    }
    for (std::size_t t = 0; t < group; ++t) out[base + t] /= s;
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [group](Node<T>& n) {
    Node<T>& xn = *n.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t base = 0; base < g.size(); base += group) {
      T dot = 0;
      for (std::size_t t = 0; t < group; ++t) dot += n.grad[base + t] * n.value[base + t];
      for (std::size_t t = 0; t < group; ++t) {
        g[base + t] += n.value[base + t] * (n.grad[base + t] - dot);
      }
    }
  });
}

#define SEGPIC_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> square(const Tensor<T>&);                                                 \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                            \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> mul_channels(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                            std::size_t, std::size_t);                                         \
  template Tensor<T> conv2d_transpose(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                      std::size_t, std::size_t);                               \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                 \
  template Tensor<T> gdn(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, bool);          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                        \
  template Tensor<T> group_to_last(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> softmax_last(const Tensor<T>&, std::size_t);

SEGPIC_INSTANTIATE_OPS(float)
SEGPIC_INSTANTIATE_OPS(double)

}  // namespace segpic
