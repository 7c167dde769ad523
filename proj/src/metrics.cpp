#include "segpic/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "segpic/bytes.hpp"

namespace segpic {

double psnr_from_mse(double mse, double peak) {
  if (!(mse >= 0.0)) throw NumericError("psnr: invalid mse");
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double psnr(const Tensor<float>& x, const Tensor<float>& x_hat, double peak) {
  if (x.shape() != x_hat.shape()) throw DimensionError("psnr: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = double(x[i]) - double(x_hat[i]);
    s += d * d;
  }
  return psnr_from_mse(s / static_cast<double>(x.numel()), peak);
}

double mse(const RgbImage& a, const RgbImage& b) {
  if (a.width != b.width || a.height != b.height || a.pixels.size() != b.pixels.size()) {
    throw DimensionError("mse: image size mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels[i]) - double(b.pixels[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.pixels.size());
}

double psnr(const RgbImage& a, const RgbImage& b) { return psnr_from_mse(mse(a, b), 255.0); }

double bpp(std::size_t total_bytes, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DimensionError("bpp: empty image");
  return 8.0 * static_cast<double>(total_bytes) / static_cast<double>(height * width);
}

void validate_curve(const RdCurve& c) {
  if (c.size() < 4) throw DomainError("RD curve needs at least 4 points");
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!std::isfinite(c[i].bpp) || !std::isfinite(c[i].psnr) || c[i].bpp <= 0.0) {
      throw DomainError("RD curve has a non-finite or non-positive point");
    }
    if (i > 0 && !(c[i].bpp > c[i - 1].bpp)) throw DomainError("RD curve bpp must be strictly increasing");
  }
}

std::vector<double> polyfit(const std::vector<double>& x, const std::vector<double>& y, std::size_t degree) {
  if (x.size() != y.size() || x.size() <= degree) throw DomainError("polyfit: not enough points");
  Eigen::MatrixXd A(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(degree + 1));
  Eigen::VectorXd b(static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    double p = 1.0;
    for (std::size_t d = 0; d <= degree; ++d, p *= x[i]) A(Eigen::Index(i), Eigen::Index(d)) = p;
    b(Eigen::Index(i)) = y[i];
  }
  const Eigen::VectorXd c = A.colPivHouseholderQr().solve(b);
  return std::vector<double>(c.data(), c.data() + c.size());
}

namespace {

// Integral of the polynomial from lo to hi.
double integrate(const std::vector<double>& c, double lo, double hi) {
  double s = 0.0;
  for (std::size_t d = 0; d < c.size(); ++d) {
    const double k = static_cast<double>(d + 1);
    s += c[d] * (std::pow(hi, k) - std::pow(lo, k)) / k;
  }
  return s;
}

std::vector<double> fit_log_rate(const RdCurve& c, double center) {
  std::vector<double> q, r;
  for (const auto& p : c) {
    q.push_back(p.psnr - center);
    r.push_back(std::log(p.bpp));
  }
  return polyfit(q, r, 3);
}

}  // namespace

double bd_rate(const RdCurve& test, const RdCurve& anchor) {
  validate_curve(test);
  validate_curve(anchor);
  auto range = [](const RdCurve& c) {
    auto [lo, hi] = std::minmax_element(c.begin(), c.end(), [](auto& a, auto& b) { return a.psnr < b.psnr; });
    return std::pair{lo->psnr, hi->psnr};
  };
  const auto [tlo, thi] = range(test);
  const auto [alo, ahi] = range(anchor);
  const double lo = std::max(tlo, alo), hi = std::min(thi, ahi);
  if (!(hi > lo)) throw DomainError("bd_rate: PSNR ranges do not overlap");
  // Centering the abscissa keeps the cubic fit well conditioned.
  const double center = 0.5 * (lo + hi);
  const auto ct = fit_log_rate(test, center);
  const auto ca = fit_log_rate(anchor, center);
  const double avg = (integrate(ct, lo - center, hi - center) - integrate(ca, lo - center, hi - center)) / (hi - lo);
  return (std::exp(avg) - 1.0) * 100.0;
}

RdCurve parse_rd_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ParseError("RD csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("bpp,psnr", 0) != 0) throw ParseError("RD csv: expected header 'bpp,psnr'");
  RdCurve c;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',')) throw ParseError("RD csv: bad row '" + line + "'");
    try {
      c.push_back({std::stod(a), std::stod(b)});
    } catch (const std::exception&) {
      throw ParseError("RD csv: bad number in '" + line + "'");
    }
  }
  return c;
}

RdCurve read_rd_csv(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_rd_csv(std::string(bytes.begin(), bytes.end()));
}

std::string format_rd_csv(const RdCurve& c) {
  std::ostringstream os;
  os << "bpp,psnr\n" << std::setprecision(10);
  for (const auto& p : c) os << p.bpp << ',' << p.psnr << '\n';
  return os.str();
}

}  // namespace segpic
