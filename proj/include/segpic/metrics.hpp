#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "segpic/image_io.hpp"
#include "segpic/tensor.hpp"

namespace segpic {

// Reported instead of +inf for identical inputs.
inline constexpr double kPsnrCap = 100.0;

double psnr_from_mse(double mse, double peak = 1.0);
double psnr(const Tensor<float>& x, const Tensor<float>& x_hat, double peak = 1.0);
// On 8-bit pixels with peak 255.
double psnr(const RgbImage& a, const RgbImage& b);
double mse(const RgbImage& a, const RgbImage& b);

double bpp(std::size_t total_bytes, std::size_t height, std::size_t width);

struct RdPoint {
  double bpp = 0.0;
  double psnr = 0.0;
};
using RdCurve = std::vector<RdPoint>;

// At least 4 finite points with strictly increasing bpp.
void validate_curve(const RdCurve& c);

// Bjontegaard delta rate in percent (negative means test saves rate): cubic
// least-squares fits of ln(rate) against PSNR, averaged over the overlapping
// PSNR interval.
double bd_rate(const RdCurve& test, const RdCurve& anchor);

// Least-squares polynomial coefficients, constant term first.
std::vector<double> polyfit(const std::vector<double>& x, const std::vector<double>& y, std::size_t degree);

// CSV with a "bpp,psnr" header.
RdCurve parse_rd_csv(const std::string& text);
RdCurve read_rd_csv(const std::string& path);
std::string format_rd_csv(const RdCurve& c);

}  // namespace segpic
