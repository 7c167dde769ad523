#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "segpic/image_codec.hpp"
#include "segpic/net.hpp"

namespace segpic {

// Published MSE trade-offs.
inline constexpr double kLambdas[] = {0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483};

// Rates in bits per pixel, distortion as MSE on [0,1] pixels.
// total = rate_y + rate_z + rate_p + rate_p_prime + lambda * distortion_scale * distortion.
template <typename T>
struct RdLoss {
  Tensor<T> total;
  Tensor<T> rate_y, rate_z, rate_p, rate_p_prime;
  Tensor<T> distortion;
  double lambda = 0.0;
  double distortion_scale = 1.0;
};

template <typename T>
RdLoss<T> rd_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const LatentBundle<T>& bundle, double lambda,
                  double distortion_scale = 1.0);
// The same objective from raw bit counts.
template <typename T>
RdLoss<T> rd_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const Tensor<T>& bits_y, const Tensor<T>& bits_z,
                  const Tensor<T>& bits_p, const Tensor<T>& bits_p_prime, double lambda, double distortion_scale = 1.0);

// Adam with bias correction, state keyed by parameter name.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Updates every trainable parameter that has a gradient.
  template <typename T>
  void step(ParamStore<T>& params);

  std::size_t steps() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

struct Sample {
  Tensor<float> image;  // [3,H,W], 8-bit levels scaled to [0,1]
  RegionMap regions;    // exact Voronoi labels
  // (row, col) of the Voronoi seed of each generated cell, in generation order.
  std::vector<std::pair<std::size_t, std::size_t>> seeds;
};

struct DatasetConfig {
  std::size_t count = 500;
  std::size_t size = 64;
  std::size_t regions_per_image = 6;
  double texture_amp = 0.08;
  std::uint64_t seed = 1;
};

// Voronoi partitions of random distinct seed pixels (nearest seed by squared
// distance, ties to the lower index). Each region gets a base color plus a
// sinusoidal texture of the given amplitude.
std::vector<Sample> synth_dataset(const DatasetConfig& cfg);

RgbImage sample_to_image(const Sample& s);

enum class RegionMode { masks, grid };

struct TrainConfig {
  double lambda = 0.013;
  // Multiplies the [0,1] MSE; 255^2 puts the published lambdas on the scale
  // of 8-bit MSE.
  double distortion_scale = 255.0 * 255.0;
  std::size_t batch = 8;
  std::size_t steps = 5000;
  double lr = 1e-4;
  // lr is multiplied by lr_decay for the last lr_decay_fraction of the run.
  double lr_decay = 1.0;
  double lr_decay_fraction = 0.0;
  std::uint64_t seed = 1;
  RegionMode regions = RegionMode::masks;
  std::size_t grid_n = 4;
};

struct TraceRow {
  std::size_t step = 0;
  double total = 0, rate_y = 0, rate_z = 0, rate_p = 0, rate_p_prime = 0, mse = 0, psnr = 0;
};

std::string trace_csv_header();
std::string trace_csv_row(const TraceRow& r);

// Moving average over the trailing window (shorter at the start).
std::vector<double> smooth(const std::vector<double>& v, std::size_t window);

// Adam on noise-quantized forward passes, batch losses averaged over the
// batch. on_step sees every row. A non-finite loss throws NumericError with
// the offending components.
std::vector<TraceRow> train_loop(const TrainConfig& cfg, const std::vector<Sample>& data, Codec<float>& net,
                                 const std::function<void(const TraceRow&)>& on_step = {});

struct EvalRow {
  double bpp = 0;            // container bytes, header included
  double estimated_bpp = 0;  // model estimate of the four substreams
  double psnr = 0;           // 8-bit reconstruction
  double mse = 0;            // [0,1] scale
  std::size_t bytes = 0;
  std::size_t payload_bytes = 0;  // four substreams
  double estimated_bits = 0;
};

// Real bitstreams through the container with round-mode quantization.
std::vector<EvalRow> eval_rd(const Codec<float>& net, std::uint64_t model_hash, const std::vector<Sample>& data,
                             RegionMode mode, std::size_t grid_n);

// Mean of bpp + lambda * distortion_scale * mse over rows.
double mean_rd_loss(const std::vector<EvalRow>& rows, double lambda, double distortion_scale);

// Training run description, key=value lines. "model." keys are the model
// config, "data." keys the synthetic dataset, the rest the optimizer:
//   version=1
//   model.N=48
//   data.count=500
//   lambda=0.013
//   regions=masks   (or grid)
struct TrainFile {
  NetConfig model;
  DatasetConfig data;
  TrainConfig train;

  std::string to_text() const;
};

TrainFile parse_train_file(const std::string& text);
TrainFile load_train_file(const std::string& path);

}  // namespace segpic
