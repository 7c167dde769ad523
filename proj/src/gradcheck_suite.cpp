#include "segpic/gradcheck_suite.hpp"

#include <chrono>
#include <functional>

#include "segpic/layers.hpp"
#include "segpic/net.hpp"
#include "segpic/ops.hpp"
#include "segpic/rat.hpp"
#include "segpic/train.hpp"

namespace segpic {

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

RegionMap random_map(std::size_t H, std::size_t W, std::size_t n, Rng& rng) {
  std::vector<std::uint32_t> raw(H * W);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<std::uint32_t>(i < n ? i : rng.index(n));
  return make_region_map(H, W, raw);
}

std::vector<Tensor<double>> params_of(const ParamStore<double>& s, std::initializer_list<Tensor<double>> extra = {}) {
  std::vector<Tensor<double>> out;
  for (const auto& [name, e] : s.entries()) out.push_back(e.tensor);
  out.insert(out.end(), extra);
  return out;
}

// Projects an output onto a fixed random direction so the check covers the
// full Jacobian rather than a plain sum.
Tensor<double> project(const Tensor<double>& y, const Tensor<double>& probe) { return sum(mul(y, probe)); }

NetConfig tiny_net() {
  NetConfig c;
  c.N = 4;
  c.M = 6;
  c.fine_schedule = {4, 3};
  c.coarse_schedule = {6, 3};
  return c;
}

using CaseFn = std::function<GradCheckResult(Rng&)>;

GradCheckResult check_dpsconv(Rng& rng) {
  auto x = random_tensor({3, 6, 5}, rng);
  auto k = random_tensor({3, 6, 5, 3, 3}, rng);
  auto probe = random_tensor({3, 6, 5}, rng);
  return grad_check([&] { return project(dpsconv(x, k), probe); }, {x, k});
}

GradCheckResult check_sal(Rng& rng) {
  ParamStore<double> s;
  add_sal(s, "sal", 4, rng);
  auto x = random_tensor({4, 5, 5}, rng);
  auto probe = random_tensor({4, 5, 5}, rng);
  return grad_check([&] { return project(sal(s, "sal", x), probe); }, params_of(s, {x}));
}

struct RatBench {
  RatConfig cfg{4, 3, 3, true};
  ParamStore<double> s;
  explicit RatBench(Rng& rng) { add_rat(s, "rat", cfg, rng); }
};

GradCheckResult check_ctl(Rng& rng) {
  RatBench b(rng);
  auto x = random_tensor({4, 5, 5}, rng);
  auto probe = random_tensor({4, 5, 5}, rng);
  return grad_check([&] { return project(ctl(b.s, "rat", x), probe); }, params_of(b.s, {x}));
}

GradCheckResult check_dkg(Rng& rng) {
  RatBench b(rng);
  auto f = random_tensor({7, 4, 4}, rng);
  auto probe = random_tensor({4, 4, 4, 3, 3}, rng);
  return grad_check([&] { return project(dkg(b.s, "rat", b.cfg, f), probe); }, params_of(b.s, {f}));
}

GradCheckResult check_cag(Rng& rng) {
  RatBench b(rng);
  auto f = random_tensor({7, 4, 4}, rng);
  auto probe = random_tensor({4}, rng);
  return grad_check([&] { return project(cag(b.s, "rat", f), probe); }, params_of(b.s, {f}));
}

GradCheckResult check_rat(Rng& rng) {
  RatBench b(rng);
  auto x = random_tensor({4, 6, 6}, rng);
  auto feat = random_tensor({3, 6, 6}, rng);
  const auto rm = random_map(6, 6, 3, rng);
  auto probe = random_tensor({4, 6, 6}, rng);
  return grad_check(
      [&] { return project(rat_forward(b.s, "rat", b.cfg, x, masked_average_pool(feat, rm).vectors, rm), probe); },
      params_of(b.s, {x, feat}));
}

GradCheckResult check_map(Rng& rng) {
  auto feat = random_tensor({3, 7, 6}, rng);
  const auto rm = random_map(7, 6, 4, rng);
  auto probe = random_tensor({4, 3}, rng);
  auto probe_full = random_tensor({3, 7, 6}, rng);
  return grad_check(
      [&] {
        const auto v = masked_average_pool(feat, rm).vectors;
        return add(project(v, probe), project(expand_prototypes(v, rm), probe_full));
      },
      {feat});
}

GradCheckResult check_gdn(Rng& rng) {
  ParamStore<double> s;
  add_gdn(s, "gdn", 4);
  // Move away from the init so off-diagonal couplings matter.
  for (auto* name : {"gdn.beta", "gdn.gamma"}) {
    for (auto& v : s.get(name).mutable_values()) v += rng.uniform(0.1, 0.5);
  }
  auto x = random_tensor({4, 4, 5}, rng);
  auto probe = random_tensor({4, 4, 5}, rng);
  return grad_check(
      [&] { return add(project(apply_gdn(s, "gdn", x, false), probe), project(apply_gdn(s, "gdn", x, true), probe)); },
      params_of(s, {x}));
}

GradCheckResult check_hyper(Rng& rng) {
  Codec<double> net(tiny_net(), rng.next());
  auto y = random_tensor({6, 8, 8}, rng, -2.0, 2.0);
  const auto rm = random_map(8, 8, 3, rng);
  auto protos = random_tensor({3, 6}, rng);
  auto p_mu = random_tensor({6, 8, 8}, rng);
  auto p_sigma = random_tensor({6, 8, 8}, rng);
  std::vector<Tensor<double>> inputs{y, protos};
  for (const auto& [name, e] : net.params().entries()) {
    if (name.rfind("hyper.", 0) == 0 || name.rfind("rat.hyper", 0) == 0) inputs.push_back(e.tensor);
  }
  return grad_check(
      [&] {
        const auto g = net.hyper_decode(net.hyper_encode(y), protos, rm);
        return add(project(g.mu, p_mu), project(g.sigma, p_sigma));
      },
      inputs);
}

GradCheckResult check_e2e(Rng& rng) {
  Codec<double> net(tiny_net(), rng.next());
  DatasetConfig dc;
  dc.count = 1;
  dc.seed = rng.next();
  const auto sample = synth_dataset(dc).front();
  Tensor<double> x(sample.image.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) x.mutable_values()[i] = sample.image[i];
  const auto levels = region_levels(sample.regions);
  const std::uint64_t noise_seed = rng.next();
  GradCheckOptions opt;
  // Every parameter tensor is covered; large ones are sampled.
  opt.max_elements_per_input = 6;
  opt.seed = rng.next();
  return grad_check(
      [&] {
        Rng noise(noise_seed);  // identical quantization noise on every evaluation
        const auto b = net.encode_features(x, levels, QuantMode::noise, noise);
        const auto x_hat = net.decode_features(b.y_hat, b.fine.recon, levels);
        return rd_loss(x, x_hat, b, 0.013, 255.0 * 255.0).total;
      },
      params_of(net.params(), {x}), opt);
}

const std::vector<std::pair<std::string, CaseFn>>& cases() {
  static const std::vector<std::pair<std::string, CaseFn>> all = {
      {"dpsconv", check_dpsconv}, {"sal", check_sal}, {"ctl", check_ctl},     {"dkg", check_dkg},
      {"cag", check_cag},         {"rat", check_rat}, {"map", check_map},     {"gdn", check_gdn},
      {"hyper", check_hyper},     {"e2e", check_e2e},
  };
  return all;
}

}  // namespace

std::vector<std::string> gradcheck_modules() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : cases()) out.push_back(name);
  return out;
}

std::vector<GradCheckCase> run_gradcheck_suite(const std::string& module, std::uint64_t seed) {
  bool known = module == "all";
  for (const auto& [name, fn] : cases()) known = known || name == module;
  if (!known) throw UsageError("unknown gradcheck module '" + module + "'");
  std::vector<GradCheckCase> out;
  Rng root(seed);
  for (const auto& [name, fn] : cases()) {
    // Each case gets its own stream so results do not depend on the selection.
    Rng rng = root.split();
    if (module != "all" && module != name) continue;
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckCase c;
    c.name = name;
    c.result = fn(rng);
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(c);
  }
  return out;
}

}  // namespace segpic
