#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "segpic/bytes.hpp"
#include "segpic/gradcheck_suite.hpp"
#include "segpic/image_codec.hpp"
#include "segpic/metrics.hpp"
#include "segpic/train.hpp"

namespace segpic {

namespace {

namespace fs = std::filesystem;

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("SEGCODEC_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw UsageError(std::string("SEGCODEC_SEED is not an unsigned integer: '") + s + "'");
  return v;
}

RegionSource region_source(std::size_t grid, const std::string& regions_path, RegionMap& storage) {
  if (!regions_path.empty()) {
    storage = load_region_map(regions_path);
    return RegionSource{0, &storage};
  }
  return RegionSource{grid, nullptr};
}

void cmd_encode(const std::string& input, const std::string& model, const std::string& output, std::size_t grid,
                const std::string& regions, std::ostream& out) {
  const auto m = load_model(model);
  const RgbImage img = read_ppm(input);
  RegionMap storage;
  const auto src = region_source(grid, regions, storage);
  const auto enc = encode_image(m.net, m.hash, img, src);
  write_file(output, enc.container);
  double est = 0;
  for (double b : enc.estimated_bits) est += b;
  out << output << ": " << enc.container.size() << " bytes, " << std::fixed << std::setprecision(4)
      << bpp(enc.container.size(), img.height, img.width) << " bpp (estimate "
      << est / double(img.height * img.width) << "), psnr " << std::setprecision(2)
      << psnr(img, enc.reconstruction) << " dB\n";
}

void cmd_decode(const std::string& input, const std::string& model, const std::string& output,
                const std::string& regions, std::ostream& out) {
  const auto m = load_model(model);
  const auto bytes = read_file(input);
  std::optional<RegionMap> map;
  if (!regions.empty()) map = load_region_map(regions);
  const RgbImage img = decode_image(m.net, m.hash, bytes, map ? &*map : nullptr);
  write_ppm(output, img);
  out << output << ": " << img.width << "x" << img.height << "\n";
}

void cmd_train(const std::string& config, const std::string& output, const std::string& trace_path,
               std::size_t log_every, std::ostream& out) {
  TrainFile f = load_train_file(config);
  if (const auto s = env_seed()) f.train.seed = *s;
  const auto data = synth_dataset(f.data);
  Codec<float> net(f.model, f.train.seed);
  std::string trace = trace_csv_header();
  train_loop(f.train, data, net, [&](const TraceRow& r) {
    trace += trace_csv_row(r);
    if (log_every > 0 && (r.step % log_every == 0 || r.step == f.train.steps)) {
      out << "step " << r.step << " loss " << r.total << " psnr " << r.psnr << std::endl;
    }
  });
  save_model(output, net);
  if (!trace_path.empty()) write_file(trace_path, std::vector<std::uint8_t>(trace.begin(), trace.end()));
  out << "wrote " << output << " and " << model_config_path(output) << "\n";
}

void cmd_eval(const std::string& model, const std::string& dir, const std::string& csv, std::size_t grid,
              bool masks, std::ostream& out) {
  const auto m = load_model(model);
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") images.push_back(e.path());
  }
  if (images.empty()) throw UsageError("eval: no .ppm images in " + dir);
  std::sort(images.begin(), images.end());
  std::ostringstream os;
  os << "image,bytes,bpp,estimated_bpp,psnr\n" << std::setprecision(8);
  double sum_bpp = 0, sum_psnr = 0;
  for (const auto& p : images) {
    const RgbImage img = read_ppm(p.string());
    RegionMap storage;
    const auto src = region_source(grid, masks ? fs::path(p).replace_extension(".pgm").string() : "", storage);
    const auto enc = encode_image(m.net, m.hash, img, src, false);
    double est = 0;
    for (double b : enc.estimated_bits) est += b;
    const double rate = bpp(enc.container.size(), img.height, img.width);
    const double q = psnr(img, enc.reconstruction);
    os << p.filename().string() << ',' << enc.container.size() << ',' << rate << ','
       << est / double(img.height * img.width) << ',' << q << '\n';
    sum_bpp += rate;
    sum_psnr += q;
  }
  const std::string text = os.str();
  write_file(csv, std::vector<std::uint8_t>(text.begin(), text.end()));
  const double n = static_cast<double>(images.size());
  out << images.size() << " images, mean " << std::fixed << std::setprecision(4) << sum_bpp / n << " bpp, "
      << std::setprecision(2) << sum_psnr / n << " dB\n";
}

bool cmd_gradcheck(const std::string& module, std::uint64_t seed, std::ostream& out) {
  bool ok = true;
  for (const auto& c : run_gradcheck_suite(module, seed)) {
    out << std::left << std::setw(8) << c.name << " max_rel_error " << std::scientific << std::setprecision(3)
        << c.result.max_relative_error << " over " << c.result.elements_checked << " elements, "
        << std::fixed << std::setprecision(1) << c.seconds << " s " << (c.passed() ? "ok" : "FAIL") << "\n";
    ok = ok && c.passed();
  }
  return ok;
}

void cmd_synth(const std::string& dir, DatasetConfig cfg, std::ostream& out) {
  fs::create_directories(dir);
  const auto data = synth_dataset(cfg);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::ostringstream stem;
    stem << "synth_" << std::setw(4) << std::setfill('0') << i;
    const fs::path base = fs::path(dir) / stem.str();
    write_ppm(fs::path(base).replace_extension(".ppm").string(), sample_to_image(data[i]));
    save_region_map(fs::path(base).replace_extension(".pgm").string(), data[i].regions);
  }
  out << "wrote " << data.size() << " images to " << dir << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Segmentation-guided learned image codec", "segcodec"};
  app.require_subcommand(1);

  std::string input, model, output, regions, config, dir, csv, module = "all", test, anchor, trace;
  std::size_t grid = 0, log_every = 100;
  bool masks = false;
  std::uint64_t seed = 1;
  DatasetConfig synth;

  auto* enc = app.add_subcommand("encode", "Compress a PPM image into a container");
  enc->add_option("--input", input, "PPM image")->required();
  enc->add_option("--model", model, "Weights (.spw, with .cfg alongside)")->required();
  enc->add_option("--out", output, "Container path")->required();
  auto* enc_grid = enc->add_option("--grid", grid, "n x n grid partition")->check(CLI::Range(1, 8));
  enc->add_option("--regions", regions, "Region map PGM (must be resupplied to decode)")->excludes(enc_grid);

  auto* dec = app.add_subcommand("decode", "Reconstruct a PPM image from a container");
  dec->add_option("--input", input, "Container")->required();
  dec->add_option("--model", model, "Weights")->required();
  dec->add_option("--out", output, "PPM output")->required();
  dec->add_option("--regions", regions, "Region map used at encode time");

  auto* tr = app.add_subcommand("train", "Train on the synthetic region dataset");
  tr->add_option("--config", config, "Training config")->required();
  tr->add_option("--out", output, "Weights output (.spw)")->required();
  tr->add_option("--trace", trace, "Per-step loss CSV");
  tr->add_option("--log-every", log_every, "Progress interval in steps (0 disables)");

  auto* ev = app.add_subcommand("eval", "Rate and PSNR of every PPM in a directory");
  ev->add_option("--model", model, "Weights")->required();
  ev->add_option("--dir", dir, "Image directory")->required();
  ev->add_option("--csv", csv, "Per-image CSV output")->required();
  auto* ev_grid = ev->add_option("--grid", grid, "n x n grid partition (default: model grid_n)")->check(CLI::Range(1, 8));
  ev->add_flag("--masks", masks, "Use <image>.pgm region maps")->excludes(ev_grid);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--module", module, "Module name or all");
  gc->add_option("--seed", seed, "Random seed");

  auto* bd = app.add_subcommand("bdrate", "BD-rate of a test RD curve against an anchor");
  bd->add_option("--test", test, "Test curve CSV (bpp,psnr)")->required();
  bd->add_option("--anchor", anchor, "Anchor curve CSV (bpp,psnr)")->required();

  auto* sy = app.add_subcommand("synth", "Write synthetic images and region maps");
  sy->add_option("--out", dir, "Output directory")->required();
  sy->add_option("--count", synth.count, "Number of images");
  sy->add_option("--size", synth.size, "Side length");
  sy->add_option("--regions", synth.regions_per_image, "Regions per image");
  sy->add_option("--seed", synth.seed, "Random seed");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "segcodec: " << e.what() << "\n";
    return static_cast<int>(ExitCode::usage);
  }

  try {
    if (enc->parsed()) {
      if (grid == 0 && regions.empty()) throw UsageError("encode: give --grid n or --regions map.pgm");
      cmd_encode(input, model, output, grid, regions, out);
    } else if (dec->parsed()) {
      cmd_decode(input, model, output, regions, out);
    } else if (tr->parsed()) {
      cmd_train(config, output, trace, log_every, out);
    } else if (ev->parsed()) {
      if (grid == 0 && !masks) grid = load_net_config(model_config_path(model)).grid_n;
      cmd_eval(model, dir, csv, grid, masks, out);
    } else if (gc->parsed()) {
      if (const auto s = env_seed()) seed = *s;
      if (!cmd_gradcheck(module, seed, out)) {
        err << "segcodec: gradient check above " << kGradCheckTolerance << "\n";
        return static_cast<int>(ExitCode::numeric);
      }
    } else if (bd->parsed()) {
      out << std::fixed << std::setprecision(2) << bd_rate(read_rd_csv(test), read_rd_csv(anchor)) << "\n";
    } else if (sy->parsed()) {
      if (const auto s = env_seed()) synth.seed = *s;
      cmd_synth(dir, synth, out);
    }
  } catch (const Error& e) {
    err << "segcodec: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    err << "segcodec: " << e.what() << "\n";
    return static_cast<int>(ExitCode::data);
  }
  return 0;
}

}  // namespace segpic
