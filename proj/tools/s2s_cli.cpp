// s2s: simulate, reconstruct, score and export spectral CT data.
//
// Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numeric
// failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "s2s/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kIoError = 1, kConfigError = 2, kNumericError = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

s2s::RunConfig load_config(const Common& c) {
  s2s::RunConfig cfg;
  if (!c.config.empty()) {
    std::string text;
    try {
      text = s2s::io::read_bytes(c.config);
    } catch (const s2s::IoError& e) {
      throw s2s::ConfigError(e.what());
    }
    try {
      cfg = s2s::parse_run_config(text);
    } catch (const s2s::ConfigError& e) {
      throw s2s::ConfigError(c.config + ": " + e.what());
    }
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void print_means(const std::vector<s2s::MetricRow>& rows) {
  for (const auto& [method, mean] : s2s::pipeline::mean_psnr(rows))
    std::cout << method << ": mean PSNR " << mean << " dB\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spectral CT reconstruction with a self-supervised denoiser in the loop"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool seed) {
    sub->add_option("--config", common.config, "JSON run configuration");
    if (seed) sub->add_option("--seed", common.seed, "Override the master seed");
  };

  std::string out, in, algorithm, truth;
  std::vector<std::string> inputs;
  std::vector<double> window;

  auto* simulate = app.add_subcommand("simulate", "Simulate photon-counting sinograms of the phantom");
  add_common(simulate, true);
  simulate->add_option("--out", out, "Output directory")->required();

  auto* reconstruct = app.add_subcommand("reconstruct", "Reconstruct a simulation directory");
  add_common(reconstruct, true);
  reconstruct->add_option("--in", in, "Simulation directory")->required();
  reconstruct->add_option("--algorithm", algorithm, "sirt | tvm | n2n-post | s2s")
      ->check(CLI::IsMember(s2s::algorithm_names()));
  reconstruct->add_option("--out", out, "Output directory")->required();

  auto* metrics = app.add_subcommand("metrics", "Score reconstructions against ground truth");
  add_common(metrics, false);
  metrics->add_option("--truth", truth, "Simulation directory")->required();
  metrics->add_option("--in", inputs, "Reconstruction directories")->required();
  metrics->add_option("--out", out, "CSV file")->required();

  auto* export_png = app.add_subcommand("export-png", "Write an image file as 8-bit PNG");
  export_png->add_option("--in", in, "float32 image with sidecar")->required();
  export_png->add_option("--window", window, "Display window LO HI")->expected(2)->required();
  export_png->add_option("--out", out, "PNG file")->required();

  auto* ablate = app.add_subcommand("ablate", "Run s2s without the spectral prior and as post-processing");
  add_common(ablate, true);
  ablate->add_option("--in", in, "Simulation directory")->required();
  ablate->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*simulate) {
      auto cfg = load_config(common);
      cfg.output = out;
      const auto manifest = s2s::pipeline::simulate(cfg, out);
      std::cout << "wrote " << manifest["bins"] << " bins to " << out << " (noise "
                << manifest["noise"].get<std::string>() << ")\n";
    } else if (*reconstruct) {
      auto cfg = load_config(common);
      if (!algorithm.empty()) cfg.algorithm = algorithm;
      cfg.output = out;
      s2s::pipeline::reconstruct(cfg, in, out);
      std::cout << cfg.algorithm << " reconstruction written to " << out << "\n";
    } else if (*metrics) {
      const auto cfg = load_config(common);
      std::vector<fs::path> dirs(inputs.begin(), inputs.end());
      const auto rows = s2s::pipeline::score(cfg, truth, dirs);
      s2s::pipeline::write_metrics(out, rows);
      print_means(rows);
    } else if (*export_png) {
      if (!(window[1] > window[0])) throw s2s::ConfigError("--window: HI must exceed LO");
      const auto image = s2s::io::read_array(in).data;
      if (image.rank() != 2) throw s2s::ConfigError("export-png: expected a 2-D image");
      s2s::io::write_png_gray(out, image, window[0], window[1]);
    } else if (*ablate) {
      auto cfg = load_config(common);
      cfg.output = out;
      print_means(s2s::pipeline::ablate(cfg, in, out));
    }
  } catch (const s2s::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const s2s::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const s2s::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  }
  return kOk;
}
