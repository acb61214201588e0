#pragma once

// Directory-level pipeline stages behind the command-line tool: simulate a
// phantom to disk, reconstruct from a verified simulation directory, score
// reconstructions against ground truth, and run the ablation variants.

#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "s2s/config.hpp"
#include "s2s/io.hpp"
#include "s2s/metrics.hpp"
#include "s2s/phantom.hpp"
#include "s2s/recon.hpp"

namespace s2s::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kFormatVersion = 1;

inline std::string bin_file(const std::string& stem, std::size_t bin) {
  return stem + "_bin" + std::to_string(bin) + ".f32";
}

/// Canonical config without the output directory, so reruns into different
/// directories hash identically.
inline json hashed_config(const RunConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output");
  return j;
}

inline std::string config_hash(const RunConfig& cfg) { return io::sha256_hex(hashed_config(cfg).dump()); }

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  const fs::path probe = dir / ".write-probe";
  {
    std::ofstream out(probe);
    if (!out) throw IoError("output directory is not writable: " + dir.string());
  }
  fs::remove(probe);
}

inline json bin_meta(const RunConfig& cfg, std::size_t b) {
  return {{"bin", b},
          {"bin_edges_kev", {cfg.noise.bin_edges_kev[b], cfg.noise.bin_edges_kev[b + 1]}},
          {"geometry", geometry_json(cfg.geometry)}};
}

/// Writes sinograms, ground truth and the manifest. Returns the manifest.
inline json simulate(const RunConfig& cfg, const fs::path& dir) {
  cfg.validate();
  ensure_dir(dir);
  const auto geom = cfg.geometry.build();
  const auto bins = cfg.noise.bins();
  const auto phantom = make_phantom(cfg.phantom, geom, bins.bin_count());
  const SystemMatrix a(geom);
  const auto sino = simulate_counts(phantom, a, bins, cfg.noise_seed());

  std::vector<std::string> files;
  json bin_seeds = json::array();
  for (std::size_t b = 0; b < bins.bin_count(); ++b) {
    const auto sub_seed = mix_seed(cfg.noise_seed(), b);
    bin_seeds.push_back(sub_seed);
    json meta = bin_meta(cfg, b);
    meta["kind"] = "sinogram";
    meta["units"] = "line integral";
    meta["noise"] = cfg.noise.enabled ? "on" : "off";
    if (cfg.noise.enabled) {
      meta["photons"] = bins.photons[b];
      meta["seed"] = sub_seed;
      meta["clamped_counts"] = sino.clamped_counts[b];
    }
    files.push_back(bin_file("sino", b));
    io::write_array(dir / files.back(), sino.bins[b], meta);

    json tmeta = bin_meta(cfg, b);
    tmeta["kind"] = "ground_truth";
    tmeta["units"] = "mm^-1";
    files.push_back(bin_file("truth", b));
    io::write_array(dir / files.back(), phantom.truth.bins[b], tmeta);
    if (sino.clamped_counts[b] > 0)
      std::clog << "bin " << b << ": " << sino.clamped_counts[b]
                << " zero-count readings clamped to " << kMinCounts << " counts\n";
  }
  json manifest{{"kind", "simulation"},
                {"format_version", kFormatVersion},
                {"config_hash", config_hash(cfg)},
                {"config", hashed_config(cfg)},
                {"geometry", geometry_json(cfg.geometry)},
                {"bins", bins.bin_count()},
                {"noise", cfg.noise.enabled ? "on" : "off"},
                {"seeds", {{"master", cfg.seed}, {"noise", cfg.noise_seed()}, {"bins", bin_seeds}}}};
  return io::write_manifest(dir, manifest, files);
}

struct SimulationData {
  json manifest;
  SpectralSinogram sinogram;
  SpectralImageStack truth;
};

/// Loads a verified simulation directory and checks it against `cfg`.
inline SimulationData load_simulation(const RunConfig& cfg, const fs::path& dir) {
  SimulationData d;
  d.manifest = io::load_manifest(dir);
  if (d.manifest.value("kind", "") != "simulation")
    throw IoError(dir.string() + " does not hold a simulation");
  if (d.manifest.at("geometry") != geometry_json(cfg.geometry))
    throw ConfigError("geometry in config does not match the simulation manifest in " + dir.string());
  const auto bins = d.manifest.at("bins").get<std::size_t>();
  if (bins != cfg.noise.bins().bin_count())
    throw ConfigError("config lists " + std::to_string(cfg.noise.bins().bin_count()) +
                      " energy bins, simulation has " + std::to_string(bins));
  const auto geom = cfg.geometry.build();
  d.sinogram.geometry = geom;
  for (std::size_t b = 0; b < bins; ++b) {
    auto s = io::read_array(dir / bin_file("sino", b));
    if (s.data.shape() != geom.sinogram_shape())
      throw ConfigError("sinogram shape " + shape_string(s.data.shape()) + " does not match geometry");
    d.sinogram.photons_per_bin.push_back(s.meta.value("photons", std::numeric_limits<double>::infinity()));
    d.sinogram.bins.push_back(std::move(s.data));
    auto t = io::read_array(dir / bin_file("truth", b));
    if (t.data.shape() != geom.image_shape())
      throw ConfigError("ground truth shape " + shape_string(t.data.shape()) + " does not match geometry");
    d.truth.bins.push_back(std::move(t.data));
  }
  d.sinogram.seed = d.manifest.at("seeds").at("noise").get<std::uint64_t>();
  return d;
}

inline const std::vector<std::string>& residual_header() {
  static const std::vector<std::string> h{"method", "bin", "iteration", "residual"};
  return h;
}

inline const std::vector<std::string>& loss_header() {
  static const std::vector<std::string> h{"method", "outer", "epoch", "n2n", "residual",
                                          "ssim", "lambda_r", "total"};
  return h;
}

inline const std::vector<std::string>& metric_header() {
  static const std::vector<std::string> h{"method", "bin", "blur_fraction", "psnr", "rmse"};
  return h;
}

struct ReconOutput {
  std::string method;
  SpectralImageStack images;
  LossReport losses;
};

/// Runs `cfg.algorithm` on a verified simulation directory and writes
/// images, CSV logs and a manifest into `out`. `method` labels the rows.
inline ReconOutput reconstruct(const RunConfig& cfg, const fs::path& sim_dir, const fs::path& out,
                               std::string method = "") {
  cfg.validate();
  if (method.empty()) method = cfg.algorithm;
  const auto sim = load_simulation(cfg, sim_dir);
  ensure_dir(out);
  for (const char* f : {"residuals.csv", "losses.csv"}) fs::remove(out / f);
  const SirtOperator op(cfg.geometry.build());

  io::CsvWriter residual_log(out / "residuals.csv", residual_header());
  auto log_residuals = [&](const std::vector<std::vector<double>>& history, std::vector<std::size_t>& done) {
    done.resize(history.size(), 0);
    for (std::size_t b = 0; b < history.size(); ++b)
      for (; done[b] < history[b].size(); ++done[b])
        residual_log.row({method, std::to_string(b), std::to_string(done[b] + 1),
                          io::csv_number(history[b][done[b]])});
  };
  std::vector<std::size_t> logged;
  std::vector<std::string> files;

  ReconOutput result{method, {}, {}};
  if (cfg.algorithm == "sirt" || cfg.algorithm == "tvm") {
    auto r = cfg.algorithm == "sirt" ? sirt_run(sim.sinogram, op, cfg.recon)
                                     : tvm_reconstruct(sim.sinogram, op, cfg.recon);
    log_residuals(r.residuals, logged);
    result.images = std::move(r.images);
  } else {
    io::CsvWriter loss_log(out / "losses.csv", loss_header());
    S2SObserver obs;
    obs.after_x_update = [&](int, const SplitState& s) { log_residuals(s.residuals, logged); };
    obs.after_epoch = [&](int k, const LossRecord& r) {
      loss_log.row({method, std::to_string(k), std::to_string(r.epoch), io::csv_number(r.n2n),
                    io::csv_number(r.residual), io::csv_number(r.ssim), io::csv_number(r.lambda_r),
                    io::csv_number(r.total)});
    };
    const auto tcfg = cfg.train_config();
    auto r = cfg.algorithm == "s2s" ? s2s_reconstruct(sim.sinogram, op, cfg.recon, tcfg, obs)
                                    : n2n_postprocess(sim.sinogram, op, cfg.recon, tcfg, obs);
    io::write_params(out / "denoiser.params", r.network);
    files.push_back("denoiser.params");
    files.push_back("losses.csv");
    result.images = std::move(r.output);
    result.losses = std::move(r.losses);
  }
  files.push_back("residuals.csv");

  for (std::size_t b = 0; b < result.images.bin_count(); ++b) {
    json meta = bin_meta(cfg, b);
    meta["kind"] = "reconstruction";
    meta["method"] = method;
    meta["units"] = "mm^-1";
    files.push_back(bin_file("recon", b));
    io::write_array(out / files.back(), result.images.bins[b], meta);
  }
  json manifest{{"kind", "reconstruction"},
                {"format_version", kFormatVersion},
                {"method", method},
                {"algorithm", cfg.algorithm},
                {"config_hash", config_hash(cfg)},
                {"config", hashed_config(cfg)},
                {"geometry", geometry_json(cfg.geometry)},
                {"bins", result.images.bin_count()},
                {"source_manifest", sim.manifest.at("manifest_sha256")},
                {"seeds", {{"master", cfg.seed}, {"train", cfg.train_seed()}}}};
  io::write_manifest(out, manifest, files);
  return result;
}

/// Metric rows for each reconstruction directory against the simulation's
/// ground truth.
inline std::vector<MetricRow> score(const RunConfig& cfg, const fs::path& sim_dir,
                                    const std::vector<fs::path>& recon_dirs) {
  const auto sim = load_simulation(cfg, sim_dir);
  std::vector<MetricRow> rows;
  for (const auto& dir : recon_dirs) {
    const auto manifest = io::load_manifest(dir);
    if (manifest.value("kind", "") != "reconstruction")
      throw IoError(dir.string() + " does not hold a reconstruction");
    if (manifest.at("geometry") != geometry_json(cfg.geometry))
      throw ConfigError("geometry of " + dir.string() + " does not match the config");
    std::vector<Image> recon;
    for (std::size_t b = 0; b < sim.truth.bin_count(); ++b)
      recon.push_back(io::read_array(dir / bin_file("recon", b)).data);
    auto part = evaluate(manifest.at("method").get<std::string>(), recon, sim.truth.bins,
                         cfg.metrics.roi, cfg.metrics.blur);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

inline void write_metrics(const fs::path& path, const std::vector<MetricRow>& rows) {
  fs::remove(path);
  io::CsvWriter csv(path, metric_header());
  for (const auto& r : rows)
    csv.row({r.method, std::to_string(r.bin),
             r.blur_fraction ? io::csv_number(*r.blur_fraction) : "undefined", io::csv_number(r.psnr),
             io::csv_number(r.rmse)});
}

/// Mean PSNR per method, in first-seen order.
inline std::vector<std::pair<std::string, double>> mean_psnr(const std::vector<MetricRow>& rows) {
  std::vector<std::pair<std::string, double>> means;
  std::vector<int> counts;
  for (const auto& r : rows) {
    auto it = std::find_if(means.begin(), means.end(), [&](const auto& m) { return m.first == r.method; });
    if (it == means.end()) {
      means.emplace_back(r.method, 0.0);
      counts.push_back(0);
      it = means.end() - 1;
    }
    it->second += r.psnr;
    counts[static_cast<std::size_t>(it - means.begin())] += 1;
  }
  for (std::size_t i = 0; i < means.size(); ++i) means[i].second /= counts[i];
  return means;
}

/// s2s, s2s without the spectral prior, and post-processing only; each into
/// its own subdirectory of `out`, scored into `out/ablation.csv`.
inline std::vector<MetricRow> ablate(const RunConfig& cfg, const fs::path& sim_dir, const fs::path& out) {
  struct Variant {
    std::string name;
    std::function<void(RunConfig&)> edit;
  };
  const std::vector<Variant> variants{
      {"s2s", [](RunConfig& c) { c.algorithm = "s2s"; }},
      {"s2s-no-prior", [](RunConfig& c) { c.algorithm = "s2s"; c.train.lambda_s = 0.0; }},
      {"n2n-post", [](RunConfig& c) { c.algorithm = "n2n-post"; }},
  };
  ensure_dir(out);
  std::vector<fs::path> dirs;
  for (const auto& v : variants) {
    RunConfig c = cfg;
    v.edit(c);
    dirs.push_back(out / v.name);
    reconstruct(c, sim_dir, dirs.back(), v.name);
  }
  auto rows = score(cfg, sim_dir, dirs);
  write_metrics(out / "ablation.csv", rows);
  return rows;
}

}  // namespace s2s::pipeline
