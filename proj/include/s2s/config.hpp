#pragma once

// Run configuration: JSON in, JSON out. Parsing is strict (unknown keys and
// wrong types are rejected with the offending field path) and serialization is
// canonical, so parse -> serialize -> parse is the identity.

#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "s2s/denoiser.hpp"
#include "s2s/errors.hpp"
#include "s2s/geometry.hpp"
#include "s2s/metrics.hpp"
#include "s2s/phantom.hpp"
#include "s2s/recon.hpp"
#include "s2s/spectral.hpp"

namespace s2s {

using nlohmann::json;

inline const std::vector<std::string>& algorithm_names() {
  static const std::vector<std::string> names{"sirt", "tvm", "n2n-post", "s2s"};
  return names;
}

struct GeometryConfig {
  double source_to_isocenter = 210.0;
  double source_to_detector = 350.0;
  std::size_t detector_count = 128;
  double detector_pitch = 0.6;
  std::size_t views = 180;
  std::size_t image_size = 128;
  double pixel_size = 0.35;

  FanBeamGeometry build() const {
    if (views == 0) throw ConfigError("geometry.views must be > 0");
    auto g = FanBeamGeometry::uniform(views, detector_count, detector_pitch, image_size, pixel_size,
                                      source_to_isocenter, source_to_detector);
    g.validate();
    return g;
  }

  friend bool operator==(const GeometryConfig&, const GeometryConfig&) = default;
};

struct NoiseConfig {
  bool enabled = true;
  std::vector<double> bin_edges_kev{20.0, 30.0, 40.0, 50.0, 60.0, 70.0};
  double photons_per_bin = 1e4;
  std::vector<double> photons_override;  // per bin; empty means uniform

  /// Infinite photon counts switch noise off.
  EnergyBinSpec bins() const {
    auto spec = EnergyBinSpec::uniform(bin_edges_kev, enabled ? photons_per_bin
                                                              : std::numeric_limits<double>::infinity());
    if (enabled && !photons_override.empty()) {
      if (photons_override.size() != spec.bin_count())
        throw ConfigError("noise.photons_override must list one value per bin");
      spec.photons = photons_override;
    }
    return spec;
  }

  friend bool operator==(const NoiseConfig&, const NoiseConfig&) = default;
};

struct MetricsConfig {
  Roi roi{32, 32, 64, 64};
  BlurParams blur;

  friend bool operator==(const MetricsConfig& a, const MetricsConfig& b) {
    return a.roi == b.roi && a.blur.edge_threshold == b.blur.edge_threshold &&
           a.blur.jnb_width == b.blur.jnb_width && a.blur.beta == b.blur.beta &&
           a.blur.probability_cutoff == b.blur.probability_cutoff;
  }
};

struct RunConfig {
  std::uint64_t seed = 20240521;
  std::string algorithm = "s2s";
  std::string output = "out";
  GeometryConfig geometry;
  PhantomConfig phantom = desk_phantom_config();
  NoiseConfig noise;
  ReconConfig recon;
  TrainConfig train;
  MetricsConfig metrics;

  // Every stochastic component draws from a stream of the master seed.
  std::uint64_t noise_seed() const { return mix_seed(seed, 1); }
  std::uint64_t train_seed() const { return mix_seed(seed, 2); }

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = train_seed();
    return t;
  }

  void validate() const {
    bool known = false;
    for (const auto& a : algorithm_names()) known = known || a == algorithm;
    if (!known) throw ConfigError("algorithm: unknown value '" + algorithm + "'");
    const auto g = geometry.build();
    if (g.image_size % 4 != 0) throw ConfigError("geometry.image_size must be a multiple of 4");
    noise.bins().validate();
    recon.validate();
    train.validate();
    if (metrics.roi.rows < 3 || metrics.roi.cols < 3 ||
        metrics.roi.row + metrics.roi.rows > g.image_size ||
        metrics.roi.col + metrics.roi.cols > g.image_size)
      throw ConfigError("metrics.roi must be at least 3x3 and inside the image");
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace config_detail {

/// Typed field access over one JSON object, recording which keys were read
/// so the rest can be reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    if (auto* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key) + ": expected a number");
      out = v->get<double>();
    }
  }

  template <class I>
  void integer(const std::string& key, I& out) {
    if (auto* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
      if constexpr (std::is_unsigned_v<I>) {
        if (v->is_number_unsigned()) {
          out = v->get<I>();
          return;
        }
        throw ConfigError(field(key) + ": expected a non-negative integer");
      } else {
        out = v->get<I>();
      }
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (auto* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }

  void string(const std::string& key, std::string& out) {
    if (auto* v = find(key)) {
      if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  void numbers(const std::string& key, std::vector<double>& out, std::size_t exact = 0) {
    if (auto* v = find(key)) out = number_list(*v, field(key), exact);
  }

  static std::vector<double> number_list(const json& v, const std::string& where, std::size_t exact = 0) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array of numbers");
    if (exact && v.size() != exact)
      throw ConfigError(where + ": expected " + std::to_string(exact) + " values");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(where + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.contains(key)) throw ConfigError(field(key) + ": unknown key");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_geometry(const json& j, GeometryConfig& g) {
  Fields f(j, "geometry");
  f.number("source_to_isocenter", g.source_to_isocenter);
  f.number("source_to_detector", g.source_to_detector);
  f.integer("detector_count", g.detector_count);
  f.number("detector_pitch", g.detector_pitch);
  f.integer("views", g.views);
  f.integer("image_size", g.image_size);
  f.number("pixel_size", g.pixel_size);
  f.finish();
}

inline void read_phantom(const json& j, PhantomConfig& p) {
  Fields f(j, "phantom");
  f.string("background", p.background);
  if (auto* m = f.find("materials")) {
    if (!m->is_object()) throw ConfigError("phantom.materials: expected an object");
    p.materials.clear();
    for (const auto& [name, mu] : m->items())
      p.materials[name] = Fields::number_list(mu, "phantom.materials." + name);
  }
  if (auto* prims = f.find("primitives")) {
    if (!prims->is_array()) throw ConfigError("phantom.primitives: expected an array");
    p.primitives.clear();
    for (std::size_t i = 0; i < prims->size(); ++i) {
      Fields e((*prims)[i], "phantom.primitives[" + std::to_string(i) + "]");
      EllipsePrimitive prim;
      std::vector<double> center{0.0, 0.0}, axes{1.0, 1.0};
      e.numbers("center_mm", center, 2);
      e.numbers("semi_axes_mm", axes, 2);
      e.number("angle_deg", prim.angle_deg);
      e.string("material", prim.material);
      e.finish();
      if (prim.material.empty()) throw ConfigError(e.field("material") + ": required");
      if (!(axes[0] > 0.0 && axes[1] > 0.0)) throw ConfigError(e.field("semi_axes_mm") + ": must be > 0");
      prim.cx = center[0];
      prim.cy = center[1];
      prim.a = axes[0];
      prim.b = axes[1];
      p.primitives.push_back(prim);
    }
  }
  f.finish();
}

inline void read_noise(const json& j, NoiseConfig& n) {
  Fields f(j, "noise");
  f.boolean("enabled", n.enabled);
  f.numbers("bin_edges_kev", n.bin_edges_kev);
  f.number("photons_per_bin", n.photons_per_bin);
  f.numbers("photons_override", n.photons_override);
  f.finish();
}

inline void read_recon(const json& j, ReconConfig& r) {
  Fields f(j, "recon");
  f.integer("sirt_iterations", r.sirt_iterations);
  f.integer("outer_iterations", r.outer_iterations);
  f.integer("sweeps_per_outer", r.sweeps_per_outer);
  f.number("lambda1", r.lambda1);
  f.number("relaxation", r.relaxation);
  f.boolean("nonnegative", r.nonnegative);
  f.number("tv_weight", r.tv_weight);
  f.number("tv_step", r.tv_step);
  f.integer("tv_iterations", r.tv_iterations);
  f.number("tv_epsilon", r.tv_epsilon);
  f.number("divergence_factor", r.divergence_factor);
  f.finish();
}

inline void read_train(const json& j, TrainConfig& t) {
  Fields f(j, "train");
  f.integer("epochs", t.epochs);
  f.integer("steps_per_epoch", t.steps_per_epoch);
  f.number("learning_rate", t.learning_rate);
  f.number("lr_decay", t.lr_decay);
  f.integer("lr_decay_every", t.lr_decay_every);
  f.number("lambda_s", t.lambda_s);
  f.number("lambda_r_max", t.lambda_r_max);
  f.integer("lambda_r_ramp_epochs", t.lambda_r_ramp_epochs);
  f.number("normalization_quantile", t.normalization_quantile);
  f.integer("width0", t.arch.width0);
  f.integer("width1", t.arch.width1);
  f.number("output_init_scale", t.arch.output_init_scale);
  f.finish();
}

inline void read_metrics(const json& j, MetricsConfig& m) {
  Fields f(j, "metrics");
  if (auto* roi = f.find("roi")) {
    const auto v = Fields::number_list(*roi, "metrics.roi", 4);
    for (double x : v)
      if (!(x >= 0.0) || x != std::floor(x))
        throw ConfigError("metrics.roi: expected non-negative integers [row, col, rows, cols]");
    m.roi = {static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]),
             static_cast<std::size_t>(v[2]), static_cast<std::size_t>(v[3])};
  }
  f.number("edge_threshold", m.blur.edge_threshold);
  f.number("jnb_width", m.blur.jnb_width);
  f.number("beta", m.blur.beta);
  f.number("probability_cutoff", m.blur.probability_cutoff);
  f.finish();
}

/// "line L, column C" for a byte offset into `text`.
inline std::string line_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace config_detail

/// Builds a RunConfig from JSON, filling absent fields with defaults.
inline RunConfig parse_run_config(const json& j) {
  using config_detail::Fields;
  RunConfig cfg;
  Fields f(j, "");
  f.integer("seed", cfg.seed);
  f.string("algorithm", cfg.algorithm);
  f.string("output", cfg.output);
  if (auto* v = f.find("geometry")) config_detail::read_geometry(*v, cfg.geometry);
  if (auto* v = f.find("phantom")) config_detail::read_phantom(*v, cfg.phantom);
  if (auto* v = f.find("noise")) config_detail::read_noise(*v, cfg.noise);
  if (auto* v = f.find("recon")) config_detail::read_recon(*v, cfg.recon);
  if (auto* v = f.find("train")) config_detail::read_train(*v, cfg.train);
  if (auto* v = f.find("metrics")) config_detail::read_metrics(*v, cfg.metrics);
  f.finish();
  cfg.validate();
  return cfg;
}

inline RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config is not valid JSON at " + config_detail::line_column(text, e.byte));
  }
  return parse_run_config(j);
}

inline json geometry_json(const GeometryConfig& g) {
  return {{"source_to_isocenter", g.source_to_isocenter},
          {"source_to_detector", g.source_to_detector},
          {"detector_count", g.detector_count},
          {"detector_pitch", g.detector_pitch},
          {"views", g.views},
          {"image_size", g.image_size},
          {"pixel_size", g.pixel_size}};
}

/// Canonical JSON form; object keys are sorted.
inline json to_json(const RunConfig& c) {
  json materials = json::object();
  for (const auto& [name, mu] : c.phantom.materials) materials[name] = mu;
  json prims = json::array();
  for (const auto& p : c.phantom.primitives)
    prims.push_back({{"center_mm", {p.cx, p.cy}},
                     {"semi_axes_mm", {p.a, p.b}},
                     {"angle_deg", p.angle_deg},
                     {"material", p.material}});
  const auto& r = c.recon;
  const auto& t = c.train;
  const auto& m = c.metrics;
  return {
      {"seed", c.seed},
      {"algorithm", c.algorithm},
      {"output", c.output},
      {"geometry", geometry_json(c.geometry)},
      {"phantom", {{"background", c.phantom.background}, {"materials", materials}, {"primitives", prims}}},
      {"noise",
       {{"enabled", c.noise.enabled},
        {"bin_edges_kev", c.noise.bin_edges_kev},
        {"photons_per_bin", c.noise.photons_per_bin},
        {"photons_override", c.noise.photons_override}}},
      {"recon",
       {{"sirt_iterations", r.sirt_iterations},
        {"outer_iterations", r.outer_iterations},
        {"sweeps_per_outer", r.sweeps_per_outer},
        {"lambda1", r.lambda1},
        {"relaxation", r.relaxation},
        {"nonnegative", r.nonnegative},
        {"tv_weight", r.tv_weight},
        {"tv_step", r.tv_step},
        {"tv_iterations", r.tv_iterations},
        {"tv_epsilon", r.tv_epsilon},
        {"divergence_factor", r.divergence_factor}}},
      {"train",
       {{"epochs", t.epochs},
        {"steps_per_epoch", t.steps_per_epoch},
        {"learning_rate", t.learning_rate},
        {"lr_decay", t.lr_decay},
        {"lr_decay_every", t.lr_decay_every},
        {"lambda_s", t.lambda_s},
        {"lambda_r_max", t.lambda_r_max},
        {"lambda_r_ramp_epochs", t.lambda_r_ramp_epochs},
        {"normalization_quantile", t.normalization_quantile},
        {"width0", t.arch.width0},
        {"width1", t.arch.width1},
        {"output_init_scale", t.arch.output_init_scale}}},
      {"metrics",
       {{"roi", {m.roi.row, m.roi.col, m.roi.rows, m.roi.cols}},
        {"edge_threshold", m.blur.edge_threshold},
        {"jnb_width", m.blur.jnb_width},
        {"beta", m.blur.beta},
        {"probability_cutoff", m.blur.probability_cutoff}}},
  };
}

inline std::string canonical_string(const RunConfig& c) { return to_json(c).dump(); }

}  // namespace s2s
