#pragma once

// Iterative reconstruction: SIRT, a TV-regularized baseline, and the
// split-variable loop that alternates a coupled SIRT data step with training
// and applying the self-supervised denoiser.

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "s2s/denoiser.hpp"
#include "s2s/geometry.hpp"
#include "s2s/spectral.hpp"
#include "s2s/spectral_prior.hpp"

namespace s2s {

struct ReconConfig {
  int sirt_iterations = 50;  // plain SIRT, TVM and post-processing runs
  int outer_iterations = 5;  // K
  int sweeps_per_outer = 10;
  double lambda1 = 0.1;  // coupling, relative to the mean column sum
  double relaxation = 1.0;  // omega
  bool nonnegative = true;
  double tv_weight = 1.0;
  double tv_step = 2e-5;  // mm^-1 per unit TV gradient
  int tv_iterations = 5;
  double tv_epsilon = 1e-8;
  double divergence_factor = 10.0;

  void validate() const {
    if (sirt_iterations < 1) throw ConfigError("recon.sirt_iterations must be >= 1");
    if (outer_iterations < 1) throw ConfigError("recon.outer_iterations must be >= 1");
    if (sweeps_per_outer < 1) throw ConfigError("recon.sweeps_per_outer must be >= 1");
    if (!(lambda1 >= 0.0)) throw ConfigError("recon.lambda1 must be >= 0");
    if (!(relaxation > 0.0 && relaxation < 2.0))
      throw ConfigError("recon.relaxation must lie in (0, 2)");
    if (!(tv_weight >= 0.0)) throw ConfigError("recon.tv_weight must be >= 0");
    if (!(tv_step > 0.0)) throw ConfigError("recon.tv_step must be > 0");
    if (tv_iterations < 0) throw ConfigError("recon.tv_iterations must be >= 0");
  }

  friend bool operator==(const ReconConfig&, const ReconConfig&) = default;
};

/// Reconstruction 𝒳, denoised auxiliary 𝒵, and per-bin data residual
/// ||y - A x|| recorded before every sweep.
struct SplitState {
  SpectralImageStack x;
  SpectralImageStack z;
  int iteration = 0;
  std::vector<std::vector<double>> residuals;

  static SplitState zeros(std::size_t bins, std::size_t n) {
    SplitState s;
    for (std::size_t b = 0; b < bins; ++b) {
      s.x.bins.push_back(make_image(n));
      s.z.bins.push_back(make_image(n));
    }
    s.residuals.resize(bins);
    return s;
  }
};

/// Cached system matrix with its SIRT normalizations.
class SirtOperator {
 public:
  explicit SirtOperator(const FanBeamGeometry& geom)
      : a_(geom), inv_rows_(inverse_or_one(a_.row_sums())), cols_(a_.col_sums()) {
    mean_col_ = std::accumulate(cols_.values().begin(), cols_.values().end(), 0.0) /
                static_cast<double>(cols_.size());
  }

  const SystemMatrix& matrix() const { return a_; }
  const FanBeamGeometry& geometry() const { return a_.geometry(); }
  const Sinogram& inverse_row_sums() const { return inv_rows_; }
  const Image& col_sums() const { return cols_; }
  double mean_col_sum() const { return mean_col_; }

 private:
  SystemMatrix a_;
  Sinogram inv_rows_;
  Image cols_;
  double mean_col_ = 0.0;
};

namespace detail {

inline double l2(const Tensor<double>& v) { return l2_norm(v.values()); }

// x <- x + omega / (C + lambda) * (A^T R^-1 (y - A x) + lambda (z - x));
// returns ||y - A x|| before the update.
inline double coupled_sweep(Image& x, const Image* z, const Sinogram& y, const SirtOperator& op,
                            double lambda, const ReconConfig& cfg) {
  const auto& a = op.matrix();
  Sinogram r = a.forward(x);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = y[i] - r[i];
  const double residual = l2(r);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] *= op.inverse_row_sums()[i];
  const Image bp = a.back(r);
  const auto& c = op.col_sums();
  for (std::size_t j = 0; j < x.size(); ++j) {
    double g = bp[j];
    double d = c[j];
    if (lambda != 0.0) {
      g += lambda * ((*z)[j] - x[j]);
      d += lambda;
    }
    const double inv = d == 0.0 ? 1.0 : 1.0 / d;
    x[j] += cfg.relaxation * (inv * g);
    if (cfg.nonnegative && x[j] < 0.0) x[j] = 0.0;
  }
  return residual;
}

inline void check_divergence(const std::vector<double>& history, const ReconConfig& cfg,
                             std::size_t bin) {
  if (history.empty()) return;
  const double first = history.front(), last = history.back();
  if (!std::isfinite(last) || (first > 0.0 && last > cfg.divergence_factor * first))
    throw NumericError("reconstruction diverged in bin " + std::to_string(bin) + ": residual " +
                       std::to_string(last) + " vs initial " + std::to_string(first));
}

}  // namespace detail

/// `sweeps` coupled data-consistency sweeps per bin. `lambda_abs` is the
/// absolute coupling weight; zero gives plain SIRT sweeps.
inline void x_update(SplitState& state, const SpectralSinogram& sino, const SirtOperator& op,
                     const ReconConfig& cfg, double lambda_abs, int sweeps = 1) {
  if (sino.bin_count() != state.x.bin_count())
    throw ShapeError("x_update: sinogram and state bin counts differ");
  if (state.residuals.size() != state.x.bin_count()) state.residuals.resize(state.x.bin_count());
  for (std::size_t b = 0; b < sino.bin_count(); ++b) {
    if (sino.bins[b].shape() != op.geometry().sinogram_shape())
      throw ShapeError("x_update: sinogram " + shape_string(sino.bins[b].shape()) +
                       " does not match geometry");
    for (int s = 0; s < sweeps; ++s) {
      const Image* z = lambda_abs != 0.0 ? &state.z.bins[b] : nullptr;
      state.residuals[b].push_back(
          detail::coupled_sweep(state.x.bins[b], z, sino.bins[b], op, lambda_abs, cfg));
      detail::check_divergence(state.residuals[b], cfg, b);
    }
  }
  state.iteration += 1;
}

struct SirtResult {
  SpectralImageStack images;
  std::vector<std::vector<double>> residuals;
};

/// x <- x + omega C^-1 A^T R^-1 (y - A x) from zero, cfg.sirt_iterations times.
inline SirtResult sirt_run(const SpectralSinogram& sino, const SirtOperator& op,
                           const ReconConfig& cfg) {
  cfg.validate();
  auto state = SplitState::zeros(sino.bin_count(), op.geometry().image_size);
  x_update(state, sino, op, cfg, 0.0, cfg.sirt_iterations);
  return {std::move(state.x), std::move(state.residuals)};
}

// ---------------------------------------------------------------------------
// Total variation

/// Isotropic smoothed TV, sum sqrt(dx^2 + dy^2 + eps), forward differences.
inline double total_variation(const Image& x, double eps = 1e-8) {
  const std::size_t h = x.dim(0), w = x.dim(1);
  double tv = 0.0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dx = c + 1 < w ? x.at(r, c + 1) - x.at(r, c) : 0.0;
      const double dy = r + 1 < h ? x.at(r + 1, c) - x.at(r, c) : 0.0;
      tv += std::sqrt(dx * dx + dy * dy + eps);
    }
  return tv;
}

inline Image tv_gradient(const Image& x, double eps = 1e-8) {
  const std::size_t h = x.dim(0), w = x.dim(1);
  Image g(x.shape());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dx = c + 1 < w ? x.at(r, c + 1) - x.at(r, c) : 0.0;
      const double dy = r + 1 < h ? x.at(r + 1, c) - x.at(r, c) : 0.0;
      const double norm = std::sqrt(dx * dx + dy * dy + eps);
      const double ux = dx / norm, uy = dy / norm;
      g.at(r, c) -= ux + uy;
      if (c + 1 < w) g.at(r, c + 1) += ux;
      if (r + 1 < h) g.at(r + 1, c) += uy;
    }
  return g;
}

/// Gradient-descent steps on the weighted TV of one image.
inline void tv_descent(Image& x, const ReconConfig& cfg) {
  const double step = cfg.tv_weight * cfg.tv_step;
  for (int it = 0; it < cfg.tv_iterations; ++it) {
    const Image g = tv_gradient(x, cfg.tv_epsilon);
    for (std::size_t j = 0; j < x.size(); ++j) {
      x[j] -= step * g[j];
      if (cfg.nonnegative && x[j] < 0.0) x[j] = 0.0;
    }
  }
}

/// SIRT sweeps each followed by TV descent, per bin.
inline SirtResult tvm_reconstruct(const SpectralSinogram& sino, const SirtOperator& op,
                                  const ReconConfig& cfg) {
  cfg.validate();
  auto state = SplitState::zeros(sino.bin_count(), op.geometry().image_size);
  for (int it = 0; it < cfg.sirt_iterations; ++it) {
    x_update(state, sino, op, cfg, 0.0, 1);
    for (auto& img : state.x.bins) tv_descent(img, cfg);
  }
  return {std::move(state.x), std::move(state.residuals)};
}

// ---------------------------------------------------------------------------
// Split-variable loop with the learned denoiser

struct S2SResult {
  SpectralImageStack output;  // 𝒵 = f(𝒳) after the last outer iteration
  SpectralImageStack reconstruction;  // 𝒳
  LossReport losses;
  std::vector<std::vector<double>> residuals;
  ParamSet<float> network;  // trained denoiser weights
};

struct S2SSchedule {
  int outer_iterations = 5;
  int sweeps_per_outer = 10;
  bool feedback = true;  // couple the data step to 𝒵
};

/// Events emitted while the loop runs, for logging.
struct S2SObserver {
  std::function<void(int outer, const SplitState&)> after_x_update;
  std::function<void(int outer, const LossRecord&)> after_epoch;
};

/// Epochs of outer iteration k when `total` epochs are spread over `outer`.
inline int epochs_for_outer(int total, int outer, int k) {
  return total / outer + (k < total % outer ? 1 : 0);
}

template <class T = float>
S2SResult s2s_run(const SpectralSinogram& sino, const SirtOperator& op, const ReconConfig& cfg,
                  const TrainConfig& tcfg, const S2SSchedule& schedule,
                  const S2SObserver& observer = {}) {
  cfg.validate();
  tcfg.validate();
  const std::size_t n = op.geometry().image_size;
  auto state = SplitState::zeros(sino.bin_count(), n);
  DenoiserModel<T> model(tcfg);
  S2SResult result;
  const double lambda_abs = cfg.lambda1 * op.mean_col_sum();
  for (int k = 0; k < schedule.outer_iterations; ++k) {
    // No denoised estimate exists before the first training round.
    const double coupling = (k == 0 || !schedule.feedback) ? 0.0 : lambda_abs;
    x_update(state, sino, op, cfg, coupling, schedule.sweeps_per_outer);
    if (observer.after_x_update) observer.after_x_update(k, state);

    const Image reference = full_spectrum_reference(state.x);
    const int epochs = epochs_for_outer(tcfg.epochs, schedule.outer_iterations, k);
    auto losses = train(model, state.x, reference, tcfg, epochs);
    for (const auto& rec : losses) {
      if (observer.after_epoch) observer.after_epoch(k, rec);
      result.losses.push_back(rec);
    }
    state.z = apply(model, state.x, tcfg.normalization_quantile);
  }
  for (const auto& p : model.net.params())
    result.network.add(p.name, p.value.shape()).value = p.value.template cast<float>();
  result.output = std::move(state.z);
  result.reconstruction = std::move(state.x);
  result.residuals = std::move(state.residuals);
  return result;
}

/// Reconstruction with the denoiser inside the iteration (K outer rounds).
template <class T = float>
S2SResult s2s_reconstruct(const SpectralSinogram& sino, const SirtOperator& op,
                          const ReconConfig& cfg, const TrainConfig& tcfg,
                          const S2SObserver& observer = {}) {
  return s2s_run<T>(sino, op, cfg, tcfg, {cfg.outer_iterations, cfg.sweeps_per_outer, true},
                    observer);
}

/// SIRT once, then train on and denoise the fixed result.
template <class T = float>
S2SResult n2n_postprocess(const SpectralSinogram& sino, const SirtOperator& op,
                          const ReconConfig& cfg, const TrainConfig& tcfg,
                          const S2SObserver& observer = {}) {
  return s2s_run<T>(sino, op, cfg, tcfg, {1, cfg.sirt_iterations, false}, observer);
}

}  // namespace s2s
