#pragma once

// Self-supervised denoiser: a compact residual U-net trained from the noisy
// reconstruction alone. Two half-resolution images are drawn from each input
// by picking two edge-adjacent pixels in every 2x2 cell; the network maps one
// onto the other, with a consistency term that compares the denoise-then-
// subsample path against subsample-then-denoise, plus the cross-energy
// structural-similarity prior.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "s2s/adam.hpp"
#include "s2s/autodiff.hpp"
#include "s2s/spectral.hpp"
#include "s2s/spectral_prior.hpp"

namespace s2s {

// ---------------------------------------------------------------------------
// Neighbor sub-sampling

/// Positions inside a 2x2 cell: 0 = top-left, 1 = top-right, 2 = bottom-left,
/// 3 = bottom-right. The four edge-adjacent pairs, in selection order.
inline constexpr std::array<std::array<std::uint8_t, 2>, 4> kAdjacentPairs{
    {{0, 1}, {2, 3}, {0, 2}, {1, 3}}};

/// Which pixel of every 2x2 cell goes to S1 and which to S2, per batch item.
struct SubsamplerPair {
  std::size_t batch = 0;
  std::size_t cells_h = 0;
  std::size_t cells_w = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> pair;  // index into kAdjacentPairs
  std::vector<std::uint8_t> first;  // cell position feeding S1
  std::vector<std::uint8_t> second;  // cell position feeding S2

  static SubsamplerPair generate(std::size_t batch, std::size_t height, std::size_t width,
                                 std::uint64_t seed) {
    if (height % 2 || width % 2 || height == 0 || width == 0)
      throw ShapeError("neighbor sub-sampling needs even, non-zero height and width; got " +
                       std::to_string(height) + "x" + std::to_string(width));
    SubsamplerPair m;
    m.batch = batch;
    m.cells_h = height / 2;
    m.cells_w = width / 2;
    m.seed = seed;
    const std::size_t n = batch * m.cells_h * m.cells_w;
    m.pair.resize(n);
    m.first.resize(n);
    m.second.resize(n);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, 3);
    std::bernoulli_distribution flip(0.5);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = static_cast<std::size_t>(pick(rng));
      const bool swap = flip(rng);
      m.pair[i] = static_cast<std::uint8_t>(p);
      m.first[i] = kAdjacentPairs[p][swap ? 1 : 0];
      m.second[i] = kAdjacentPairs[p][swap ? 0 : 1];
    }
    return m;
  }

  bool matches(const Shape& s) const {
    return s.size() == 4 && s[0] == batch && s[2] == 2 * cells_h && s[3] == 2 * cells_w;
  }
};

namespace detail {

inline std::size_t cell_offset(std::uint8_t pos, std::size_t w) {
  return (pos / 2) * w + (pos % 2);
}

}  // namespace detail

namespace ad {

enum class SubImage { first, second };

/// Gathers S1 or S2 of a (batch, channels, h, w) node.
template <class T>
Var<T> subsample(Var<T> x, const SubsamplerPair& mask, SubImage which) {
  const auto& v = x.value();
  if (!mask.matches(v.shape()))
    throw ShapeError("subsample: mask built for a different shape than " + shape_string(v.shape()));
  const std::size_t N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  const std::size_t ch = mask.cells_h, cw = mask.cells_w;
  const auto& pos = which == SubImage::first ? mask.first : mask.second;
  std::vector<std::size_t> src(N * C * ch * cw);
  Tensor<T> y({N, C, ch, cw});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < ch; ++i)
        for (std::size_t j = 0; j < cw; ++j) {
          const std::size_t cell = (n * ch + i) * cw + j;
          const std::size_t o = ((n * C + c) * ch + i) * cw + j;
          src[o] = ((n * C + c) * H + 2 * i) * W + 2 * j + s2s::detail::cell_offset(pos[cell], W);
          y[o] = v[src[o]];
        }
  return x.tape->record(std::move(y), {x}, [=, src = std::move(src)](Tape<T>& t, const Tensor<T>& g) {
    auto& dx = t.grad_buffer(x);
    for (std::size_t o = 0; o < g.size(); ++o) dx[src[o]] += g[o];
  });
}

}  // namespace ad

struct SubsampledImages {
  Image s1;
  Image s2;
  SubsamplerPair mask;
};

inline SubsampledImages neighbor_subsample(const Image& x, std::uint64_t seed) {
  require_rank(x.shape(), 2, "neighbor_subsample");
  auto mask = SubsamplerPair::generate(1, x.dim(0), x.dim(1), seed);
  ad::Tape<double> tape;
  auto in = tape.constant(x.reshaped({1, 1, x.dim(0), x.dim(1)}));
  const Shape half{x.dim(0) / 2, x.dim(1) / 2};
  auto s1 = ad::subsample(in, mask, ad::SubImage::first).value().reshaped(half);
  auto s2 = ad::subsample(in, mask, ad::SubImage::second).value().reshaped(half);
  return {std::move(s1), std::move(s2), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Network

struct DenoiserArch {
  std::size_t width0 = 32;  // full-resolution channels
  std::size_t width1 = 64;  // channels at 1/2 and 1/4 resolution
  bool bypass = false;  // identity network, for reduction tests
  double output_init_scale = 1e-3;  // near-identity start

  friend bool operator==(const DenoiserArch&, const DenoiserArch&) = default;
};

/// Two-level encoder-decoder with skip concatenations and a residual output,
/// f(x) = x + g(x). Works on images whose sides are multiples of 4.
template <class T>
class DenoiserNet {
 public:
  DenoiserNet() : DenoiserNet(DenoiserArch{}, 0) {}

  DenoiserNet(DenoiserArch arch, std::uint64_t seed) : arch_(arch) {
    if (arch_.bypass) return;
    const std::size_t w0 = arch_.width0, w1 = arch_.width1;
    std::mt19937_64 rng(seed);
    add_conv("enc0a", 1, w0, 3, rng);
    add_conv("enc0b", w0, w0, 3, rng);
    add_conv("enc1", w0, w1, 3, rng);
    add_conv("bottleneck", w1, w1, 3, rng);
    add_conv("dec1", 2 * w1, w0, 3, rng);
    add_conv("dec0", 2 * w0, w0, 3, rng);
    add_conv("head", w0, 1, 1, rng, arch_.output_init_scale);
  }

  const DenoiserArch& arch() const { return arch_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  /// Records f(x) for a (batch, 1, h, w) node. With `trainable` the
  /// parameters are bound so backward() reaches them.
  ad::Var<T> forward(ad::Tape<T>& tape, ad::Var<T> x, bool trainable = true) {
    if (arch_.bypass) return x;
    const auto& s = x.shape();
    require_rank(s, 4, "DenoiserNet");
    if (s[1] != 1 || s[2] % 4 || s[3] % 4 || s[2] == 0 || s[3] == 0)
      throw ShapeError("DenoiserNet: expects (batch, 1, h, w) with h, w multiples of 4; got " +
                       shape_string(s));
    auto conv = [&](const std::string& name, ad::Var<T> in, bool activate) {
      auto w = bind(tape, name + ".weight", trainable);
      auto b = bind(tape, name + ".bias", trainable);
      auto out = ad::conv2d(in, w, b, w.value().dim(2) / 2);
      return activate ? ad::relu(out) : out;
    };
    auto e0 = conv("enc0b", conv("enc0a", x, true), true);
    auto e1 = conv("enc1", ad::maxpool2(e0), true);
    auto bn = conv("bottleneck", ad::maxpool2(e1), true);
    auto d1 = conv("dec1", ad::concat_channels(ad::upsample2_nearest(bn), e1), true);
    auto d0 = conv("dec0", ad::concat_channels(ad::upsample2_nearest(d1), e0), true);
    return ad::add(x, conv("head", d0, false));
  }

  Tensor<T> infer(const Tensor<T>& x) {
    ad::Tape<T> tape;
    return forward(tape, tape.constant(x), false).value();
  }

 private:
  void add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                std::mt19937_64& rng, double scale = 0.0) {
    auto& w = params_.add(name + ".weight", {out, in, k, k});
    if (scale > 0.0) {
      std::normal_distribution<double> dist(0.0, scale);
      for (auto& v : w.value.values()) v = static_cast<T>(dist(rng));
    } else {
      he_normal_init(w.value, rng);
    }
    params_.add(name + ".bias", {out});
  }

  ad::Var<T> bind(ad::Tape<T>& tape, const std::string& name, bool trainable) {
    auto& p = params_[name];
    return trainable ? tape.parameter(p) : tape.constant(p.value);
  }

  DenoiserArch arch_;
  ParamSet<T> params_;
};

/// Anything with `Var<T> forward(Tape<T>&, Var<T>)`.
template <class Net, class T>
concept ImageDenoiser = requires(Net& net, ad::Tape<T>& tape, ad::Var<T> x) {
  { net.forward(tape, x) } -> std::same_as<ad::Var<T>>;
};

// ---------------------------------------------------------------------------
// Losses

/// mse(f(S1(x)), S2(x)).
template <class T, ImageDenoiser<T> Net>
ad::Var<T> loss_n2n(Net& net, ad::Var<T> x, const SubsamplerPair& mask) {
  auto& tape = *x.tape;
  auto s1 = ad::subsample(x, mask, ad::SubImage::first);
  auto s2 = ad::subsample(x, mask, ad::SubImage::second);
  return ad::mse(net.forward(tape, s1), s2);
}

/// mse(f(S1(x)) - S2(x), S1(f(x)) - S2(f(x))), same mask on both paths.
template <class T, ImageDenoiser<T> Net>
ad::Var<T> loss_residual(Net& net, ad::Var<T> x, const SubsamplerPair& mask) {
  auto& tape = *x.tape;
  auto s1 = ad::subsample(x, mask, ad::SubImage::first);
  auto s2 = ad::subsample(x, mask, ad::SubImage::second);
  auto full = net.forward(tape, x);
  auto lhs = ad::sub(net.forward(tape, s1), s2);
  auto rhs = ad::sub(ad::subsample(full, mask, ad::SubImage::first),
                     ad::subsample(full, mask, ad::SubImage::second));
  return ad::mse(lhs, rhs);
}

template <class T>
struct LossTerms {
  ad::Var<T> n2n;
  ad::Var<T> residual;
  ad::Var<T> ssim;  // L_SS
  ad::Var<T> total;
};

/// All terms of the training objective from one pair of forward passes:
/// n2n + lambda_s * L_SS + lambda_r * L_r. `reference` is (1, 1, h, w) in [0, 1].
template <class T, ImageDenoiser<T> Net>
LossTerms<T> training_losses(Net& net, ad::Var<T> x, ad::Var<T> reference,
                             const SubsamplerPair& mask, double lambda_s, double lambda_r,
                             const SsimParams& ssim_params = {}) {
  auto& tape = *x.tape;
  auto s1 = ad::subsample(x, mask, ad::SubImage::first);
  auto s2 = ad::subsample(x, mask, ad::SubImage::second);
  auto out_s1 = net.forward(tape, s1);
  auto full = net.forward(tape, x);
  LossTerms<T> terms;
  terms.n2n = ad::mse(out_s1, s2);
  terms.residual = ad::mse(ad::sub(out_s1, s2),
                           ad::sub(ad::subsample(full, mask, ad::SubImage::first),
                                   ad::subsample(full, mask, ad::SubImage::second)));
  terms.ssim = ad::l_ss_against(full, reference, ssim_params);
  terms.total = ad::weighted_sum<T>({{T{1}, terms.n2n},
                                     {static_cast<T>(lambda_s), terms.ssim},
                                     {static_cast<T>(lambda_r), terms.residual}});
  return terms;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 50;
  int steps_per_epoch = 10;
  double learning_rate = 1e-4;
  double lr_decay = 0.9;
  int lr_decay_every = 10;
  double lambda_s = 0.1;
  double lambda_r_max = 1.0;
  int lambda_r_ramp_epochs = 20;
  double normalization_quantile = 0.99;
  std::uint64_t seed = 0;
  DenoiserArch arch;

  /// Linear ramp from 0 to lambda_r_max over the ramp, then constant.
  double lambda_r(int epoch) const {
    if (lambda_r_ramp_epochs <= 0) return lambda_r_max;
    return lambda_r_max * std::min(1.0, static_cast<double>(epoch) / lambda_r_ramp_epochs);
  }

  void validate() const {
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (steps_per_epoch < 1) throw ConfigError("train.steps_per_epoch must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train.lr_decay must be in (0, 1]");
    if (lr_decay_every < 1) throw ConfigError("train.lr_decay_every must be >= 1");
    if (!(lambda_s >= 0.0)) throw ConfigError("train.lambda_s must be >= 0");
    if (!(lambda_r_max >= 0.0)) throw ConfigError("train.lambda_r_max must be >= 0");
    if (lambda_r_ramp_epochs < 0) throw ConfigError("train.lambda_r_ramp_epochs must be >= 0");
    if (!(normalization_quantile > 0.0 && normalization_quantile <= 1.0))
      throw ConfigError("train.normalization_quantile must be in (0, 1]");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Epoch-averaged loss terms. total == n2n + lambda_s * ssim + lambda_r * residual.
struct LossRecord {
  int epoch = 0;
  double n2n = 0.0;
  double residual = 0.0;
  double ssim = 0.0;
  double total = 0.0;
  double lambda_r = 0.0;
  double lambda_s = 0.0;
  double learning_rate = 0.0;

  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

using LossReport = std::vector<LossRecord>;

/// Network plus optimizer state, carried across outer iterations.
template <class T>
struct DenoiserModel {
  DenoiserNet<T> net;
  AdamState<T> adam;
  int epochs_done = 0;

  explicit DenoiserModel(const TrainConfig& cfg)
      : net(cfg.arch, mix_seed(cfg.seed, 0xD3)),
        adam(StepDecay{cfg.learning_rate, cfg.lr_decay, cfg.lr_decay_every}) {}
};

/// Per-bin scale used to bring bins with different dynamic ranges to ~1.
inline std::vector<double> bin_scales(const SpectralImageStack& stack, double quantile) {
  std::vector<double> scales;
  for (const auto& bin : stack.bins) {
    std::vector<double> v(bin.values().begin(), bin.values().end());
    const auto k = static_cast<std::size_t>(
        std::clamp(std::ceil(quantile * static_cast<double>(v.size())) - 1.0, 0.0,
                   static_cast<double>(v.size() - 1)));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    double s = v[k];
    if (!(s > 0.0)) {
      s = 0.0;
      for (double x : bin.values()) s = std::max(s, std::abs(x));
    }
    scales.push_back(s > 0.0 ? s : 1.0);
  }
  return scales;
}

template <class T>
Tensor<T> scaled_batch(const SpectralImageStack& stack, const std::vector<double>& scales) {
  Tensor<T> x = stack.to_batch<T>();
  const std::size_t per = x.size() / stack.bin_count();
  for (std::size_t b = 0; b < stack.bin_count(); ++b)
    for (std::size_t i = 0; i < per; ++i)
      x[b * per + i] = static_cast<T>(stack.bins[b][i] / scales[b]);
  return x;
}

/// Trains for `epochs` more epochs on `stack` (bins as the batch) against a
/// fixed structural reference in [0, 1]. Losses are evaluated on the
/// scale-normalized images. Throws NumericError on a non-finite loss.
template <class T>
LossReport train(DenoiserModel<T>& model, const SpectralImageStack& stack, const Image& reference,
                 const TrainConfig& cfg, int epochs) {
  cfg.validate();
  LossReport report;
  if (epochs <= 0 || model.net.arch().bypass) return report;
  const auto scales = bin_scales(stack, cfg.normalization_quantile);
  const Tensor<T> input = scaled_batch<T>(stack, scales);
  const Tensor<T> ref = reference.cast<T>().reshaped({1, 1, reference.dim(0), reference.dim(1)});
  const std::size_t bins = stack.bin_count(), n = stack.size();

  for (int e = 0; e < epochs; ++e) {
    const int epoch = model.epochs_done;
    model.adam.set_epoch(epoch);
    const double lambda_r = cfg.lambda_r(epoch);
    LossRecord rec;
    rec.epoch = epoch;
    rec.lambda_r = lambda_r;
    rec.lambda_s = cfg.lambda_s;
    rec.learning_rate = model.adam.learning_rate;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const auto stream = static_cast<std::uint64_t>(epoch) * 1000003ULL + static_cast<std::uint64_t>(s);
      const auto mask = SubsamplerPair::generate(bins, n, n, mix_seed(cfg.seed, stream));
      model.net.params().zero_grad();
      ad::Tape<T> tape;
      auto x = tape.constant(input);
      auto r = tape.constant(ref);
      auto terms = training_losses(model.net, x, r, mask, cfg.lambda_s, lambda_r);
      const double vals[3] = {terms.n2n.scalar(), terms.residual.scalar(), terms.ssim.scalar()};
      const char* names[3] = {"n2n", "residual", "l_ss"};
      for (int q = 0; q < 3; ++q)
        if (!std::isfinite(vals[q]))
          throw NumericError("non-finite " + std::string(names[q]) + " loss at epoch " +
                             std::to_string(epoch));
      tape.backward(terms.total);
      adam_step(model.net.params(), model.adam);
      rec.n2n += vals[0];
      rec.residual += vals[1];
      rec.ssim += vals[2];
    }
    const double inv = 1.0 / cfg.steps_per_epoch;
    rec.n2n *= inv;
    rec.residual *= inv;
    rec.ssim *= inv;
    rec.total = rec.n2n + rec.lambda_s * rec.ssim + rec.lambda_r * rec.residual;
    report.push_back(rec);
    ++model.epochs_done;
  }
  return report;
}

/// f(x) per bin, in the original attenuation units.
template <class T>
SpectralImageStack apply(DenoiserModel<T>& model, const SpectralImageStack& stack,
                         double quantile = 0.99) {
  const auto scales = bin_scales(stack, quantile);
  auto out = SpectralImageStack::from_batch(model.net.infer(scaled_batch<T>(stack, scales)));
  for (std::size_t b = 0; b < out.bin_count(); ++b)
    for (auto& v : out.bins[b].values()) v *= scales[b];
  return out;
}

}  // namespace s2s
