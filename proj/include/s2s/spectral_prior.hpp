#pragma once

// Cross-energy structural similarity prior. Every bin is min-max normalized
// and compared by windowed SSIM against the normalized bin average; the loss
// is one minus the mean similarity.

#include <algorithm>
#include <cmath>
#include <vector>

#include "s2s/autodiff.hpp"
#include "s2s/spectral.hpp"

namespace s2s {

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double dynamic_range = 1.0;
  double k1 = 0.01;
  double k2 = 0.03;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }

  /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
  std::vector<double> taps() const {
    std::vector<double> g(window);
    const double mid = 0.5 * static_cast<double>(window - 1);
    double total = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
      const double d = static_cast<double>(i) - mid;
      g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
      total += g[i];
    }
    for (auto& v : g) v /= total;
    return g;
  }
};

namespace detail {

// Separable Gaussian weighting over every fully contained window ("valid").
inline void filter_valid(const double* in, std::size_t h, std::size_t w,
                         const std::vector<double>& g, double* out) {
  const std::size_t k = g.size(), ho = h - k + 1, wo = w - k + 1;
  std::vector<double> tmp(h * wo, 0.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < wo; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += g[j] * in[r * w + c + j];
      tmp[r * wo + c] = acc;
    }
  for (std::size_t r = 0; r < ho; ++r)
    for (std::size_t c = 0; c < wo; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * tmp[(r + i) * wo + c];
      out[r * wo + c] = acc;
    }
}

// Adjoint of filter_valid: spreads each window value back over its support.
inline void filter_valid_adjoint(const double* in, std::size_t h, std::size_t w,
                                 const std::vector<double>& g, double* out) {
  const std::size_t k = g.size(), ho = h - k + 1, wo = w - k + 1;
  std::vector<double> tmp(h * wo, 0.0);
  for (std::size_t r = 0; r < ho; ++r)
    for (std::size_t c = 0; c < wo; ++c)
      for (std::size_t i = 0; i < k; ++i) tmp[(r + i) * wo + c] += g[i] * in[r * wo + c];
  std::fill(out, out + h * w, 0.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < wo; ++c)
      for (std::size_t j = 0; j < k; ++j) out[r * w + c + j] += g[j] * tmp[r * wo + c];
}

struct SsimTerms {
  double value = 0.0;
  std::vector<double> grad_a;  // d mean-SSIM / d a
  std::vector<double> grad_b;
};

// Mean SSIM over valid windows and, on request, its gradient w.r.t. both images.
inline SsimTerms ssim_terms(const double* a, const double* b, std::size_t h, std::size_t w,
                            const SsimParams& prm, bool with_grad) {
  const std::size_t k = prm.window;
  if (h < k || w < k) throw ShapeError("ssim: image smaller than the window");
  const auto g = prm.taps();
  const std::size_t n = h * w, ho = h - k + 1, wo = w - k + 1, m = ho * wo;
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  std::vector<double> mu_a(m), mu_b(m), s_aa(m), s_bb(m), s_ab(m);
  filter_valid(a, h, w, g, mu_a.data());
  filter_valid(b, h, w, g, mu_b.data());
  filter_valid(aa.data(), h, w, g, s_aa.data());
  filter_valid(bb.data(), h, w, g, s_bb.data());
  filter_valid(ab.data(), h, w, g, s_ab.data());

  const double c1 = prm.c1(), c2 = prm.c2();
  SsimTerms out;
  std::vector<double> d_mu_a, d_mu_b, d_aa, d_bb, d_ab;
  if (with_grad) {
    d_mu_a.resize(m);
    d_mu_b.resize(m);
    d_aa.resize(m);
    d_bb.resize(m);
    d_ab.resize(m);
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  double total = 0.0;
  for (std::size_t p = 0; p < m; ++p) {
    const double ma = mu_a[p], mb = mu_b[p];
    const double va = s_aa[p] - ma * ma, vb = s_bb[p] - mb * mb, cov = s_ab[p] - ma * mb;
    const double a1 = 2.0 * ma * mb + c1, a2 = 2.0 * cov + c2;
    const double b1 = ma * ma + mb * mb + c1, b2 = va + vb + c2;
    const double s = (a1 * a2) / (b1 * b2);
    total += s;
    if (with_grad) {
      const double denom = b1 * b2;
      d_mu_a[p] = inv_m * (2.0 * mb * (a2 - a1) / denom - 2.0 * ma * s * (1.0 / b1 - 1.0 / b2));
      d_mu_b[p] = inv_m * (2.0 * ma * (a2 - a1) / denom - 2.0 * mb * s * (1.0 / b1 - 1.0 / b2));
      d_aa[p] = -inv_m * s / b2;
      d_bb[p] = -inv_m * s / b2;
      d_ab[p] = inv_m * 2.0 * a1 / denom;
    }
  }
  out.value = total * inv_m;
  if (with_grad) {
    std::vector<double> t_mu_a(n), t_mu_b(n), t_aa(n), t_bb(n), t_ab(n);
    filter_valid_adjoint(d_mu_a.data(), h, w, g, t_mu_a.data());
    filter_valid_adjoint(d_mu_b.data(), h, w, g, t_mu_b.data());
    filter_valid_adjoint(d_aa.data(), h, w, g, t_aa.data());
    filter_valid_adjoint(d_bb.data(), h, w, g, t_bb.data());
    filter_valid_adjoint(d_ab.data(), h, w, g, t_ab.data());
    out.grad_a.resize(n);
    out.grad_b.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.grad_a[i] = t_mu_a[i] + 2.0 * a[i] * t_aa[i] + b[i] * t_ab[i];
      out.grad_b[i] = t_mu_b[i] + 2.0 * b[i] * t_bb[i] + a[i] * t_ab[i];
    }
  }
  return out;
}

}  // namespace detail

/// (x - min) / (max - min); a constant image maps to zeros.
inline Image minmax_normalize(const Image& x) {
  Image out(x.shape());
  if (x.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(x.values().begin(), x.values().end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return out;
  const double scale = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - lo) * scale;
  return out;
}

/// Normalized mean of all bins.
inline Image full_spectrum_reference(const SpectralImageStack& stack) {
  if (stack.bins.empty()) throw std::invalid_argument("full_spectrum_reference: empty stack");
  Image mean(stack.bins.front().shape());
  for (const auto& b : stack.bins) {
    require_same_shape(b.shape(), mean.shape(), "full_spectrum_reference");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += b[i];
  }
  for (auto& v : mean.values()) v /= static_cast<double>(stack.bins.size());
  return minmax_normalize(mean);
}

inline double ssim(const Image& a, const Image& b, const SsimParams& params = {}) {
  require_same_shape(a.shape(), b.shape(), "ssim");
  require_rank(a.shape(), 2, "ssim");
  return s2s::detail::ssim_terms(a.data(), b.data(), a.dim(0), a.dim(1), params, false).value;
}

namespace ad {

/// Per-item min-max normalization. The gradient includes the dependence of
/// the minimum and maximum on their (first) arg-extreme pixels.
template <class T>
Var<T> normalize_minmax(Var<T> x) {
  const auto& v = x.value();
  const std::size_t n = v.dim(0), per = v.size() / n;
  std::vector<T> scale(n, T{0});
  std::vector<std::size_t> arg_lo(n, 0), arg_hi(n, 0);
  Tensor<T> y(v.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const auto first = v.values().begin() + static_cast<std::ptrdiff_t>(i * per);
    const auto [lo, hi] = std::minmax_element(first, first + static_cast<std::ptrdiff_t>(per));
    arg_lo[i] = i * per + static_cast<std::size_t>(lo - first);
    // minmax_element reports the last maximum; route to the first instead.
    arg_hi[i] = i * per + static_cast<std::size_t>(
                             std::find(first, first + static_cast<std::ptrdiff_t>(per), *hi) - first);
    if (!(*hi > *lo)) continue;
    scale[i] = T{1} / (*hi - *lo);
    for (std::size_t k = 0; k < per; ++k) y[i * per + k] = (v[i * per + k] - *lo) * scale[i];
  }
  return x.tape->record(std::move(y), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    auto& dx = t.grad_buffer(x);
    const auto& xv = t.value(x);
    for (std::size_t i = 0; i < n; ++i) {
      if (scale[i] == T{0}) continue;
      const T lo = xv[arg_lo[i]];
      double d_lo = 0.0, d_hi = 0.0;
      for (std::size_t k = 0; k < per; ++k) {
        const double gi = g[i * per + k];
        const double yi = (xv[i * per + k] - lo) * scale[i];
        dx[i * per + k] += static_cast<T>(gi * scale[i]);
        d_lo += gi * (yi - 1.0);
        d_hi -= gi * yi;
      }
      dx[arg_lo[i]] += static_cast<T>(d_lo * scale[i]);
      dx[arg_hi[i]] += static_cast<T>(d_hi * scale[i]);
    }
  });
}

/// Mean over items (batch axis) of the windowed SSIM between a[i] and b[i];
/// b may hold a single item that is compared against every a[i].
template <class T>
Var<T> ssim_mean(Var<T> a, Var<T> b, const SsimParams& params = {}) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank(av.shape(), 4, "ssim_mean");
  require_rank(bv.shape(), 4, "ssim_mean");
  if (av.dim(1) != 1 || bv.dim(1) != 1) throw ShapeError("ssim_mean: single-channel images only");
  if (av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3) ||
      (bv.dim(0) != 1 && bv.dim(0) != av.dim(0)))
    throw ShapeError("ssim_mean: shape mismatch " + shape_string(av.shape()) + " vs " +
                     shape_string(bv.shape()));
  const std::size_t items = av.dim(0), h = av.dim(2), w = av.dim(3), per = h * w;
  const bool shared = bv.dim(0) == 1;
  auto item = [per](const Tensor<T>& t, std::size_t i) {
    std::vector<double> out(per);
    for (std::size_t k = 0; k < per; ++k) out[k] = static_cast<double>(t[i * per + k]);
    return out;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < items; ++i) {
    const auto ai = item(av, i), bi = item(bv, shared ? 0 : i);
    total += s2s::detail::ssim_terms(ai.data(), bi.data(), h, w, params, false).value;
  }
  const double inv = 1.0 / static_cast<double>(items);
  return a.tape->record(
      Tensor<T>({1}, static_cast<T>(total * inv)), {a, b},
      [=](Tape<T>& t, const Tensor<T>& g) {
        const auto& at = t.value(a);
        const auto& bt = t.value(b);
        const double scale = static_cast<double>(g[0]) * inv;
        for (std::size_t i = 0; i < items; ++i) {
          const std::size_t bi_idx = shared ? 0 : i;
          const auto ai = item(at, i), bi = item(bt, bi_idx);
          const auto terms = s2s::detail::ssim_terms(ai.data(), bi.data(), h, w, params, true);
          if (t.requires_grad(a)) {
            auto& da = t.grad_buffer(a);
            for (std::size_t k = 0; k < per; ++k)
              da[i * per + k] += static_cast<T>(scale * terms.grad_a[k]);
          }
          if (t.requires_grad(b)) {
            auto& db = t.grad_buffer(b);
            for (std::size_t k = 0; k < per; ++k)
              db[bi_idx * per + k] += static_cast<T>(scale * terms.grad_b[k]);
          }
        }
      });
}

/// Normalized bin average of a (bins, 1, h, w) stack, as a (1, 1, h, w) node.
template <class T>
Var<T> full_spectrum_reference(Var<T> stack) {
  return normalize_minmax(batch_mean(stack));
}

/// 1 - mean_i SSIM(normalize(stack_i), reference).
template <class T>
Var<T> l_ss_against(Var<T> stack, Var<T> reference, const SsimParams& params = {}) {
  return affine(ssim_mean(normalize_minmax(stack), reference, params), T{-1}, T{1});
}

/// L_SS with the reference derived from the same stack (gradient flows
/// through both the per-bin images and the reference).
template <class T>
Var<T> l_ss(Var<T> stack, const SsimParams& params = {}) {
  return l_ss_against(stack, full_spectrum_reference(stack), params);
}

}  // namespace ad

inline double l_ss(const SpectralImageStack& stack, const SsimParams& params = {}) {
  ad::Tape<double> tape;
  auto x = tape.constant(stack.to_batch<double>());
  return ad::l_ss(x, params).scalar();
}

}  // namespace s2s
