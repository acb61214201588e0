#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "s2s/geometry.hpp"

namespace s2s {

inline double mean_squared_error(const Image& a, const Image& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

inline double rmse(const Image& a, const Image& b) { return std::sqrt(mean_squared_error(a, b)); }

/// 10 log10(range^2 / mse); +infinity for identical images.
inline double psnr(const Image& a, const Image& b, double data_range) {
  if (!(data_range > 0.0)) throw std::invalid_argument("psnr: data_range must be > 0");
  const double mse = mean_squared_error(a, b);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

/// Peak-to-peak range of a ground-truth image, the PSNR data range.
inline double data_range(const Image& truth) {
  const auto [lo, hi] = std::minmax_element(truth.values().begin(), truth.values().end());
  return *hi - *lo;
}

struct Roi {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  static Roi whole(const Image& img) { return {0, 0, img.dim(0), img.dim(1)}; }
  friend bool operator==(const Roi&, const Roi&) = default;
};

/// Blur-detection settings. Widths are in pixels.
struct BlurParams {
  double edge_threshold = 0.1;  // fraction of the strongest Sobel response
  double jnb_width = 3.0;  // just-noticeable blur width
  double beta = 3.6;  // slope of the blur-detection probability
  double probability_cutoff = 0.63;
};

/// Fraction of detected edge pixels whose local edge width makes blur
/// detectable: P = 1 - exp(-(w / w_jnb)^beta) above the cutoff. Smaller is
/// sharper. Returns nullopt when the ROI holds no edges.
inline std::optional<double> blur_fraction(const Image& image, const Roi& roi,
                                           const BlurParams& prm = {}) {
  require_rank(image.shape(), 2, "blur_fraction");
  if (roi.rows < 3 || roi.cols < 3 || roi.row + roi.rows > image.dim(0) ||
      roi.col + roi.cols > image.dim(1))
    throw std::invalid_argument("blur_fraction: ROI must be at least 3x3 and inside the image");
  const std::size_t h = roi.rows, w = roi.cols;
  std::vector<double> v(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) v[r * w + c] = image.at(roi.row + r, roi.col + c);
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  if (!(span > 0.0)) return std::nullopt;
  for (auto& x : v) x = (x - lo) / span;
  auto px = [&](std::size_t r, std::size_t c) { return v[r * w + c]; };

  std::vector<double> gx(h * w, 0.0), gy(h * w, 0.0), mag(h * w, 0.0);
  double peak = 0.0;
  for (std::size_t r = 1; r + 1 < h; ++r)
    for (std::size_t c = 1; c + 1 < w; ++c) {
      const double sx = (px(r - 1, c + 1) + 2 * px(r, c + 1) + px(r + 1, c + 1)) -
                        (px(r - 1, c - 1) + 2 * px(r, c - 1) + px(r + 1, c - 1));
      const double sy = (px(r + 1, c - 1) + 2 * px(r + 1, c) + px(r + 1, c + 1)) -
                        (px(r - 1, c - 1) + 2 * px(r - 1, c) + px(r - 1, c + 1));
      const std::size_t i = r * w + c;
      gx[i] = sx;
      gy[i] = sy;
      mag[i] = std::hypot(sx, sy);
      peak = std::max(peak, mag[i]);
    }
  if (!(peak > 0.0)) return std::nullopt;

  // Width between the local extrema bracketing the edge, walking along the
  // dominant gradient axis.
  auto edge_width = [&](std::size_t r, std::size_t c) {
    const std::size_t i = r * w + c;
    const bool horizontal = std::abs(gx[i]) >= std::abs(gy[i]);
    const double g = horizontal ? gx[i] : gy[i];
    const std::ptrdiff_t dir = g >= 0.0 ? 1 : -1;
    const auto len = static_cast<std::ptrdiff_t>(horizontal ? w : h);
    const auto at = [&](std::ptrdiff_t k) {
      return horizontal ? px(r, static_cast<std::size_t>(k)) : px(static_cast<std::size_t>(k), c);
    };
    const auto start = static_cast<std::ptrdiff_t>(horizontal ? c : r);
    std::ptrdiff_t up = start;
    while (up + dir >= 0 && up + dir < len && at(up + dir) > at(up)) up += dir;
    std::ptrdiff_t down = start;
    while (down - dir >= 0 && down - dir < len && at(down - dir) < at(down)) down -= dir;
    return static_cast<double>(std::abs(up - down));
  };

  std::size_t edges = 0, blurred = 0;
  for (std::size_t r = 1; r + 1 < h; ++r)
    for (std::size_t c = 1; c + 1 < w; ++c) {
      const std::size_t i = r * w + c;
      if (!(mag[i] > prm.edge_threshold * peak)) continue;
      ++edges;
      const double width = edge_width(r, c);
      const double p = 1.0 - std::exp(-std::pow(width / prm.jnb_width, prm.beta));
      if (p > prm.probability_cutoff) ++blurred;
    }
  if (edges == 0) return std::nullopt;
  return static_cast<double>(blurred) / static_cast<double>(edges);
}

struct MetricRow {
  std::string method;
  std::size_t bin = 0;
  std::optional<double> blur_fraction;
  double psnr = 0.0;
  double rmse = 0.0;
};

/// One row per bin: blur fraction over `roi` and full-image PSNR/RMSE against
/// the ground truth, with each truth bin's peak-to-peak range as data range.
inline std::vector<MetricRow> evaluate(const std::string& method, const std::vector<Image>& recon,
                                       const std::vector<Image>& truth, const Roi& roi,
                                       const BlurParams& prm = {}) {
  if (recon.size() != truth.size())
    throw ShapeError("evaluate: reconstruction and ground truth bin counts differ");
  std::vector<MetricRow> rows;
  for (std::size_t b = 0; b < recon.size(); ++b) {
    MetricRow row;
    row.method = method;
    row.bin = b;
    row.blur_fraction = blur_fraction(recon[b], roi, prm);
    const double range = data_range(truth[b]);
    row.psnr = psnr(recon[b], truth[b], range > 0.0 ? range : 1.0);
    row.rmse = rmse(recon[b], truth[b]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace s2s
