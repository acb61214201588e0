#pragma once

// Equidistant fan-beam geometry and a ray-driven projector with exact
// per-pixel intersection lengths. The system matrix is traced once per
// geometry and stored sparse, so forward and back projection share the same
// weights and are exact adjoints of each other.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "s2s/errors.hpp"
#include "s2s/tensor.hpp"

namespace s2s {

/// Square attenuation image (mm^-1), row-major, row 0 at the top (+y).
using Image = Tensor<double>;
/// (view, detector) line integrals.
using Sinogram = Tensor<double>;

inline Image make_image(std::size_t n, double fill = 0.0) { return Image({n, n}, fill); }

struct FanBeamGeometry {
  double source_to_detector = 350.0;  // mm
  double source_to_isocenter = 210.0;  // mm
  std::size_t detector_count = 128;
  double detector_pitch = 0.6;  // mm, at the detector
  std::vector<double> view_angles;  // radians
  std::size_t image_size = 128;  // pixels per side
  double pixel_size = 0.35;  // mm

  /// `views` angles spread uniformly over [0, 2*pi).
  static FanBeamGeometry uniform(std::size_t views, std::size_t detectors, double pitch,
                                 std::size_t image_size, double pixel_size,
                                 double sod = 210.0, double sdd = 350.0) {
    FanBeamGeometry g;
    g.source_to_isocenter = sod;
    g.source_to_detector = sdd;
    g.detector_count = detectors;
    g.detector_pitch = pitch;
    g.image_size = image_size;
    g.pixel_size = pixel_size;
    for (std::size_t v = 0; v < views; ++v)
      g.view_angles.push_back(2.0 * std::numbers::pi * static_cast<double>(v) /
                              static_cast<double>(views));
    return g;
  }

  /// Desk-scale default: 128x128 grid, 128 detectors, 180 views over 360 degrees.
  static FanBeamGeometry desk_scale() { return uniform(180, 128, 0.6, 128, 0.35); }

  std::size_t view_count() const { return view_angles.size(); }
  std::size_t ray_count() const { return view_count() * detector_count; }
  std::size_t pixel_count() const { return image_size * image_size; }
  Shape sinogram_shape() const { return {view_count(), detector_count}; }
  Shape image_shape() const { return {image_size, image_size}; }

  void validate() const {
    if (!(source_to_isocenter > 0.0))
      throw ConfigError("geometry.source_to_isocenter must be > 0");
    if (!(source_to_detector > source_to_isocenter))
      throw ConfigError("geometry.source_to_detector must exceed source_to_isocenter");
    if (detector_count == 0) throw ConfigError("geometry.detector_count must be > 0");
    if (image_size == 0) throw ConfigError("geometry.image_size must be > 0");
    if (!(detector_pitch > 0.0)) throw ConfigError("geometry.detector_pitch must be > 0");
    if (!(pixel_size > 0.0)) throw ConfigError("geometry.pixel_size must be > 0");
    if (view_angles.empty()) throw ConfigError("geometry.view_angles must not be empty");
    for (std::size_t v = 0; v < view_angles.size(); ++v) {
      const double a = view_angles[v];
      if (!(a >= 0.0 && a < 2.0 * std::numbers::pi))
        throw ConfigError("geometry.view_angles must lie in [0, 2*pi)");
      if (v > 0 && !(a > view_angles[v - 1]))
        throw ConfigError("geometry.view_angles must be strictly increasing");
    }
  }

  friend bool operator==(const FanBeamGeometry&, const FanBeamGeometry&) = default;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct Ray {
  Point2 source;
  Point2 detector;
};

/// Source and detector-cell center for (view, detector). The source sits at
/// angle `beta` on the SOD circle, the flat detector faces it through the
/// isocenter.
inline Ray fan_ray(const FanBeamGeometry& g, std::size_t view, std::size_t det) {
  const double beta = g.view_angles[view];
  const double c = std::cos(beta), s = std::sin(beta);
  const double iso_to_det = g.source_to_detector - g.source_to_isocenter;
  const double u =
      (static_cast<double>(det) - 0.5 * static_cast<double>(g.detector_count - 1)) *
      g.detector_pitch;
  Ray r;
  r.source = {g.source_to_isocenter * c, g.source_to_isocenter * s};
  r.detector = {-iso_to_det * c - u * s, -iso_to_det * s + u * c};
  return r;
}

/// Compressed sparse row storage of A (rays x pixels).
class SystemMatrix {
 public:
  explicit SystemMatrix(const FanBeamGeometry& geom) : geom_(geom) {
    geom_.validate();
    row_ptr_.reserve(geom_.ray_count() + 1);
    row_ptr_.push_back(0);
    std::vector<double> alphas;
    for (std::size_t v = 0; v < geom_.view_count(); ++v)
      for (std::size_t d = 0; d < geom_.detector_count; ++d) {
        trace(fan_ray(geom_, v, d), alphas);
        row_ptr_.push_back(cols_.size());
      }
  }

  const FanBeamGeometry& geometry() const { return geom_; }
  std::size_t rows() const { return row_ptr_.size() - 1; }
  std::size_t cols() const { return geom_.pixel_count(); }
  std::size_t nonzeros() const { return cols_.size(); }

  /// Visits (pixel, weight) pairs of one ray.
  template <class F>
  void for_each_in_row(std::size_t ray, F&& f) const {
    for (std::size_t k = row_ptr_[ray]; k < row_ptr_[ray + 1]; ++k) f(cols_[k], weights_[k]);
  }

  Sinogram forward(const Image& image) const {
    require_same_shape(image.shape(), geom_.image_shape(), "forward_project");
    Sinogram out(geom_.sinogram_shape());
    const double* x = image.data();
    for (std::size_t r = 0; r < rows(); ++r) {
      double acc = 0.0;
      for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) acc += weights_[k] * x[cols_[k]];
      out[r] = acc;
    }
    return out;
  }

  Image back(const Sinogram& sino) const {
    if (sino.shape() != geom_.sinogram_shape())
      throw ShapeError("back_project: sinogram " + shape_string(sino.shape()) +
                       " does not match geometry " + shape_string(geom_.sinogram_shape()));
    Image out(geom_.image_shape());
    double* x = out.data();
    for (std::size_t r = 0; r < rows(); ++r) {
      const double y = sino[r];
      if (y == 0.0) continue;
      for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) x[cols_[k]] += weights_[k] * y;
    }
    return out;
  }

  Sinogram row_sums() const {
    Sinogram out(geom_.sinogram_shape());
    for (std::size_t r = 0; r < rows(); ++r)
      for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) out[r] += weights_[k];
    return out;
  }

  Image col_sums() const { return back(Sinogram(geom_.sinogram_shape(), 1.0)); }

 private:
  // Siddon-style traversal: merge the parametric crossings with the vertical
  // and horizontal grid lines, then assign each segment to the pixel holding
  // its midpoint.
  void trace(const Ray& ray, std::vector<double>& alphas) {
    const std::size_t n = geom_.image_size;
    const double half = 0.5 * static_cast<double>(n) * geom_.pixel_size;
    const double dx = ray.detector.x - ray.source.x;
    const double dy = ray.detector.y - ray.source.y;
    const double length = std::hypot(dx, dy);

    double amin = 0.0, amax = 1.0;
    auto clip = [&](double p0, double d) {
      if (d == 0.0) {
        if (p0 <= -half || p0 >= half) amax = -1.0;
        return;
      }
      double a0 = (-half - p0) / d, a1 = (half - p0) / d;
      if (a0 > a1) std::swap(a0, a1);
      amin = std::max(amin, a0);
      amax = std::min(amax, a1);
    };
    clip(ray.source.x, dx);
    clip(ray.source.y, dy);
    if (!(amax > amin)) return;

    alphas.clear();
    alphas.push_back(amin);
    alphas.push_back(amax);
    auto planes = [&](double p0, double d) {
      if (d == 0.0) return;
      for (std::size_t i = 0; i <= n; ++i) {
        const double a = (-half + static_cast<double>(i) * geom_.pixel_size - p0) / d;
        if (a > amin && a < amax) alphas.push_back(a);
      }
    };
    planes(ray.source.x, dx);
    planes(ray.source.y, dy);
    std::sort(alphas.begin(), alphas.end());

    for (std::size_t k = 0; k + 1 < alphas.size(); ++k) {
      const double seg = (alphas[k + 1] - alphas[k]) * length;
      if (!(seg > 0.0)) continue;
      const double am = 0.5 * (alphas[k] + alphas[k + 1]);
      const double xm = ray.source.x + am * dx;
      const double ym = ray.source.y + am * dy;
      const auto col = clamp_index(std::floor((xm + half) / geom_.pixel_size), n);
      const auto row = n - 1 - clamp_index(std::floor((ym + half) / geom_.pixel_size), n);
      cols_.push_back(static_cast<std::uint32_t>(row * n + col));
      weights_.push_back(seg);
    }
  }

  static std::size_t clamp_index(double v, std::size_t n) {
    if (v < 0.0) return 0;
    const auto i = static_cast<std::size_t>(v);
    return i >= n ? n - 1 : i;
  }

  FanBeamGeometry geom_;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> cols_;
  std::vector<double> weights_;
};

/// Row sums R and column sums C of the system matrix (raw, zeros kept).
struct SirtWeights {
  Sinogram row_sums;
  Image col_sums;
};

inline SirtWeights sirt_row_col_sums(const SystemMatrix& a) { return {a.row_sums(), a.col_sums()}; }
inline SirtWeights sirt_row_col_sums(const FanBeamGeometry& g) {
  return sirt_row_col_sums(SystemMatrix(g));
}

inline Sinogram forward_project(const Image& image, const FanBeamGeometry& g) {
  return SystemMatrix(g).forward(image);
}

inline Image back_project(const Sinogram& sino, const FanBeamGeometry& g) {
  return SystemMatrix(g).back(sino);
}

/// 1/v elementwise, with zero entries treated as 1.
template <class T>
Tensor<T> inverse_or_one(const Tensor<T>& v) {
  Tensor<T> out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] == T{0} ? T{1} : T{1} / v[i];
  return out;
}

}  // namespace s2s
