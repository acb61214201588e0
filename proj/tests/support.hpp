#pragma once

// Shared test helpers: random tensors, a central-difference gradient checker,
// a dense system-matrix builder and a direct-summation SSIM.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "s2s/autodiff.hpp"
#include "s2s/geometry.hpp"

namespace s2s::testing {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

using ScalarGraph = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

/// Largest gradient error of `f` with respect to each input, relative to the
/// larger of the two gradient magnitudes, floored at 1e-3 of the largest
/// finite-difference component so entries that are zero up to rounding do not
/// dominate.
inline double gradient_error(const ScalarGraph& f, std::vector<Tensor<double>> inputs, double h = 1e-5) {
  std::vector<Tensor<double>> analytic;
  {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    tape.backward(f(tape, leaves));
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto eval = [&](const std::vector<Tensor<double>>& in) {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> leaves;
    for (const auto& t : in) leaves.push_back(tape.constant(t));
    return f(tape, leaves).scalar();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double> numeric(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + h;
      const double up = eval(inputs);
      inputs[k][i] = saved - h;
      const double down = eval(inputs);
      inputs[k][i] = saved;
      numeric[i] = (up - down) / (2.0 * h);
    }
    double scale = 0.0;
    for (double v : numeric.values()) scale = std::max(scale, std::abs(v));
    const double floor = std::max(1e-3 * scale, 1e-12);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = analytic[k][i], n = numeric[i];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
    }
  }
  return worst;
}

/// Dense system matrix built pixel by pixel: each ray segment from source to
/// detector cell centre is clipped against every pixel square (Liang-Barsky)
/// and the clipped length is the entry.
inline Eigen::MatrixXd dense_system_matrix(const FanBeamGeometry& g) {
  const std::size_t n = g.image_size;
  const double p = g.pixel_size, half = 0.5 * static_cast<double>(n) * p;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.ray_count()),
                                            static_cast<Eigen::Index>(n * n));
  for (std::size_t v = 0; v < g.view_count(); ++v) {
    const double beta = g.view_angles[v];
    const double cb = std::cos(beta), sb = std::sin(beta);
    const double sx = g.source_to_isocenter * cb, sy = g.source_to_isocenter * sb;
    for (std::size_t d = 0; d < g.detector_count; ++d) {
      const double u = (static_cast<double>(d) - 0.5 * static_cast<double>(g.detector_count - 1)) *
                       g.detector_pitch;
      const double back = g.source_to_detector - g.source_to_isocenter;
      const double dx = -back * cb - u * sb - sx, dy = -back * sb + u * cb - sy;
      const double len = std::hypot(dx, dy);
      const auto row = static_cast<Eigen::Index>(v * g.detector_count + d);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          const double x0 = -half + static_cast<double>(c) * p, x1 = x0 + p;
          const double y1 = half - static_cast<double>(r) * p, y0 = y1 - p;
          double t0 = 0.0, t1 = 1.0;
          bool hit = true;
          auto clip = [&](double q, double s) {
            // Keep the part of the segment where q + s * t stays >= 0.
            if (s == 0.0) {
              if (q < 0.0) hit = false;
              return;
            }
            const double t = -q / s;
            if (s > 0.0) t0 = std::max(t0, t);
            else t1 = std::min(t1, t);
          };
          clip(sx - x0, dx);
          clip(x1 - sx, -dx);
          clip(sy - y0, dy);
          clip(y1 - sy, -dy);
          if (hit && t1 > t0) a(row, static_cast<Eigen::Index>(r * n + c)) = (t1 - t0) * len;
        }
    }
  }
  return a;
}

inline Eigen::VectorXd as_vector(const Tensor<double>& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
}

/// Mean SSIM over all fully contained 11x11 windows, written out term by term
/// with the two-pass (centred) variance.
inline double direct_ssim(const Tensor<double>& a, const Tensor<double>& b) {
  constexpr int win = 11;
  constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double g[win], total = 0.0;
  for (int i = 0; i < win; ++i) {
    g[i] = std::exp(-((i - 5) * (i - 5)) / (2.0 * sigma * sigma));
    total += g[i];
  }
  double w[win][win];
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) w[i][j] = g[i] * g[j] / (total * total);
  const int h = static_cast<int>(a.dim(0)), wd = static_cast<int>(a.dim(1));
  double acc = 0.0;
  int count = 0;
  for (int r = 0; r + win <= h; ++r)
    for (int c = 0; c + win <= wd; ++c) {
      double ma = 0.0, mb = 0.0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          ma += w[i][j] * a.at(static_cast<std::size_t>(r + i), static_cast<std::size_t>(c + j));
          mb += w[i][j] * b.at(static_cast<std::size_t>(r + i), static_cast<std::size_t>(c + j));
        }
      double va = 0.0, vb = 0.0, cov = 0.0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double da = a.at(static_cast<std::size_t>(r + i), static_cast<std::size_t>(c + j)) - ma;
          const double db = b.at(static_cast<std::size_t>(r + i), static_cast<std::size_t>(c + j)) - mb;
          va += w[i][j] * da * da;
          vb += w[i][j] * db * db;
          cov += w[i][j] * da * db;
        }
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return acc / count;
}

/// Separable Gaussian blur with edge replication.
inline Tensor<double> gaussian_blur(const Tensor<double>& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int rad = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * rad + 1));
  double tot = 0.0;
  for (int i = -rad; i <= rad; ++i) tot += k[static_cast<std::size_t>(i + rad)] = std::exp(-i * i / (2 * sigma * sigma));
  for (auto& v : k) v /= tot;
  const int h = static_cast<int>(img.dim(0)), w = static_cast<int>(img.dim(1));
  auto pass = [&](const Tensor<double>& in, bool horizontal) {
    Tensor<double> out(in.shape());
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc = 0.0;
        for (int i = -rad; i <= rad; ++i) {
          const int rr = horizontal ? r : std::clamp(r + i, 0, h - 1);
          const int cc = horizontal ? std::clamp(c + i, 0, w - 1) : c;
          acc += k[static_cast<std::size_t>(i + rad)] * in.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
        }
        out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
      }
    return out;
  };
  return pass(pass(img, true), false);
}

}  // namespace s2s::testing
