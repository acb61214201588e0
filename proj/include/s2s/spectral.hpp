#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "s2s/geometry.hpp"

namespace s2s {

/// One attenuation image per energy bin, all on the same grid.
struct SpectralImageStack {
  std::vector<Image> bins;

  std::size_t bin_count() const { return bins.size(); }
  std::size_t size() const { return bins.empty() ? 0 : bins.front().dim(0); }

  /// (bins, 1, n, n) tensor in the requested precision.
  template <class T>
  Tensor<T> to_batch() const {
    const std::size_t n = size();
    Tensor<T> out({bins.size(), 1, n, n});
    for (std::size_t b = 0; b < bins.size(); ++b)
      for (std::size_t i = 0; i < n * n; ++i) out[b * n * n + i] = static_cast<T>(bins[b][i]);
    return out;
  }

  template <class T>
  static SpectralImageStack from_batch(const Tensor<T>& batch) {
    require_rank(batch.shape(), 4, "SpectralImageStack::from_batch");
    const std::size_t n = batch.dim(2);
    SpectralImageStack s;
    for (std::size_t b = 0; b < batch.dim(0); ++b) {
      Image img({n, batch.dim(3)});
      for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(batch[b * img.size() + i]);
      s.bins.push_back(std::move(img));
    }
    return s;
  }

  friend bool operator==(const SpectralImageStack&, const SpectralImageStack&) = default;
};

/// Per-bin log-transformed projections plus how they were produced.
struct SpectralSinogram {
  std::vector<Sinogram> bins;
  FanBeamGeometry geometry;
  std::vector<double> photons_per_bin;  // N0; infinite means noise off
  std::uint64_t seed = 0;
  std::vector<std::size_t> clamped_counts;  // zero-count events per bin

  std::size_t bin_count() const { return bins.size(); }
  bool noiseless() const {
    for (double n : photons_per_bin)
      if (std::isfinite(n)) return false;
    return true;
  }
};

/// splitmix64 finalizer, used to derive independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace s2s
