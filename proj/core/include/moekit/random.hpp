#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "moekit/tensor.hpp"

namespace moekit {

/// Seeded generator with explicit value mappings so fixed seeds reproduce the
/// same streams on any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Box-Muller; consumes exactly two draws per value.
  double gaussian() {
    double u1 = uniform01();
    const double u2 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.141592653589793 * u2);
  }

  /// Uniform in [0, n).
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }

 private:
  std::mt19937_64 engine_;
};

inline Matrix2D random_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                              double scale = 1.0) {
  Matrix2D m(rows, cols);
  for (double& v : m.data()) v = scale * rng.gaussian();
  return m;
}

inline Tensor3D random_tensor(std::size_t d0, std::size_t d1, std::size_t d2,
                              Rng& rng, double scale = 1.0) {
  Tensor3D t(d0, d1, d2);
  for (double& v : t.data()) v = scale * rng.gaussian();
  return t;
}

}  // namespace moekit
