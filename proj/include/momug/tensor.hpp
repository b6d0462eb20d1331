#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include <Eigen/Dense>

namespace momug {

// Row-major so that one sequence element (or one motion frame) is one row.
template <typename Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

inline constexpr double kPi = 3.14159265358979323846;

template <typename Real>
inline Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
}

template <typename Real>
inline Real gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
  const Real pdf = Real(0.39894228040143267794) * std::exp(Real(-0.5) * x * x);
  return cdf + x * pdf;
}

std::uint64_t splitmix64(std::uint64_t x);

// Counter-based seed derivation: every subsystem (corpus, init, train, sample...)
// gets an independent stream keyed by (root, label, counter).
std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t counter = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, std::string_view label, std::uint64_t counter = 0)
      : engine_(derive_seed(root, label, counter)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  // Inclusive on both ends.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  bool bernoulli(double p) { return uniform_(engine_) < p; }
  std::uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  template <typename Real>
  Mat<Real> normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Mat<Real> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(normal());
    return m;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// FNV-1a over raw bytes; used to fingerprint frozen weights.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes) {
    for (std::byte b : bytes) {
      hash_ ^= static_cast<std::uint64_t>(b);
      hash_ *= 1099511628211ULL;
    }
  }
  template <typename Real>
  void update(const Mat<Real>& m) {
    update(std::as_bytes(std::span<const Real>(m.data(), static_cast<std::size_t>(m.size()))));
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 1469598103934665603ULL;
};

// Sinusoidal features of a scalar position/timestep, width `dim` (even).
template <typename Real>
RowVec<Real> sinusoidal_encoding(double value, int dim, double max_period = 10000.0) {
  RowVec<Real> out(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / half);
    out(i) = static_cast<Real>(std::sin(value * freq));
    out(half + i) = static_cast<Real>(std::cos(value * freq));
  }
  if (dim % 2 == 1) out(dim - 1) = Real(0);
  return out;
}

}  // namespace momug
