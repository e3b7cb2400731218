#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace lta {

using Index = Eigen::Index;

// Dense row-major matrices; double in test mode, float in run mode.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Error taxonomy; the CLI maps these onto exit codes.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A weight (or bias) matrix with its gradient accumulator. Frozen params
// never receive gradient, so their grad buffer stays identically zero.
template <typename Scalar>
struct Param {
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;
  bool trainable = true;

  Param() = default;
  Param(Index rows, Index cols, bool trainable_ = true)
      : value(MatrixX<Scalar>::Zero(rows, cols)),
        grad(MatrixX<Scalar>::Zero(rows, cols)),
        trainable(trainable_) {}

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }
  Index size() const { return value.size(); }

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (trainable) grad += g;
  }
  void zero_grad() { grad.setZero(); }

  static Param constant(Index rows, Index cols, Scalar c, bool trainable_ = true) {
    Param p(rows, cols, trainable_);
    p.value.setConstant(c);
    return p;
  }
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

// FNV-1a, used for the tokenizer buckets and config hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}
inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Splitmix step; keeps per-purpose RNG streams decoupled from one seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

// One run of identical frame labels; durations in frames.
struct Segment {
  int class_id = 0;
  Index length = 0;
};

template <typename Scalar>
MatrixX<Scalar> random_normal(Index rows, Index cols, Scalar stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  MatrixX<Scalar> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<Scalar>(dist(rng) * double(stddev));
  return m;
}

template <typename Scalar>
MatrixX<Scalar> random_uniform(Index rows, Index cols, Scalar lo, Scalar hi, Rng& rng) {
  std::uniform_real_distribution<double> dist{double(lo), double(hi)};
  MatrixX<Scalar> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<Scalar>(dist(rng));
  return m;
}

}  // namespace lta
