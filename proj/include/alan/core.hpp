#pragma once

// Shared vocabulary for the whole library: dense matrix aliases, the error
// hierarchy and the seeded random streams every stochastic step draws from.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace alan {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Width/length disagreement between two operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Loaded or supplied data violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A loss or activation became NaN/inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

enum class Mode { train, eval };

// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seeded pseudo-random stream. Uniform and normal draws are implemented
/// here rather than through <random> distributions so that sequences are
/// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent child stream keyed by a label (e.g. an item id).
  [[nodiscard]] Rng derive(std::string_view label) const {
    return Rng(mix_seed(seed_of_state(), stable_hash(label)));
  }
  [[nodiscard]] Rng derive(std::uint64_t key) const { return Rng(mix_seed(seed_of_state(), key)); }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1].
  double uniform_open_closed() { return 1.0 - uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    // rejection sampling: unbiased for any n
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_of_state() const {
    std::mt19937_64 copy = engine_;
    return copy();
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// The four named randomness sources of a training run.
struct RngStreams {
  Rng data_order;
  Rng dropout;
  Rng sampling;
  Rng masking;

  explicit RngStreams(std::uint64_t seed)
      : data_order(mix_seed(seed, 1)),
        dropout(mix_seed(seed, 2)),
        sampling(mix_seed(seed, 3)),
        masking(mix_seed(seed, 4)) {}
};

template <typename T>
bool all_finite(const Mat<T>& m) {
  return m.allFinite();
}

template <typename T>
void require_shape(const Mat<T>& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                     std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()));
  }
}

template <typename T>
void require_cols(const Mat<T>& m, Eigen::Index cols, const char* what) {
  if (m.cols() != cols) {
    throw ShapeError(std::string(what) + ": expected width " + std::to_string(cols) + ", got " +
                     std::to_string(m.cols()));
  }
}

}  // namespace alan
