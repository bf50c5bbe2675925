#pragma once

// Clip selection over a length-T sequence: fixed-frame (uniform or random)
// and anomaly-led roulette-wheel sampling driven by detector confidences.
// Clip indices are 1-based throughout; position 0 is reserved for CLS tokens.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "alan/core.hpp"

namespace alan {

/// p_i = exp(l_i / tau) / sum_k exp(l_k / tau), with cumulative q_i = p_1 + ... + p_i.
/// q_0 = 0 is implicit and q_T is pinned to exactly 1.
struct SelectionDistribution {
  std::vector<double> p;
  std::vector<double> q;

  [[nodiscard]] std::size_t size() const { return p.size(); }
};

enum class SampleMethod { uniform_fixed, random_fixed, anomaly_led };

inline const char* to_string(SampleMethod m) {
  switch (m) {
    case SampleMethod::uniform_fixed: return "uniform_fixed";
    case SampleMethod::random_fixed: return "random_fixed";
    case SampleMethod::anomaly_led: return "anomaly_led";
  }
  return "?";
}

struct SampledClipSet {
  std::vector<std::size_t> indices;  // each in [1, T]
  SampleMethod method = SampleMethod::uniform_fixed;

  [[nodiscard]] std::size_t size() const { return indices.size(); }
  bool operator==(const SampledClipSet&) const = default;
};

inline constexpr double kDefaultTemperature = 0.7;
inline constexpr std::size_t kDefaultSampleLength = 50;

inline SelectionDistribution selection_probabilities(std::span<const double> scores, double tau) {
  if (!(tau > 0.0)) throw ValidationError("selection_probabilities: temperature must be > 0");
  if (scores.empty()) throw ShapeError("selection_probabilities: empty score vector");
  SelectionDistribution d;
  const double mx = *std::max_element(scores.begin(), scores.end());
  d.p.resize(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    d.p[i] = std::exp((scores[i] - mx) / tau);
    sum += d.p[i];
  }
  for (auto& v : d.p) v /= sum;
  d.q.resize(scores.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < d.p.size(); ++i) {
    acc += d.p[i];
    d.q[i] = std::min(acc, 1.0);  // rounding can overshoot before the last bin
  }
  d.q.back() = 1.0;
  return d;
}

/// The index i (1-based) with q_{i-1} < r <= q_i, for r in (0, 1].
inline std::size_t roulette_pick(const SelectionDistribution& dist, double r) {
  const auto it = std::lower_bound(dist.q.begin(), dist.q.end(), r);
  const auto pos = static_cast<std::size_t>(it - dist.q.begin());
  return std::min(pos, dist.q.size() - 1) + 1;
}

/// Roulette wheel over caller-supplied draws; the draw order is preserved.
inline SampledClipSet roulette_select_draws(const SelectionDistribution& dist, std::span<const double> draws) {
  SampledClipSet out{{}, SampleMethod::anomaly_led};
  out.indices.reserve(draws.size());
  for (double r : draws) out.indices.push_back(roulette_pick(dist, r));
  return out;
}

/// N independent draws r ~ U(0,1], with replacement, in draw order.
inline SampledClipSet roulette_select(const SelectionDistribution& dist, std::size_t n, Rng& rng) {
  if (n < 1) throw ValidationError("roulette_select: N must be >= 1");
  SampledClipSet out{{}, SampleMethod::anomaly_led};
  out.indices.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.indices.push_back(roulette_pick(dist, rng.uniform_open_closed()));
  return out;
}

enum class FixedMode { uniform, random };

/// Uniform: round(1 + (j-1)(T-1)/(N-1)) for j = 1..N. Random: N sorted draws,
/// without replacement when N <= T.
inline SampledClipSet fixed_sample(std::size_t T, std::size_t n, FixedMode mode, Rng& rng) {
  if (n < 1) throw ValidationError("fixed_sample: N must be >= 1");
  if (T < 1) throw ValidationError("fixed_sample: T must be >= 1");
  SampledClipSet out;
  out.indices.reserve(n);
  if (mode == FixedMode::uniform) {
    out.method = SampleMethod::uniform_fixed;
    for (std::size_t j = 1; j <= n; ++j) {
      if (n == 1 || T == 1) {
        out.indices.push_back(1);
        continue;
      }
      const double pos = 1.0 + static_cast<double>(j - 1) * static_cast<double>(T - 1) / static_cast<double>(n - 1);
      out.indices.push_back(static_cast<std::size_t>(std::lround(pos)));
    }
    return out;
  }
  out.method = SampleMethod::random_fixed;
  if (n <= T) {
    std::vector<std::size_t> all(T);
    for (std::size_t i = 0; i < T; ++i) all[i] = i + 1;
    for (std::size_t i = 0; i < n; ++i) std::swap(all[i], all[i + rng.index(T - i)]);
    out.indices.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    for (std::size_t k = 0; k < n; ++k) out.indices.push_back(1 + rng.index(T));
  }
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

/// Selection counts per clip (index 0 = clip 1).
inline std::vector<std::size_t> selection_counts(const SampledClipSet& s, std::size_t T) {
  std::vector<std::size_t> counts(T, 0);
  for (auto i : s.indices) {
    if (i < 1 || i > T) throw ValidationError("clip index " + std::to_string(i) + " out of range");
    ++counts[i - 1];
  }
  return counts;
}

}  // namespace alan
