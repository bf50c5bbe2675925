#pragma once

// Central finite-difference verification of analytic gradients.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "alan/core.hpp"
#include "alan/nn/param.hpp"

namespace alan::nn {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // Denominator floor: |a - n| / max(|a|, |n|, abs_floor). Keeps entries whose
  // true gradient is ~0 (e.g. attention key biases) from being judged on
  // round-off alone; with step 1e-5 that noise is ~1e-10 absolute.
  double abs_floor = 1e-5;
  // 0 = every entry; otherwise a seeded random subset per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tolerance = 0.0;

  [[nodiscard]] double worst() const {
    double w = 0.0;
    for (const auto& p : params) w = std::max(w, p.max_rel_error);
    return w;
  }
  [[nodiscard]] bool passed() const { return worst() <= tolerance; }

  friend std::ostream& operator<<(std::ostream& os, const GradCheckReport& r) {
    for (const auto& p : r.params) {
      os << "  " << std::left << std::setw(44) << p.name << std::right << std::setw(6) << p.entries_checked
         << "  max rel err " << std::scientific << std::setprecision(2) << p.max_rel_error << std::defaultfloat
         << (p.max_rel_error <= r.tolerance ? "" : "  FAIL") << "\n";
    }
    return os;
  }
};

/// `loss(bool backward)` must evaluate the scalar loss from the current
/// parameter values and, when `backward` is true, accumulate its gradient
/// into the (pre-zeroed) Param::grad fields.
template <typename LossFn>
GradCheckReport grad_check(const ParamList<double>& params, LossFn&& loss, const GradCheckOptions& opts = {}) {
  zero_grads(params);
  const double base = loss(true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  std::vector<Mat<double>> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params) analytic.push_back(p->grad);

  auto numeric_at = [&](double& x, double h) {
    const double saved = x;
    x = saved + h;
    const double up = loss(false);
    x = saved - h;
    const double down = loss(false);
    x = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
    return (up - down) / (2.0 * h);
  };
  auto rel_error = [&](double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), opts.abs_floor});
  };

  Rng rng(opts.seed);
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    const auto n = static_cast<std::size_t>(p->value.size());
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (opts.max_entries_per_tensor > 0 && n > opts.max_entries_per_tensor) {
      for (std::size_t i = 0; i < opts.max_entries_per_tensor; ++i) {
        std::swap(entries[i], entries[i + rng.index(n - i)]);
      }
      entries.resize(opts.max_entries_per_tensor);
    }
    ParamCheck check{p->name, 0.0, entries.size()};
    for (std::size_t e : entries) {
      double& x = p->value.data()[e];
      const double a = analytic[pi].data()[e];
      double err = rel_error(a, numeric_at(x, opts.step));
      // A kink (ReLU, hinge, clamp) inside [x-h, x+h] biases the central
      // difference; a smaller step isolates it from a genuine mismatch.
      if (err > opts.tolerance) err = std::min(err, rel_error(a, numeric_at(x, opts.step * 0.1)));
      check.max_rel_error = std::max(check.max_rel_error, err);
    }
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace alan::nn
