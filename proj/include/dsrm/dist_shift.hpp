#pragma once

#include <cmath>
#include <span>
#include <string>

#include "dsrm/errors.hpp"

namespace dsrm {

// Distances between discrete weight distributions sharing one finite support.
// Only the 0-1 ground cost is supported; under it the optimal coupling keeps
// the common mass min(p_i, q_i) in place and moves the rest at unit cost, so
// W_p reduces to a power of total variation.

inline constexpr double kNormalizationTol = 1e-9;

namespace detail {

inline void check_distribution(std::span<const double> p, const char* who) {
  double sum = 0.0;
  for (double v : p) {
    require(std::isfinite(v) && v >= 0.0, std::string(who) + ": entries must be finite and non-negative");
    sum += v;
  }
  require(std::abs(sum - 1.0) <= kNormalizationTol,
          std::string(who) + ": input is not normalized (sum = " + std::to_string(sum) + ")");
}

}  // namespace detail

inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), "tv_distance: length mismatch");
  detail::check_distribution(p, "tv_distance");
  detail::check_distribution(q, "tv_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

/// Euclidean distance; no normalization required.
inline double l2_shift(std::span<const double> w, std::span<const double> w0) {
  require(w.size() == w0.size(), "l2_shift: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w[i] - w0[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// p-th Wasserstein distance under the 0-1 ground cost: TV^(1/order).
inline double wasserstein_01(std::span<const double> p, std::span<const double> q, int order) {
  require(order >= 1, "wasserstein_01: order must be >= 1");
  const double tv = tv_distance(p, q);
  return order == 1 ? tv : std::pow(tv, 1.0 / order);
}

struct ShiftCheck {
  bool within = false;
  double realized = 0.0;
};

inline ShiftCheck verify_shift_bound(std::span<const double> p, std::span<const double> q, double eps, int order) {
  const double d = wasserstein_01(p, q, order);
  return {d <= eps + 1e-12, d};
}

}  // namespace dsrm
