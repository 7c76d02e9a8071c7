// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "errors.hpp"

namespace mdm::stats {

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1 denominator).
inline double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double standard_error(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  return stddev(v) / std::sqrt(static_cast<double>(v.size()));
}

struct TestResult {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;  // one-sided
};

namespace detail {

inline double upper_tail(double t, double dof) {
  if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
  boost::math::students_t dist(dof);
  return boost::math::cdf(boost::math::complement(dist, t));
}

}  // namespace detail

// One-sided paired t-test of H1: mean(a - b) < 0.
inline TestResult paired_t_less(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DomainError("paired test needs equal lengths >= 2");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double se = standard_error(d);
  TestResult r;
  r.dof = static_cast<double>(d.size() - 1);
  const double m = mean(d);
  if (se == 0.0) {
    r.statistic = m < 0 ? -INFINITY : (m > 0 ? INFINITY : 0.0);
    r.p_value = m < 0 ? 0.0 : 1.0;
    return r;
  }
  r.statistic = m / se;
  r.p_value = detail::upper_tail(-r.statistic, r.dof);
  return r;
}

// One-sided Welch t-test of H1: mean(a) < mean(b).
inline TestResult welch_t_less(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DomainError("welch test needs at least 2 samples per group");
  const double va = stddev(a) * stddev(a) / static_cast<double>(a.size());
  const double vb = stddev(b) * stddev(b) / static_cast<double>(b.size());
  TestResult r;
  const double diff = mean(a) - mean(b);
  if (va + vb == 0.0) {
    r.statistic = diff < 0 ? -INFINITY : (diff > 0 ? INFINITY : 0.0);
    r.p_value = diff < 0 ? 0.0 : 1.0;
    r.dof = static_cast<double>(a.size() + b.size() - 2);
    return r;
  }
  r.statistic = diff / std::sqrt(va + vb);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  r.dof = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p_value = detail::upper_tail(-r.statistic, r.dof);
  return r;
}

}  // namespace mdm::stats
