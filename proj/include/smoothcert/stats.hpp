#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>

#include "smoothcert/error.hpp"

namespace smoothcert {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

namespace detail {

// Acklam's rational approximation for p <= 0.5, then two Halley steps
// against erfc. Relative error of the seed is ~1e-9; each step roughly
// triples the number of correct digits.
inline double inv_norm_cdf_lower(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  double x;
  if (p < 0.02425) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }
  for (int it = 0; it < 2; ++it) {
    const double e = normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
  }
  return x;
}

// ln B(a, b)
inline double log_beta(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

// Continued fraction for the incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 100000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

// Standard normal quantile. Values above one half go through the lower
// branch on 1 - p, which is exact there, so the odd symmetry is preserved.
inline double inv_norm_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw NumericError("inv_norm_cdf: p must lie in (0, 1), got " + std::to_string(p));
  }
  if (p == 0.5) return 0.0;
  if (p > 0.5) return -detail::inv_norm_cdf_lower(1.0 - p);
  return detail::inv_norm_cdf_lower(p);
}

// Regularized incomplete beta I_x(a, b) for a, b > 0.
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw NumericError("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw NumericError("incomplete_beta: x outside [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double front =
      std::exp(a * std::log(x) + b * std::log1p(-x) - detail::log_beta(a, b));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

// P[Bin(n, p) >= k].
inline double binomial_upper_tail(std::size_t k, std::size_t n, double p) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  return incomplete_beta(static_cast<double>(k), static_cast<double>(n - k + 1), p);
}

// One-sided exact lower confidence bound on a binomial proportion: the
// alpha quantile of Beta(k, n - k + 1), found by bisection on p.
inline double clopper_pearson_lower(std::size_t k, std::size_t n, double alpha) {
  if (n == 0) throw NumericError("clopper_pearson_lower: n must be positive");
  if (k > n) throw NumericError("clopper_pearson_lower: k exceeds n");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw NumericError("clopper_pearson_lower: alpha must lie in (0, 1)");
  }
  if (k == 0) return 0.0;
  if (k == n) return std::pow(alpha, 1.0 / static_cast<double>(n));
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (binomial_upper_tail(k, n, mid) < alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

// Exact two-sided p-value for observing `top` of `top + second` heads from
// a fair coin, with top >= second.
inline double binomial_two_sided_p(std::size_t top, std::size_t second) {
  if (top < second) throw NumericError("binomial_two_sided_p: top < second");
  const std::size_t n = top + second;
  if (n == 0) return 1.0;
  const double tail = binomial_upper_tail(top, n, 0.5);
  return std::fmin(1.0, 2.0 * tail);
}

}  // namespace smoothcert
