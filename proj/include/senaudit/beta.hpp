#pragma once

#include <cmath>
#include <limits>

#include "senaudit/error.hpp"

namespace senaudit::numeric {

namespace detail {

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
// Converges quickly for x < (a + 1) / (a + b + 2); the iteration count grows
// roughly with sqrt(max(a, b)), hence the generous cap.
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIterations = 1'000'000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;

  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  throw Error(ErrorCode::domain, "incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// ln B(a, b).
inline double log_beta(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

namespace detail {

// lgamma(x) minus its Stirling approximation (x - 1/2) ln x - x + ln(2 pi) / 2.
inline double stirling_remainder(double x) {
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  if (x < 10.0) return std::lgamma(x) - ((x - 0.5) * std::log(x) - x + kHalfLog2Pi);
  const double r = 1.0 / x;
  const double r2 = r * r;
  return r * (1.0 / 12 - r2 * (1.0 / 360 - r2 * (1.0 / 1260 - r2 * (1.0 / 1680 - r2 / 1188))));
}

// ln(c * y / d), via log1p when the ratio is close to 1.
inline double log_ratio(double c, double y, double d) {
  const double t = (c * y - d) / d;
  return std::fabs(t) < 0.5 ? std::log1p(t) : std::log(c * y / d);
}

// ln[x^a (1-x)^b / B(a, b)], written so that no large terms cancel.
inline double log_front(double a, double b, double x) {
  constexpr double kTwoPi = 6.28318530717958647693;
  const double ab = a + b;
  return a * log_ratio(ab, x, a) + b * log_ratio(ab, 1.0 - x, b) +
         0.5 * std::log(a / ab * b / kTwoPi) + stirling_remainder(ab) - stirling_remainder(a) -
         stirling_remainder(b);
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b) for a, b > 0.
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw Error(ErrorCode::domain, "incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw Error(ErrorCode::domain, "incomplete beta needs 0 <= x <= 1");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = detail::log_front(a, b, x);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return std::exp(log_front) * detail::beta_continued_fraction(a, b, x) / a;
  }
  return 1.0 - std::exp(log_front) * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Inverse of x -> I_x(a, b) by bisection on [0, 1]. Returns the point where
/// the bracket collapses to adjacent doubles (or 200 halvings).
inline double inverse_incomplete_beta(double q, double a, double b) {
  if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorCode::domain, "quantile must lie in [0, 1]");
  if (q == 0.0) return 0.0;
  if (q == 1.0) return 1.0;
  double lo = 0.0;
  double hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = lo + (hi - lo) / 2.0;
    if (mid <= lo || mid >= hi) break;
    if (incomplete_beta(a, b, mid) < q) lo = mid;
    else hi = mid;
  }
  return lo + (hi - lo) / 2.0;
}

/// Pr(S >= t) for S ~ Binomial(n, p), via Pr(S >= t) = I_p(t, n - t + 1).
inline double binomial_upper_tail(long long n, long long t, double p) {
  if (n < 0) throw Error(ErrorCode::domain, "binomial needs n >= 0");
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::domain, "binomial needs 0 <= p <= 1");
  if (t <= 0) return 1.0;
  if (t > n) return 0.0;
  return incomplete_beta(static_cast<double>(t), static_cast<double>(n - t + 1), p);
}

/// Pr(S <= k) for S ~ Binomial(n, p).
inline double binomial_cdf(long long n, long long k, double p) {
  if (k < 0) return 0.0;
  if (k >= n) return 1.0;
  return incomplete_beta(static_cast<double>(n - k), static_cast<double>(k + 1), 1.0 - p);
}

}  // namespace senaudit::numeric
