// SPDX-License-Identifier: Apache-2.0
#include "lga/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lga/error.hpp"

namespace lga {

namespace {

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw InvalidArgument("incomplete_beta: a and b must be positive");
  if (x < 0.0 || x > 1.0) throw InvalidArgument("incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The fraction converges fast for x < (a + 1) / (a + b + 2); use symmetry otherwise.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw InvalidArgument("student_t_two_sided: df must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

double mean(std::span<const double> xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

TTestRecord t_test(std::span<const double> a, std::span<const double> b, double alpha) {
  if (a.size() < 2 || b.size() < 2) throw InvalidArgument("t_test: each sample needs at least 2 values");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = mean(a), mb = mean(b);
  double ssa = 0.0, ssb = 0.0;
  for (double x : a) ssa += (x - ma) * (x - ma);
  for (double x : b) ssb += (x - mb) * (x - mb);
  const double va = ssa / (na - 1.0), vb = ssb / (nb - 1.0);
  const double sea = va / na, seb = vb / nb;
  const double se2 = sea + seb;

  TTestRecord rec;
  if (se2 == 0.0) {
    rec.df = na + nb - 2.0;
    if (ma == mb) {
      rec.t = 0.0;
      rec.p = 1.0;
      rec.different = false;
    } else {
      rec.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      rec.p = 0.0;
      rec.different = true;
    }
    return rec;
  }
  rec.t = (ma - mb) / std::sqrt(se2);
  rec.df = se2 * se2 / (sea * sea / (na - 1.0) + seb * seb / (nb - 1.0));
  rec.p = std::clamp(student_t_two_sided(rec.t, rec.df), 0.0, 1.0);
  rec.different = rec.p < alpha;
  return rec;
}

double interpolated_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw InvalidArgument("interpolated_quantile: empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

OutlierMask tukey_outliers(std::span<const double> values, double k) {
  OutlierMask out;
  out.flagged.assign(values.size(), false);
  if (values.size() < 4) {
    out.note = "fewer than 4 values; no exclusion applied";
    return out;
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double q1 = interpolated_quantile(sorted, 0.25);
  const double q3 = interpolated_quantile(sorted, 0.75);
  const double iqr = q3 - q1;
  const double lo = q1 - k * iqr, hi = q3 + k * iqr;
  std::size_t n_flagged = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out.flagged[i] = values[i] < lo || values[i] > hi;
    n_flagged += out.flagged[i];
  }
  if (n_flagged == values.size()) {
    out.flagged.assign(values.size(), false);
    out.note = "every value outside the fences; no exclusion applied";
  }
  return out;
}

}  // namespace lga
