// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

namespace lga {

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double incomplete_beta(double a, double b, double x);

/// Two-sided tail probability P(|T| >= |t|) for Student's t with `df` degrees.
double student_t_two_sided(double t, double df);

struct TTestRecord {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  bool different = false;
};

/// Welch's unequal-variance two-sample t-test, two-sided.
/// Zero variance in both samples: equal means give t = 0, p = 1; unequal
/// means give p = 0 and different = true (t = +-inf).
TTestRecord t_test(std::span<const double> a, std::span<const double> b, double alpha = 0.05);

/// Quantile by linear interpolation between order statistics at position
/// q (n - 1) of an ascending sample.
double interpolated_quantile(std::span<const double> sorted, double q);

struct OutlierMask {
  std::vector<bool> flagged;
  std::string note;  // non-empty when the rule could not be applied
};

/// Tukey's fences: flag v < Q1 - k IQR or v > Q3 + k IQR. Fewer than four
/// values, or every value flagged, yields an all-false mask with a note.
OutlierMask tukey_outliers(std::span<const double> values, double k = 1.5);

double mean(std::span<const double> xs);

}  // namespace lga
