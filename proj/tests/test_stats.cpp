// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <boost/math/special_functions/beta.hpp>

#include "lga/error.hpp"
#include "lga/random.hpp"
#include "lga/stats.hpp"
#include "oracles.hpp"

using namespace lga;
using lga::oracle::rel_err;

TEST_SUITE("stats") {

TEST_CASE("t_test examples") {
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6}, z{0, 0, 0}, o{1, 1, 1};
  const auto same = t_test(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);
  CHECK_FALSE(same.different);

  const auto r = t_test(a, b);
  CHECK(r.t == doctest::Approx(-3.6742346).epsilon(1e-7));
  CHECK(r.df == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(r.p == doctest::Approx(0.0213).epsilon(0.01));
  CHECK(r.different);

  const auto zv = t_test(z, o);
  CHECK(zv.different);
  CHECK(zv.p == 0.0);
  const auto eq = t_test(o, o);
  CHECK(eq.t == 0.0);
  CHECK(eq.p == 1.0);
  CHECK_FALSE(eq.different);

  CHECK_THROWS_AS(t_test(std::vector<double>{1.0}, b), InvalidArgument);
}

TEST_CASE("t_test agrees with the Welch reference") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(2 + rng.below(30)), b(2 + rng.below(30));
    const double shift = rng.normal(), sa = 0.1 + 3 * rng.uniform(), sb = 0.1 + 3 * rng.uniform();
    for (auto& x : a) x = sa * rng.normal();
    for (auto& x : b) x = shift + sb * rng.normal();
    const auto got = t_test(a, b);
    const auto ref = oracle::welch(a, b);
    CHECK(rel_err(got.t, ref.t) <= 1e-9);
    CHECK(rel_err(got.df, ref.df) <= 1e-9);
    CHECK(rel_err(got.p, ref.p) <= 1e-9);
    CHECK(got.different == (ref.p < 0.05));
  }
}

TEST_CASE("incomplete beta against Boost") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = 0.05 + 30 * rng.uniform(), b = 0.05 + 30 * rng.uniform(), x = rng.uniform();
    CHECK(rel_err(incomplete_beta(a, b, x), boost::math::ibeta(a, b, x)) <= 1e-10);
  }
  CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
  CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
  CHECK_THROWS_AS(incomplete_beta(0.0, 1.0, 0.5), InvalidArgument);
}

TEST_CASE("two-sided p is monotone in |t|") {
  for (double df : {1.0, 3.5, 10.0, 200.0}) {
    double prev = 1.0;
    for (double t = 0.0; t <= 20.0; t += 0.25) {
      const double p = student_t_two_sided(t, df);
      CHECK(p <= prev);
      CHECK(p == student_t_two_sided(-t, df));
      prev = p;
    }
  }
}

TEST_CASE("tukey matches the reference on random arrays") {
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> v(4 + rng.below(20));
    const bool integral = trial % 2 == 0;
    for (auto& x : v) x = integral ? static_cast<double>(rng.below(12)) : rng.normal();
    if (trial % 3 == 0) v[rng.below(v.size())] = integral ? 60.0 : 25.0 * rng.normal();
    CHECK(tukey_outliers(v).flagged == oracle::tukey(v));
    CHECK(tukey_outliers(v, 0.5).flagged == oracle::tukey(v, 0.5));
  }
}

TEST_CASE("mean") {
  const std::vector<double> x{1.0, 2.0, 6.0};
  CHECK(lga::mean(x) == 3.0);
}

}  // TEST_SUITE
