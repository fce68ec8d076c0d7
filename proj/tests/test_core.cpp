#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "uloc/core.hpp"

using namespace uloc;

namespace {

// Independent sort-based oracle for summarize_errors.
ErrorStats stats_oracle(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  ErrorStats s;
  s.min = v.front();
  s.max = v.back();
  if (v.size() % 2 == 1) {
    s.median = v[v.size() / 2];
  } else {
    s.median = (v[v.size() / 2 - 1] + v[v.size() / 2]) / 2.0;
  }
  double acc = 0.0;
  for (double x : v) acc += x;
  s.mean = acc / static_cast<double>(v.size());
  return s;
}

}  // namespace

TEST_CASE("position_error on known triangles") {
  CHECK(position_error({1, 1}, {4, 5}) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(position_error({0, 0}, {0, 0}) == 0.0);
  CHECK(position_error({2, 0}, {-1, 0}) == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("position_error rejects non-finite input") {
  const double inf = std::numeric_limits<double>::infinity();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(position_error({inf, 0}, {0, 0}), DomainError);
  CHECK_THROWS_AS(position_error({0, 0}, {nan, 0}), DomainError);
}

TEST_CASE("position_error metric axioms on random inputs") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int i = 0; i < 2000; ++i) {
    Vec2 a{u(rng), u(rng)}, b{u(rng), u(rng)}, c{u(rng), u(rng)};
    const double ab = position_error(a, b);
    const double ba = position_error(b, a);
    const double ac = position_error(a, c);
    const double cb = position_error(c, b);
    CHECK(ab == ba);                       // symmetry
    CHECK(position_error(a, a) == 0.0);    // identity
    CHECK(ab <= ac + cb + 1e-9);           // triangle inequality
    CHECK(ab >= 0.0);
  }
}

TEST_CASE("orientation_error on axis cases") {
  CHECK(orientation_error({0, 1}, {1, 0}) == doctest::Approx(90.0).epsilon(1e-12));
  CHECK(orientation_error({3, 0}, {1, 0}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(orientation_error({-1, 0}, {1, 0}) == doctest::Approx(180.0).epsilon(1e-12));
}

TEST_CASE("orientation_error invariant to positive scaling of prediction") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ang(-kPi, kPi);
  std::uniform_real_distribution<double> scale(1e-6, 1e6);
  for (int i = 0; i < 2000; ++i) {
    const double a = ang(rng), t = ang(rng), s = scale(rng);
    const Vec2 q{std::cos(a), std::sin(a)};
    const Vec2 qs{s * q[0], s * q[1]};
    const Vec2 truth{std::cos(t), std::sin(t)};
    const double e1 = orientation_error(q, truth);
    const double e2 = orientation_error(qs, truth);
    CHECK(std::abs(e1 - e2) < 1e-9);
    CHECK(e1 >= 0.0);
    CHECK(e1 <= 180.0);
  }
}

TEST_CASE("orientation_error rejects degenerate prediction") {
  CHECK_THROWS_AS(orientation_error({0, 0}, {1, 0}), DegenerateOrientation);
  CHECK_THROWS_AS(orientation_error({1e-13, 0}, {1, 0}), DegenerateOrientation);
}

TEST_CASE("orientation_error rejects non-unit truth") {
  CHECK_THROWS_AS(orientation_error({1, 0}, {2, 0}), DomainError);
}

TEST_CASE("normalize_orientation") {
  auto n1 = normalize_orientation({0, 2});
  CHECK(n1[0] == doctest::Approx(0.0));
  CHECK(n1[1] == doctest::Approx(1.0));
  auto n2 = normalize_orientation({1, 0});
  CHECK(n2[0] == 1.0);
  CHECK(n2[1] == 0.0);
  auto n3 = normalize_orientation({3, 4});
  CHECK(n3[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(n3[1] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK_THROWS_AS(normalize_orientation({0, 0}), DegenerateOrientation);
}

TEST_CASE("summarize_errors small cases") {
  auto s = summarize_errors({1, 2, 3, 4});
  CHECK(s.min == 1.0);
  CHECK(s.median == 2.5);
  CHECK(s.max == 4.0);
  CHECK(s.mean == 2.5);

  auto one = summarize_errors({5});
  CHECK(one.min == 5.0);
  CHECK(one.median == 5.0);
  CHECK(one.max == 5.0);
  CHECK(one.mean == 5.0);

  // expected values frozen from the arithmetic oracle
  auto t = summarize_errors({0.023, 1.610, 0.289});
  CHECK(t.min == 0.023);
  CHECK(t.median == 0.289);
  CHECK(t.max == 1.610);
  CHECK(t.mean == doctest::Approx(0.6406666666666667).epsilon(1e-12));
}

TEST_CASE("summarize_errors error paths") {
  CHECK_THROWS_AS(summarize_errors({}), EmptySample);
  CHECK_THROWS_AS(summarize_errors({1.0, std::numeric_limits<double>::quiet_NaN()}),
                  DomainError);
}

TEST_CASE("summarize_errors matches brute-force oracle on random lists") {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  std::uniform_int_distribution<std::size_t> len(1, 10000);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(len(rng));
    for (auto& x : v) x = u(rng);
    const auto got = summarize_errors(v);
    const auto want = stats_oracle(v);
    CHECK(got.min == want.min);
    CHECK(got.max == want.max);
    CHECK(got.median == want.median);
    CHECK(got.mean == doctest::Approx(want.mean).epsilon(1e-12));
    CHECK(got.min <= got.median);
    CHECK(got.median <= got.max);
    CHECK(got.min <= got.mean);
    CHECK(got.mean <= got.max);
  }
}

TEST_CASE("Pose2D heading round trip and validity") {
  const auto p = Pose2D::from_heading(1.5, -2.0, 0.7);
  CHECK(pose_valid(p));
  CHECK(p.heading() == doctest::Approx(0.7).epsilon(1e-12));
  Pose2D bad;
  bad.q = {0.5, 0.5};
  CHECK_FALSE(pose_valid(bad));
}
