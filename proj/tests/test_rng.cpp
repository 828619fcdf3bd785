#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mdcap/rng.hpp"

using namespace mdcap;

TEST_CASE("streams are deterministic and distinct") {
  Rng a = Rng::stream(7, Rng::kScene, 3);
  Rng b = Rng::stream(7, Rng::kScene, 3);
  Rng c = Rng::stream(7, Rng::kScene, 4);
  Rng d = Rng::stream(7, Rng::kCorruption, 3);
  bool any_c = false, any_d = false;
  for (int i = 0; i < 64; ++i) {
    const uint64_t va = a.next_u64();
    CHECK(va == b.next_u64());
    any_c = any_c || va != c.next_u64();
    any_d = any_d || va != d.next_u64();
  }
  CHECK(any_c);
  CHECK(any_d);
}

TEST_CASE("uniform lies in [0,1) and has the right mean") {
  Rng rng(123);
  double sum = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("uniform_below stays in range and covers values") {
  Rng rng(9);
  int counts[7] = {0};
  for (int i = 0; i < 7000; ++i) counts[rng.uniform_below(7)]++;
  for (int k = 0; k < 7; ++k) CHECK(counts[k] > 700);
  CHECK_THROWS_AS(rng.uniform_below(0), std::invalid_argument);
}

TEST_CASE("normal moments") {
  Rng rng(42);
  double sum = 0, sumsq = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sumsq += x * x;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(1).scale(0.02));
  CHECK(sumsq / n == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("truncated normal respects the cut") {
  Rng rng(5);
  for (int i = 0; i < 20000; ++i) {
    const double x = rng.truncated_normal(0.02, 0.04);
    REQUIRE(x >= -0.04);
    REQUIRE(x <= 0.04);
  }
}

TEST_CASE("fnv1a matches the reference offset basis") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") != fnv1a("b"));
}
