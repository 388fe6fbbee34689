#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <vector>

#include "hsi/rng.hpp"

using hsi::Rng;

TEST_CASE("splitmix64 reference stream") {
  // Vectors from the published splitmix64 reference implementation.
  Rng r0(0);
  CHECK(r0.next_u64() == 0xe220a8397b1dcdafULL);
  CHECK(r0.next_u64() == 0x6e789e6aa1b965f4ULL);
  CHECK(r0.next_u64() == 0x06c45d188009454fULL);

  Rng r42(42);
  CHECK(r42.next_u64() == 0xbdd732262feb6e95ULL);
  CHECK(r42.next_u64() == 0x28efe333b266f103ULL);
  CHECK(r42.next_u64() == 0x47526757130f9f52ULL);
}

TEST_CASE("next_double lies in [0,1) and is deterministic") {
  Rng a(7), b(7);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double x = a.next_double();
    CHECK(x == b.next_double());
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    REQUIRE(x >= 0.0);
    REQUIRE(x < 1.0);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
}

TEST_CASE("next_below stays in range and covers all residues") {
  Rng r(3);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const uint64_t v = r.next_below(7);
    REQUIRE(v < 7);
    ++hits[v];
  }
  for (int h : hits) CHECK(h > 700);  // ~1000 expected, crude uniformity bound
  Rng one(9);
  for (int i = 0; i < 100; ++i) CHECK(one.next_below(1) == 0);
}

TEST_CASE("next_gaussian has standard moments") {
  Rng r(123);
  const int n = 200000;
  double sum = 0, sum_sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.next_gaussian();
    sum += x;
    sum_sq += x * x;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(var == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("fork derives independent reproducible substreams") {
  const Rng base(99);
  Rng f1 = base.fork(1);
  Rng f1_again = base.fork(1);
  Rng f2 = base.fork(2);
  const uint64_t a = f1.next_u64();
  CHECK(a == f1_again.next_u64());
  CHECK(a != f2.next_u64());

  // forking must not consume from the parent stream
  Rng parent(99);
  (void)parent.fork(5);
  Rng untouched(99);
  CHECK(parent.next_u64() == untouched.next_u64());
}

TEST_CASE("mix_key separates composite indices") {
  std::set<uint64_t> keys;
  for (uint64_t a = 0; a < 64; ++a)
    for (uint64_t b = 0; b < 64; ++b) keys.insert(Rng::mix_key(a, b));
  CHECK(keys.size() == 64u * 64u);
  CHECK(Rng::mix_key(3, 4) != Rng::mix_key(4, 3));
  CHECK(Rng::mix_key(3, 4) == Rng::mix_key(3, 4));
}

TEST_CASE("shuffle permutes and is seed-stable") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  std::vector<int> w = v;
  Rng a(5), b(5), c(6);
  a.shuffle(v);
  b.shuffle(w);
  CHECK(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(50);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(sorted == expect);

  std::vector<int> u(50);
  std::iota(u.begin(), u.end(), 0);
  c.shuffle(u);
  CHECK(u != v);  // different seed, different order
}
