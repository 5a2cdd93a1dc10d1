// Patch masks: exact counts, complement partition, determinism, proportion
// sampling statistics, and input validation.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "seqco/masking.hpp"

using namespace seqco;

TEST_CASE("masked cell count is exactly round(p * cells)") {
  for (double p : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
    auto m = random_mask(64, 64, 16, p, 9);
    REQUIRE(m.cell_count() == 16);
    REQUIRE(m.masked_count() == static_cast<int>(std::lround(p * 16)));
  }
  // pinned case: 64x64, patch 16, p = 0.5 -> exactly 8 of 16 cells
  auto half = random_mask(64, 64, 16, 0.5, 123);
  REQUIRE(half.masked_count() == 8);
}

TEST_CASE("edge patches count as full cells") {
  auto m = random_mask(70, 50, 16, 0.5, 1);  // grid 5 x 4 = 20 cells
  REQUIRE(m.grid_h == 5);
  REQUIRE(m.grid_w == 4);
  REQUIRE(m.masked_count() == 10);
  // pixel lookup covers the ragged edge
  REQUIRE_NOTHROW(m.masked_pixel(69, 49));
}

TEST_CASE("complement is an involution and partitions the grid") {
  auto m = random_mask(64, 64, 8, 0.7, 77);
  auto c = complement(m);
  REQUIRE(complement(c) == m);
  REQUIRE(m.masked_count() + c.masked_count() == m.cell_count());
  for (int gy = 0; gy < m.grid_h; ++gy)
    for (int gx = 0; gx < m.grid_w; ++gx) REQUIRE((m.masked(gy, gx) != c.masked(gy, gx)));
}

TEST_CASE("same seed reproduces the mask bit for bit") {
  auto a = random_mask(96, 64, 16, 0.4, 42);
  auto b = random_mask(96, 64, 16, 0.4, 42);
  REQUIRE(a == b);
  auto c = random_mask(96, 64, 16, 0.4, 43);
  REQUIRE(a.masked_count() == c.masked_count());  // count fixed even when layout differs
}

TEST_CASE("masked cells are uniformly distributed across positions") {
  const int trials = 4000;
  std::vector<int> hits(16, 0);
  for (int t = 0; t < trials; ++t) {
    auto m = random_mask(64, 64, 16, 0.5, 1000 + static_cast<std::uint64_t>(t));
    for (int i = 0; i < 16; ++i) hits[static_cast<std::size_t>(i)] += m.cells[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < 16; ++i) {
    double freq = static_cast<double>(hits[static_cast<std::size_t>(i)]) / trials;
    REQUIRE_THAT(freq, Catch::Matchers::WithinAbs(0.5, 0.03));
  }
}

TEST_CASE("ranged proportion samples match the uniform mean") {
  ProportionSpec spec = ProportionSpec::range(0.3, 0.8);
  double acc = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double p = sample_proportion(spec, static_cast<std::uint64_t>(i));
    REQUIRE(p >= 0.3);
    REQUIRE(p <= 0.8);
    acc += p;
  }
  REQUIRE_THAT(acc / n, Catch::Matchers::WithinAbs(0.55, 0.01));
  // fixed spec is deterministic regardless of seed
  REQUIRE(sample_proportion(ProportionSpec::fixed(0.7), 1) == 0.7);
  REQUIRE(sample_proportion(ProportionSpec::fixed(0.7), 2) == 0.7);
}

TEST_CASE("invalid mask parameters are rejected") {
  REQUIRE_THROWS_AS(random_mask(32, 32, 64, 0.5, 1), std::invalid_argument);  // patch > image
  REQUIRE_THROWS_AS(random_mask(32, 32, 0, 0.5, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(random_mask(32, 32, 16, 1.5, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_proportion(ProportionSpec::range(0.8, 0.3), 1), std::invalid_argument);
}
