#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "dcdl/pooling.hpp"
#include "dcdl/random.hpp"

using namespace dcdl;

TEST_CASE("block grid geometry and padding") {
  const BlockGrid g(5, 7, 2, 3);
  CHECK(g.rows() == 3);
  CHECK(g.cols() == 3);
  CHECK(g.block_size() == 6);
  CHECK(g.valid_count(0, 0) == 6);
  CHECK(g.valid_count(2, 2) == 1);  // row 4, col 6
  CHECK(g.cell(2, 2, 1).value() == std::pair<std::size_t, std::size_t>{4, 6});
  CHECK_FALSE(g.cell(2, 2, 2).has_value());
  CHECK_FALSE(g.cell(2, 0, 4).has_value());
  CHECK_THROWS_AS(g.cell(0, 0, 7), RangeError);
  CHECK_THROWS_AS(BlockGrid(0, 3, 1, 1), DimensionError);
  // Every source cell lies in exactly one block, at its own position.
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 7; ++j) {
      const auto c = g.cell(i / 2, j / 3, g.position_of(i, j));
      REQUIRE(c.has_value());
      CHECK(c->first == i);
      CHECK(c->second == j);
    }
  }
}

TEST_CASE("pool_max examples") {
  const BlockGrid g(2, 2, 2, 2);
  auto r = pool_max(Plane(2, 2), g);
  CHECK(r.values(0, 0) == 0.0);
  CHECK(r.positions(0, 0) == 0);
  r = pool_max(Plane{{0.0, 0.0}, {0.0, 3.5}}, g);
  CHECK(r.values(0, 0) == 3.5);
  CHECK(r.positions(0, 0) == 4);
  r = pool_max(Plane{{0.0, -2.0}, {0.0, 0.0}}, g);
  CHECK(r.values(0, 0) == -2.0);
  CHECK(r.positions(0, 0) == 2);
}

TEST_CASE("pool_max rejects two non-zeros in a block") {
  const BlockGrid g(2, 4, 2, 2);
  CHECK_THROWS_AS(pool_max(Plane{{1.0, 0.0, 0.0, 0.0}, {0.0, 1.0, 0.0, 0.0}}, g),
                  InvariantViolation);
  CHECK_THROWS_AS(pool_max(Plane(3, 4), g), DimensionError);
}

TEST_CASE("unpool examples and errors") {
  const BlockGrid g(2, 2, 2, 2);
  CHECK(unpool(Plane(1, 1), PositionGrid(1, 1), g) == Plane(2, 2));
  CHECK(unpool(Plane{{5.0}}, PositionGrid{{3}}, g) == Plane{{0.0, 0.0}, {5.0, 0.0}});
  CHECK_THROWS_AS(unpool(Plane{{5.0}}, PositionGrid{{0}}, g), ValidationError);
  CHECK_THROWS_AS(unpool(Plane{{5.0}}, PositionGrid{{5}}, g), RangeError);
  CHECK_THROWS_AS(unpool(Plane{{5.0}}, PositionGrid{{-1}}, g), RangeError);
  const BlockGrid padded(3, 3, 2, 2);
  CHECK_THROWS_AS(unpool(Plane{{0.0, 1.0}, {0.0, 0.0}}, PositionGrid{{0, 2}, {0, 0}}, padded),
                  RangeError);
}

TEST_CASE("pool_max(unpool(p, q)) = (p, q) on random valid pairs") {
  Rng rng = derive_stream(30, 0, 0);
  for (int t = 0; t < 1000; ++t) {
    const auto sr = 1 + static_cast<std::size_t>(uniform01(rng) * 9);
    const auto sc = 1 + static_cast<std::size_t>(uniform01(rng) * 9);
    const auto pr = 1 + static_cast<std::size_t>(uniform01(rng) * 3);
    const auto pc = 1 + static_cast<std::size_t>(uniform01(rng) * 3);
    const BlockGrid g(sr, sc, pr, pc);
    Plane p(g.rows(), g.cols());
    PositionGrid q(g.rows(), g.cols());
    for (std::size_t br = 0; br < g.rows(); ++br) {
      for (std::size_t bc = 0; bc < g.cols(); ++bc) {
        if (uniform01(rng) < 0.4) continue;
        int pos = 0;
        do {
          pos = 1 + static_cast<int>(uniform01(rng) * static_cast<double>(g.block_size()));
        } while (!g.cell(br, bc, pos));
        q(br, bc) = pos;
        p(br, bc) = normal(rng, 0.0, 1.0);
      }
    }
    const Plane s = unpool(p, q, g);
    CHECK(at_most_one_per_block(s, g));
    const auto back = pool_max(s, g);
    CHECK(back.values == p);
    CHECK(back.positions == q);
  }
}

TEST_CASE("pool_max is equivariant to block-aligned translation") {
  Rng rng = derive_stream(31, 0, 0);
  const BlockGrid g(6, 6, 2, 2);
  const BlockGrid wide(6, 8, 2, 2);
  Plane s(6, 6);
  for (std::size_t br = 0; br < 3; ++br) {
    for (std::size_t bc = 0; bc < 3; ++bc) {
      s(br * 2 + (br + bc) % 2, bc * 2 + bc % 2) = normal(rng, 0, 1);
    }
  }
  Plane shifted(6, 8);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) shifted(i, j + 2) = s(i, j);
  }
  const auto a = pool_max(s, g);
  const auto b = pool_max(shifted, wide);
  for (std::size_t br = 0; br < 3; ++br) {
    CHECK(b.values(br, 0) == 0.0);
    for (std::size_t bc = 0; bc < 3; ++bc) {
      CHECK(b.values(br, bc + 1) == a.values(br, bc));
      CHECK(b.positions(br, bc + 1) == a.positions(br, bc));
    }
  }
}

TEST_CASE("sample_positions: uniform weights") {
  Rng rng = derive_stream(32, 0, 0);
  const BlockGrid g(2, 2, 2, 2);
  const std::vector<std::vector<double>> w{{1.0, 1.0, 1.0, 1.0}};
  std::array<int, 4> counts{};
  const int n = 100000;
  for (int t = 0; t < n; ++t) {
    ++counts[static_cast<std::size_t>(sample_positions(Plane{{1.0}}, w, g, rng)(0, 0) - 1)];
  }
  const double se = std::sqrt(0.25 * 0.75 / n);
  for (int c : counts) CHECK(std::abs(c / static_cast<double>(n) - 0.25) <= 3 * se);
}

TEST_CASE("sample_positions: point mass, zero parents, padding") {
  Rng rng = derive_stream(33, 0, 0);
  const BlockGrid g(2, 4, 2, 2);
  const std::vector<std::vector<double>> w{{1.0, 0.0, 0.0, 0.0}, {0.0, 0.0, 0.0, 1.0}};
  for (int t = 0; t < 100; ++t) {
    const auto q = sample_positions(Plane{{2.0, 0.0}}, w, g, rng);
    CHECK(q(0, 0) == 1);
    CHECK(q(0, 1) == 0);
  }
  // Padding cells are never chosen even with weight.
  const BlockGrid padded(1, 1, 2, 2);
  const std::vector<std::vector<double>> pw{{1.0, 5.0, 5.0, 5.0}};
  for (int t = 0; t < 100; ++t) {
    CHECK(sample_positions(Plane{{1.0}}, pw, padded, rng)(0, 0) == 1);
  }
}

TEST_CASE("sample_positions: weights (1,2,3,4)/10 within TV 0.02") {
  Rng rng = derive_stream(34, 0, 0);
  const BlockGrid g(2, 2, 2, 2);
  const std::vector<std::vector<double>> w{{0.1, 0.2, 0.3, 0.4}};
  std::array<double, 4> freq{};
  const int n = 100000;
  for (int t = 0; t < n; ++t) {
    freq[static_cast<std::size_t>(sample_positions(Plane{{-1.0}}, w, g, rng)(0, 0) - 1)] += 1.0 / n;
  }
  double tv = 0.0;
  for (std::size_t i = 0; i < 4; ++i) tv += 0.5 * std::abs(freq[i] - w[0][i]);
  CHECK(tv <= 0.02);
}

TEST_CASE("sample_positions: errors") {
  Rng rng = derive_stream(35, 0, 0);
  const BlockGrid g(2, 2, 2, 2);
  CHECK_THROWS_AS(sample_positions(Plane{{1.0}}, std::vector<std::vector<double>>{{0, 0, 0, 0}}, g, rng),
                  DegenerateError);
  CHECK_THROWS_AS(sample_positions(Plane{{1.0}}, std::vector<std::vector<double>>{{1, -1, 0, 0}}, g, rng),
                  ValidationError);
  CHECK_THROWS_AS(sample_positions(Plane{{1.0}}, std::vector<std::vector<double>>{{1, 1}}, g, rng),
                  DimensionError);
  // A zero parent with all-zero weights is fine.
  CHECK(sample_positions(Plane{{0.0}}, std::vector<std::vector<double>>{{0, 0, 0, 0}}, g, rng)(0, 0) == 0);
}

TEST_CASE("sample_positions consumes one draw per non-zero parent") {
  const BlockGrid g(4, 4, 2, 2);
  const std::vector<std::vector<double>> w(4, std::vector<double>{1, 2, 3, 4});
  Rng a = derive_stream(36, 0, 0), b = derive_stream(36, 0, 0);
  sample_positions(Plane{{1.0, 0.0}, {0.0, 3.0}}, w, g, a);
  uniform01(b);
  uniform01(b);
  CHECK(a() == b());
}
