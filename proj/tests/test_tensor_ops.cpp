#include <doctest.h>

#include <cmath>

#include "dcdl/random.hpp"
#include "dcdl/tensor_ops.hpp"

using namespace dcdl;

namespace {

Plane random_plane(Rng& rng, std::size_t r, std::size_t c) {
  Plane p(r, c);
  for (double& v : p.values()) v = normal(rng, 0.0, 1.0);
  return p;
}

// Direct double sum, independent of the library loops.
Plane conv_oracle(const Plane& d, const Plane& s) {
  Plane out(d.rows() + s.rows() - 1, d.cols() + s.cols() - 1);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < d.rows(); ++p) {
        for (std::size_t q = 0; q < d.cols(); ++q) {
          const long a = static_cast<long>(i) - static_cast<long>(p);
          const long b = static_cast<long>(j) - static_cast<long>(q);
          if (a < 0 || b < 0 || a >= static_cast<long>(s.rows()) ||
              b >= static_cast<long>(s.cols())) {
            continue;
          }
          acc += d(p, q) * s(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
        }
      }
      out(i, j) = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("conv2d_full identity kernel leaves s unchanged") {
  Rng rng = derive_stream(1, 0, 0);
  const Plane s = random_plane(rng, 4, 5);
  CHECK(conv2d_full(Plane{{1.0}}, s) == s);
}

TEST_CASE("conv2d_full [[1,1]] * [[1,2]] = [[1,3,2]]") {
  CHECK(conv2d_full(Plane{{1.0, 1.0}}, Plane{{1.0, 2.0}}) == Plane{{1.0, 3.0, 2.0}});
}

TEST_CASE("conv2d_full of zeros is zeros") {
  const Plane out = conv2d_full(Plane{{1.0, -2.0}, {3.0, 4.0}}, Plane(3, 3));
  CHECK(out == Plane(4, 4));
}

TEST_CASE("conv2d_full matches the double-sum oracle and has the full shape") {
  Rng rng = derive_stream(2, 0, 0);
  for (int t = 0; t < 20; ++t) {
    const std::size_t dh = 1 + t % 4, dw = 1 + (t / 2) % 3;
    const std::size_t sh = 1 + t % 6, sw = 2 + t % 5;
    const Plane d = random_plane(rng, dh, dw);
    const Plane s = random_plane(rng, sh, sw);
    const Plane out = conv2d_full(d, s);
    CHECK(out.rows() == dh + sh - 1);
    CHECK(out.cols() == dw + sw - 1);
    const Plane ref = conv_oracle(d, s);
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(std::abs(out.values()[i] - ref.values()[i]) < 1e-12);
    }
  }
}

TEST_CASE("conv2d_full rejects empty inputs") {
  CHECK_THROWS_AS(conv2d_full(Plane(), Plane{{1.0}}), DimensionError);
  CHECK_THROWS_AS(conv2d_full(Plane{{1.0}}, Plane()), DimensionError);
}

TEST_CASE("conv2d_full is bilinear") {
  Rng rng = derive_stream(3, 0, 0);
  for (int t = 0; t < 50; ++t) {
    const Plane d = random_plane(rng, 3, 3);
    const Plane s1 = random_plane(rng, 6, 5);
    const Plane s2 = random_plane(rng, 6, 5);
    const double a = normal(rng, 0, 2), b = normal(rng, 0, 2);
    Plane mix(6, 5);
    for (std::size_t i = 0; i < mix.size(); ++i) {
      mix.values()[i] = a * s1.values()[i] + b * s2.values()[i];
    }
    const Plane lhs = conv2d_full(d, mix);
    const Plane r1 = conv2d_full(d, s1), r2 = conv2d_full(d, s2);
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      CHECK(std::abs(lhs.values()[i] - (a * r1.values()[i] + b * r2.values()[i])) < 1e-10);
    }
  }
}

TEST_CASE("corr2d_valid identity kernel leaves x unchanged") {
  Rng rng = derive_stream(4, 0, 0);
  const Plane x = random_plane(rng, 5, 3);
  CHECK(corr2d_valid(Plane{{1.0}}, x) == x);
}

TEST_CASE("corr2d_valid [[1,0],[0,1]] on [[1,2],[3,4]] = [[5]]") {
  CHECK(corr2d_valid(Plane{{1.0, 0.0}, {0.0, 1.0}}, Plane{{1.0, 2.0}, {3.0, 4.0}}) ==
        Plane{{5.0}});
}

TEST_CASE("corr2d_valid rejects kernels larger than the input") {
  CHECK_THROWS_AS(corr2d_valid(Plane(3, 1), Plane(2, 2)), DimensionError);
  CHECK_THROWS_AS(corr2d_valid(Plane(1, 3), Plane(2, 2)), DimensionError);
}

TEST_CASE("adjoint identity on random 8x8 / 3x3 pairs") {
  Rng rng = derive_stream(5, 0, 0);
  for (int t = 0; t < 100; ++t) {
    const Plane d = random_plane(rng, 3, 3);
    const Plane s = random_plane(rng, 8, 8);
    const Plane x = random_plane(rng, 10, 10);
    const double lhs = inner(x, conv2d_full(d, s));
    const double rhs = inner(corr2d_valid(d, x), s);
    CHECK(std::abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("adjoint identity on 100 random shape-compatible triples") {
  Rng rng = derive_stream(6, 0, 0);
  for (int t = 0; t < 100; ++t) {
    const auto dh = 1 + static_cast<std::size_t>(uniform01(rng) * 4);
    const auto dw = 1 + static_cast<std::size_t>(uniform01(rng) * 4);
    const auto sh = 1 + static_cast<std::size_t>(uniform01(rng) * 9);
    const auto sw = 1 + static_cast<std::size_t>(uniform01(rng) * 9);
    const Plane d = random_plane(rng, dh, dw);
    const Plane s = random_plane(rng, sh, sw);
    const Plane x = random_plane(rng, dh + sh - 1, dw + sw - 1);
    CHECK(std::abs(inner(x, conv2d_full(d, s)) - inner(corr2d_valid(d, x), s)) < 1e-10);
  }
}

TEST_CASE("hadamard") {
  const Plane a{{1.0, 2.0}, {3.0, 4.0}};
  CHECK(hadamard(a, Plane(2, 2, 1.0)) == a);
  CHECK(hadamard(a, Plane{{0.0, 1.0}, {1.0, 0.0}}) == Plane{{0.0, 2.0}, {3.0, 0.0}});
  CHECK(hadamard(Plane(2, 2), a) == Plane(2, 2));
  CHECK_THROWS_AS(hadamard(a, Plane(2, 3)), DimensionError);
}

TEST_CASE("placement helpers agree with conv/corr") {
  Rng rng = derive_stream(7, 0, 0);
  const Plane d = random_plane(rng, 3, 2);
  Plane s(4, 5);
  s(2, 3) = 1.5;
  Plane placed(6, 6);
  add_placed(placed, d, 2, 3, 1.5);
  const Plane ref = conv2d_full(d, s);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(std::abs(placed.values()[i] - ref.values()[i]) < 1e-14);
  }
  const Plane x = random_plane(rng, 6, 6);
  const Plane c = corr2d_valid(d, x);
  CHECK(std::abs(placed_inner(d, x, 1, 2) - c(1, 2)) < 1e-14);
  const Plane patch = extract_patch(x, 1, 2, 3, 2);
  CHECK(patch(2, 1) == x(3, 3));
}

TEST_CASE("ensure_finite flags NaN") {
  Plane p(2, 2);
  CHECK_NOTHROW(ensure_finite(p, "p"));
  p(1, 1) = std::nan("");
  CHECK_THROWS_AS(ensure_finite(p, "p"), NumericalError);
}
