#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dcdl/error.hpp"
#include "dcdl/random.hpp"
#include "dcdl/svm.hpp"

using namespace dcdl;

namespace {

double rbf(const Sample& a, const Sample& b, double gamma) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::exp(-gamma * d);
}

// Three well separated Gaussian blobs in 2D.
void blobs(std::size_t per_class, std::uint64_t seed, std::vector<Sample>& x, std::vector<int>& y) {
  Rng rng = derive_stream(seed, 0, 0);
  const double centres[3][2] = {{0.0, 0.0}, {6.0, 0.0}, {0.0, 6.0}};
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int c = 0; c < 3; ++c) {
      x.push_back({centres[c][0] + normal(rng, 0, 0.7), centres[c][1] + normal(rng, 0, 0.7)});
      y.push_back(c + 1);
    }
  }
}

// Two overlapping classes, so some multipliers sit strictly inside (0, C).
void noisy(std::size_t n, std::uint64_t seed, std::vector<Sample>& x, std::vector<int>& y) {
  Rng rng = derive_stream(seed, 0, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    x.push_back({normal(rng, c ? 1.0 : -1.0, 1.0), normal(rng, 0, 1.0), normal(rng, 0, 1.0)});
    y.push_back(c);
  }
}

}  // namespace

TEST_CASE("two separable points") {
  const std::vector<Sample> x{{0.0, 0.0}, {1.0, 1.0}};
  const SvmModel m = svm_train(x, {-1, 1}, 1.0, 0.5);
  CHECK(svm_predict(m, x[0]) == -1);
  CHECK(svm_predict(m, x[1]) == 1);
  const auto v0 = svm_decision_values(m, x[0]);
  const auto v1 = svm_decision_values(m, x[1]);
  CHECK(v0[0] > v0[1]);
  CHECK(v1[1] > v1[0]);
  // Margin: the binary machine for class 1 separates the points.
  CHECK(v1[1] > 0.0);
  CHECK(v0[1] < 0.0);
}

TEST_CASE("XOR with gamma=1, C=10 reaches 100% training accuracy") {
  const std::vector<Sample> x{{0, 0}, {1, 1}, {0, 1}, {1, 0}};
  const std::vector<int> y{0, 0, 1, 1};
  const SvmModel m = svm_train(x, y, 10.0, 1.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(svm_predict(m, x[i]) == y[i]);
}

TEST_CASE("duplicating every training point leaves the decision function unchanged") {
  std::vector<Sample> x;
  std::vector<int> y;
  noisy(60, 60, x, y);
  std::vector<Sample> x2 = x;
  std::vector<int> y2 = y;
  x2.insert(x2.end(), x.begin(), x.end());
  y2.insert(y2.end(), y.begin(), y.end());
  // The invariance is a property of the optimum; solve to near-exactness.
  const SvmOptions tight{1e-10, 10'000'000};
  const SvmModel a = svm_train(x, y, 1.0, 0.5, tight);
  const SvmModel b = svm_train(x2, y2, 0.5, 0.5, tight);  // each copy carries half the box
  Rng rng = derive_stream(61, 0, 0);
  for (int t = 0; t < 50; ++t) {
    const Sample q{normal(rng, 0, 2), normal(rng, 0, 1), normal(rng, 0, 1)};
    const auto va = svm_decision_values(a, q);
    const auto vb = svm_decision_values(b, q);
    for (std::size_t c = 0; c < va.size(); ++c) CHECK(std::abs(va[c] - vb[c]) <= 1e-6);
  }
}

TEST_CASE("duplicating separable training points at the same C") {
  // No multiplier reaches the box, so the duplicated problem has the same
  // optimum with the mass shared between copies.
  std::vector<Sample> x;
  std::vector<int> y;
  blobs(10, 59, x, y);
  std::vector<Sample> x2 = x;
  std::vector<int> y2 = y;
  x2.insert(x2.end(), x.begin(), x.end());
  y2.insert(y2.end(), y.begin(), y.end());
  const SvmOptions tight{1e-10, 10'000'000};
  const SvmModel a = svm_train(x, y, 100.0, 0.25, tight);
  const SvmModel b = svm_train(x2, y2, 100.0, 0.25, tight);
  for (const auto& mach : a.machines) {
    for (double c : mach.coef) CHECK(std::abs(c) < 50.0);
  }
  Rng rng = derive_stream(58, 0, 0);
  for (int t = 0; t < 50; ++t) {
    const Sample q{normal(rng, 3, 3), normal(rng, 3, 3)};
    const auto va = svm_decision_values(a, q);
    const auto vb = svm_decision_values(b, q);
    for (std::size_t c = 0; c < va.size(); ++c) CHECK(std::abs(va[c] - vb[c]) <= 1e-6);
  }
}

TEST_CASE("binary solver: KKT residual and dual feasibility") {
  std::vector<Sample> x;
  std::vector<int> yi;
  noisy(80, 62, x, yi);
  std::vector<double> y(yi.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = yi[i] ? 1.0 : -1.0;
  const auto gram = rbf_gram(x, 0.5);
  const double C = 2.0;
  const BinarySolution s = solve_binary(gram, y, C);
  CHECK(s.kkt_residual <= 1e-3);
  CHECK(kkt_residual(gram, y, s.alpha, C) == doctest::Approx(s.kkt_residual));
  double ya = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(s.alpha[i] >= 0.0);
    CHECK(s.alpha[i] <= C);
    ya += y[i] * s.alpha[i];
  }
  CHECK(std::abs(ya) < 1e-9);
  CHECK_THROWS_AS(solve_binary(gram, std::vector<double>(y.size(), 1.0), C), DegenerateError);
}

TEST_CASE("every trained binary machine meets the KKT tolerance") {
  std::vector<Sample> x;
  std::vector<int> y;
  blobs(30, 63, x, y);
  noisy(40, 64, x, y);  // mixed dimensions are rejected
  CHECK_THROWS_AS(svm_train(x, y, 1.0, 0.5), ValidationError);
  x.clear();
  y.clear();
  blobs(30, 63, x, y);
  const SvmModel m = svm_train(x, y, 10.0, 0.25);
  REQUIRE(m.machines.size() == 3);
  for (const auto& mach : m.machines) CHECK(mach.kkt_residual <= 1e-3);
}

TEST_CASE("training errors") {
  CHECK_THROWS_AS(svm_train({{1.0}, {2.0}}, {3, 3}, 1.0, 1.0), DegenerateError);
  CHECK_THROWS_AS(svm_train({{1.0}, {2.0}}, {3}, 1.0, 1.0), ValidationError);
  CHECK_THROWS_AS(svm_train({{1.0}, {2.0}}, {0, 1}, 0.0, 1.0), ConfigError);
}

TEST_CASE("predicting on a support vector returns its label") {
  std::vector<Sample> x;
  std::vector<int> y;
  blobs(20, 65, x, y);
  const SvmModel m = svm_train(x, y, 10.0, 0.25);
  std::size_t checked = 0;
  for (const auto& mach : m.machines) {
    for (const auto& sv : mach.support) {
      const auto it = std::find(x.begin(), x.end(), sv);
      REQUIRE(it != x.end());
      CHECK(svm_predict(m, sv) == y[static_cast<std::size_t>(it - x.begin())]);
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("single-class model always predicts that class") {
  SvmModel m;
  m.dim = 2;
  m.classes = {4};
  CHECK(svm_predict(m, {0.0, 0.0}) == 4);
  CHECK(svm_predict(m, {-9.0, 3.0}) == 4);
  CHECK_THROWS_AS(svm_predict(m, {1.0}), ValidationError);
}

TEST_CASE("decision values agree with a brute-force kernel expansion") {
  std::vector<Sample> x;
  std::vector<int> y;
  blobs(25, 66, x, y);
  const SvmModel m = svm_train(x, y, 1.0, 0.3);
  Rng rng = derive_stream(67, 0, 0);
  int agree = 0;
  const int n = 500;
  for (int t = 0; t < n; ++t) {
    const Sample q{normal(rng, 3, 4), normal(rng, 3, 4)};
    std::vector<double> v;
    for (const auto& mach : m.machines) {
      double f = mach.bias;
      for (std::size_t i = 0; i < mach.support.size(); ++i) f += mach.coef[i] * rbf(mach.support[i], q, m.gamma);
      v.push_back(f);
    }
    const auto got = svm_decision_values(m, q);
    for (std::size_t c = 0; c < v.size(); ++c) CHECK(std::abs(got[c] - v[c]) < 1e-9);
    const auto best = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    agree += svm_predict(m, q) == m.classes[best];
  }
  CHECK(agree >= 0.99 * n);
}

TEST_CASE("permuting the training order does not change predictions") {
  std::vector<Sample> x;
  std::vector<int> y;
  noisy(90, 68, x, y);
  std::vector<std::size_t> perm(x.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[40]);
  std::vector<Sample> xp;
  std::vector<int> yp;
  for (std::size_t i : perm) {
    xp.push_back(x[i]);
    yp.push_back(y[i]);
  }
  const SvmModel a = svm_train(x, y, 1.0, 0.5);
  const SvmModel b = svm_train(xp, yp, 1.0, 0.5);
  std::vector<Sample> test;
  std::vector<int> ty;
  noisy(200, 69, test, ty);
  int differ = 0;
  for (const auto& q : test) differ += svm_predict(a, q) != svm_predict(b, q);
  CHECK(differ == 0);
}

TEST_CASE("ties go to the lower class") {
  SvmModel m;
  m.dim = 1;
  m.classes = {2, 5};
  m.machines = {BinarySvm{2, 0.0, {}, {}, 0.0}, BinarySvm{5, 0.0, {}, {}, 0.0}};
  CHECK(svm_predict(m, {1.0}) == 2);
}

TEST_CASE("model JSON round-trip") {
  std::vector<Sample> x;
  std::vector<int> y;
  blobs(10, 70, x, y);
  const SvmModel m = svm_train(x, y, 10.0, 0.25);
  const SvmModel back = nlohmann::json(m).get<SvmModel>();
  CHECK(back.classes == m.classes);
  for (const auto& q : x) CHECK(svm_decision_values(back, q) == svm_decision_values(m, q));
}

TEST_CASE("stratified folds are seed-deterministic and balanced") {
  std::vector<int> y;
  for (int i = 0; i < 23; ++i) y.push_back(i % 3);
  const auto a = stratified_folds(y, 4, 11);
  CHECK(a == stratified_folds(y, 4, 11));
  CHECK(a != stratified_folds(y, 4, 12));
  for (int c = 0; c < 3; ++c) {
    std::map<std::size_t, int> per_fold;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] == c) ++per_fold[a[i]];
    }
    int lo = 1 << 30, hi = 0;
    for (std::size_t f = 0; f < 4; ++f) {
      lo = std::min(lo, per_fold[f]);
      hi = std::max(hi, per_fold[f]);
    }
    CHECK(hi - lo <= 1);
  }
  CHECK_THROWS_AS(stratified_folds({0, 0, 1}, 2, 1), ValidationError);
}

TEST_CASE("cross-validation") {
  std::vector<Sample> x;
  std::vector<int> y;
  blobs(20, 71, x, y);
  const CvResult one = svm_cross_validate(x, y, {3.0}, {0.7}, 4, 1);
  CHECK(one.C == 3.0);
  CHECK(one.gamma == 0.7);
  CHECK(one.grid.size() == 1);
  CHECK_THROWS_AS(svm_cross_validate(x, y, {}, {0.7}, 4, 1), ConfigError);

  const CvResult cv = svm_cross_validate(x, y, default_c_grid(), default_gamma_grid(), 5, 2);
  CHECK(cv.grid.size() == 4 * 9);
  CHECK(cv.accuracy == 1.0);
  const SvmModel m = svm_train(x, y, cv.C, cv.gamma);
  std::vector<Sample> test;
  std::vector<int> ty;
  blobs(30, 72, test, ty);
  int right = 0;
  for (std::size_t i = 0; i < test.size(); ++i) right += svm_predict(m, test[i]) == ty[i];
  CHECK(right == static_cast<int>(test.size()));
  // Ties prefer the smallest C, then the smallest gamma.
  CHECK(cv.C == 0.1);
}

TEST_CASE("default grids") {
  CHECK(default_c_grid() == std::vector<double>{0.1, 1, 10, 100});
  const auto g = default_gamma_grid();
  REQUIRE(g.size() == 9);
  CHECK(g.front() == 1.0 / 64);
  CHECK(g.back() == 4.0);
}
