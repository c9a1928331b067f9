#include "dcdl/svm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "dcdl/error.hpp"
#include "dcdl/random.hpp"

namespace dcdl {

namespace {

constexpr double kTau = 1e-12;
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::uint64_t kFoldStream = 5;

double squared_distance(const Sample& a, const Sample& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::vector<double> squared_distances(const std::vector<Sample>& x) {
  const std::size_t n = x.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      d[i * n + j] = d[j * n + i] = squared_distance(x[i], x[j]);
    }
  }
  return d;
}

void check_samples(const std::vector<Sample>& x, const std::vector<int>& y) {
  if (x.size() != y.size()) {
    throw ValidationError("sample and label counts differ");
  }
  if (x.empty()) throw DegenerateError("no training samples");
  for (const auto& s : x) {
    if (s.size() != x.front().size()) {
      throw ValidationError("samples have different lengths");
    }
    for (double v : s) {
      if (!std::isfinite(v)) throw ValidationError("non-finite sample value");
    }
  }
}

void check_hyper(double C, double gamma) {
  if (!(C > 0.0) || !std::isfinite(C)) throw ConfigError("C must be positive");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) {
    throw ConfigError("gamma must be positive");
  }
}

bool in_up(double y, double a, double C) { return y > 0 ? a < C : a > 0.0; }
bool in_low(double y, double a, double C) { return y > 0 ? a > 0.0 : a < C; }

// One-vs-all machines over rows `idx` of a full kernel matrix of stride n.
SvmModel train_subset(const std::vector<Sample>& x, const std::vector<int>& y,
                      const std::vector<double>& gram_full, std::size_t n,
                      const std::vector<std::size_t>& idx, double C,
                      double gamma, const SvmOptions& options) {
  SvmModel m;
  m.C = C;
  m.gamma = gamma;
  m.dim = x.front().size();
  for (std::size_t i : idx) m.classes.push_back(y[i]);
  std::sort(m.classes.begin(), m.classes.end());
  m.classes.erase(std::unique(m.classes.begin(), m.classes.end()),
                  m.classes.end());
  if (m.classes.size() < 2) {
    throw DegenerateError("training needs at least two classes");
  }
  const std::size_t k = idx.size();
  std::vector<double> gram(k * k);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      gram[a * k + b] = gram_full[idx[a] * n + idx[b]];
    }
  }
  std::vector<double> yy(k);
  for (int c : m.classes) {
    for (std::size_t a = 0; a < k; ++a) yy[a] = y[idx[a]] == c ? 1.0 : -1.0;
    const BinarySolution sol = solve_binary(gram, yy, C, options);
    BinarySvm machine;
    machine.label = c;
    machine.bias = sol.bias;
    machine.kkt_residual = sol.kkt_residual;
    for (std::size_t a = 0; a < k; ++a) {
      if (sol.alpha[a] > 0.0) {
        machine.coef.push_back(sol.alpha[a] * yy[a]);
        machine.support.push_back(x[idx[a]]);
      }
    }
    m.machines.push_back(std::move(machine));
  }
  return m;
}

}  // namespace

std::vector<double> rbf_gram(const std::vector<Sample>& x, double gamma) {
  std::vector<double> k = squared_distances(x);
  for (double& v : k) v = std::exp(-gamma * v);
  return k;
}

BinarySolution solve_binary(const std::vector<double>& gram,
                            const std::vector<double>& y, double C,
                            const SvmOptions& options) {
  const std::size_t n = y.size();
  if (gram.size() != n * n) throw DimensionError("kernel matrix size mismatch");
  if (!(C > 0.0)) throw ConfigError("C must be positive");
  bool pos = false, neg = false;
  for (double v : y) {
    if (v != 1.0 && v != -1.0) throw ValidationError("labels must be +1 or -1");
    (v > 0 ? pos : neg) = true;
  }
  if (!pos || !neg) throw DegenerateError("binary problem has one class only");

  BinarySolution sol;
  auto& alpha = sol.alpha;
  alpha.assign(n, 0.0);
  std::vector<double> grad(n, -1.0);
  auto K = [&](std::size_t i, std::size_t j) { return gram[i * n + j]; };

  for (;;) {
    // Working set: maximal violator i, then j by second-order gain.
    double gmax = -kInf;
    std::size_t i = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (in_up(y[t], alpha[t], C) && -y[t] * grad[t] > gmax) {
        gmax = -y[t] * grad[t];
        i = t;
      }
    }
    double gmin = kInf;
    double best_gain = kInf;
    std::size_t j = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (!in_low(y[t], alpha[t], C)) continue;
      const double v = -y[t] * grad[t];
      gmin = std::min(gmin, v);
      if (i == n || v >= gmax) continue;
      const double b = gmax - v;
      double a = K(i, i) + K(t, t) - 2.0 * K(i, t);
      if (a <= 0.0) a = kTau;
      const double gain = -(b * b) / a;
      if (gain < best_gain) {
        best_gain = gain;
        j = t;
      }
    }
    if (i == n || j == n || gmax - gmin < options.tolerance) break;
    if (sol.iterations++ >= options.max_iterations) {
      throw NumericalError("SMO did not converge within " +
                           std::to_string(options.max_iterations) +
                           " iterations");
    }

    const double Qij = y[i] * y[j] * K(i, j);
    const double old_i = alpha[i];
    const double old_j = alpha[j];
    double ai = old_i;
    double aj = old_j;
    if (y[i] != y[j]) {
      double quad = K(i, i) + K(j, j) + 2.0 * Qij;
      if (quad <= 0.0) quad = kTau;
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = ai - aj;
      ai += delta;
      aj += delta;
      if (diff > 0.0) {
        if (aj < 0.0) { aj = 0.0; ai = diff; }
      } else {
        if (ai < 0.0) { ai = 0.0; aj = -diff; }
      }
      if (diff > 0.0) {
        if (ai > C) { ai = C; aj = C - diff; }
      } else {
        if (aj > C) { aj = C; ai = C + diff; }
      }
    } else {
      double quad = K(i, i) + K(j, j) - 2.0 * Qij;
      if (quad <= 0.0) quad = kTau;
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = ai + aj;
      ai -= delta;
      aj += delta;
      if (sum > C) {
        if (ai > C) { ai = C; aj = sum - C; }
      } else {
        if (aj < 0.0) { aj = 0.0; ai = sum; }
      }
      if (sum > C) {
        if (aj > C) { aj = C; ai = sum - C; }
      } else {
        if (ai < 0.0) { ai = 0.0; aj = sum; }
      }
    }
    alpha[i] = ai;
    alpha[j] = aj;
    const double di = ai - old_i;
    const double dj = aj - old_j;
    for (std::size_t t = 0; t < n; ++t) {
      grad[t] += y[t] * (y[i] * K(t, i) * di + y[j] * K(t, j) * dj);
    }
  }

  // Bias from free vectors, else the midpoint of the feasible interval.
  double ub = kInf, lb = -kInf, sum_free = 0.0;
  std::size_t free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (alpha[t] >= C) {
      if (y[t] < 0) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else if (alpha[t] <= 0.0) {
      if (y[t] > 0) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else {
      ++free;
      sum_free += yg;
    }
  }
  const double rho = free ? sum_free / static_cast<double>(free)
                          : 0.5 * (ub + lb);
  sol.bias = -rho;
  sol.kkt_residual = kkt_residual(gram, y, alpha, C);
  return sol;
}

double kkt_residual(const std::vector<double>& gram,
                    const std::vector<double>& y,
                    const std::vector<double>& alpha, double C) {
  const std::size_t n = y.size();
  double m = -kInf, M = kInf;
  for (std::size_t t = 0; t < n; ++t) {
    double g = -1.0;
    for (std::size_t s = 0; s < n; ++s) {
      g += y[t] * y[s] * gram[t * n + s] * alpha[s];
    }
    const double v = -y[t] * g;
    if (in_up(y[t], alpha[t], C)) m = std::max(m, v);
    if (in_low(y[t], alpha[t], C)) M = std::min(M, v);
  }
  if (!std::isfinite(m) || !std::isfinite(M)) return 0.0;
  return std::max(0.0, m - M);
}

SvmModel svm_train(const std::vector<Sample>& x, const std::vector<int>& y,
                   double C, double gamma, const SvmOptions& options) {
  check_samples(x, y);
  check_hyper(C, gamma);
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return train_subset(x, y, rbf_gram(x, gamma), x.size(), idx, C, gamma,
                      options);
}

std::vector<double> svm_decision_values(const SvmModel& model,
                                        const Sample& x) {
  if (x.size() != model.dim) {
    throw ValidationError("feature length " + std::to_string(x.size()) +
                          " does not match model length " +
                          std::to_string(model.dim));
  }
  std::vector<double> out;
  out.reserve(model.machines.size());
  for (const auto& m : model.machines) {
    double f = m.bias;
    for (std::size_t s = 0; s < m.support.size(); ++s) {
      f += m.coef[s] * std::exp(-model.gamma * squared_distance(m.support[s], x));
    }
    out.push_back(f);
  }
  return out;
}

int svm_predict(const SvmModel& model, const Sample& x) {
  if (model.classes.empty()) throw ValidationError("model has no classes");
  if (model.classes.size() == 1) {
    if (x.size() != model.dim) {
      throw ValidationError("feature length does not match model");
    }
    return model.classes.front();
  }
  const auto f = svm_decision_values(model, x);
  std::size_t best = 0;
  for (std::size_t c = 1; c < f.size(); ++c) {
    if (f[c] > f[best]) best = c;
  }
  return model.classes[best];
}

std::vector<std::size_t> stratified_folds(const std::vector<int>& y,
                                          std::size_t folds,
                                          std::uint64_t seed) {
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
  std::vector<std::size_t> fold_of(y.size(), 0);
  Rng rng = derive_stream(seed, kFoldStream, 0);
  for (auto& [label, members] : by_class) {
    if (members.size() < folds) {
      throw ValidationError("class " + std::to_string(label) + " has " +
                            std::to_string(members.size()) +
                            " examples, fewer than " + std::to_string(folds) +
                            " folds");
    }
    for (std::size_t i = members.size(); i > 1; --i) {
      const auto r = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
      std::swap(members[i - 1], members[std::min(r, i - 1)]);
    }
    for (std::size_t i = 0; i < members.size(); ++i) {
      fold_of[members[i]] = i % folds;
    }
  }
  return fold_of;
}

std::vector<double> default_c_grid() { return {0.1, 1.0, 10.0, 100.0}; }

std::vector<double> default_gamma_grid() {
  std::vector<double> g;
  for (int e = -6; e <= 2; ++e) g.push_back(std::ldexp(1.0, e));
  return g;
}

CvResult svm_cross_validate(const std::vector<Sample>& x,
                            const std::vector<int>& y,
                            std::vector<double> c_grid,
                            std::vector<double> gamma_grid, std::size_t folds,
                            std::uint64_t seed, const SvmOptions& options) {
  if (c_grid.empty() || gamma_grid.empty()) {
    throw ConfigError("cross-validation grid is empty");
  }
  check_samples(x, y);
  for (double C : c_grid) check_hyper(C, 1.0);
  for (double g : gamma_grid) check_hyper(1.0, g);
  std::sort(c_grid.begin(), c_grid.end());
  std::sort(gamma_grid.begin(), gamma_grid.end());
  const auto fold_of = stratified_folds(y, folds, seed);
  const std::size_t n = x.size();
  const std::vector<double> d2 = squared_distances(x);

  // accuracy[ci][gi]
  std::vector<std::vector<double>> acc(c_grid.size(),
                                       std::vector<double>(gamma_grid.size()));
  std::vector<double> gram(n * n);
  for (std::size_t gi = 0; gi < gamma_grid.size(); ++gi) {
    const double gamma = gamma_grid[gi];
    for (std::size_t t = 0; t < gram.size(); ++t) gram[t] = std::exp(-gamma * d2[t]);
    for (std::size_t f = 0; f < folds; ++f) {
      std::vector<std::size_t> train, test;
      for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? test : train).push_back(i);
      for (std::size_t ci = 0; ci < c_grid.size(); ++ci) {
        const SvmModel m = train_subset(x, y, gram, n, train, c_grid[ci],
                                        gamma, options);
        std::size_t hits = 0;
        for (std::size_t i : test) hits += svm_predict(m, x[i]) == y[i];
        acc[ci][gi] += static_cast<double>(hits) /
                       static_cast<double>(test.size()) /
                       static_cast<double>(folds);
      }
    }
  }

  CvResult out;
  out.accuracy = -1.0;
  for (std::size_t ci = 0; ci < c_grid.size(); ++ci) {
    for (std::size_t gi = 0; gi < gamma_grid.size(); ++gi) {
      out.grid.push_back({c_grid[ci], gamma_grid[gi], acc[ci][gi]});
      if (acc[ci][gi] > out.accuracy) {
        out.accuracy = acc[ci][gi];
        out.C = c_grid[ci];
        out.gamma = gamma_grid[gi];
      }
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const SvmModel& m) {
  nlohmann::json machines = nlohmann::json::array();
  for (const auto& b : m.machines) {
    machines.push_back({{"label", b.label},
                        {"bias", b.bias},
                        {"kkt_residual", b.kkt_residual},
                        {"coef", b.coef},
                        {"support", b.support}});
  }
  j = {{"C", m.C},
       {"gamma", m.gamma},
       {"dim", m.dim},
       {"classes", m.classes},
       {"machines", machines}};
}

void from_json(const nlohmann::json& j, SvmModel& m) {
  m.C = j.at("C").get<double>();
  m.gamma = j.at("gamma").get<double>();
  m.dim = j.at("dim").get<std::size_t>();
  m.classes = j.at("classes").get<std::vector<int>>();
  m.machines.clear();
  for (const auto& b : j.at("machines")) {
    BinarySvm s;
    s.label = b.at("label").get<int>();
    s.bias = b.at("bias").get<double>();
    s.kkt_residual = b.value("kkt_residual", 0.0);
    s.coef = b.at("coef").get<std::vector<double>>();
    s.support = b.at("support").get<std::vector<Sample>>();
    if (s.coef.size() != s.support.size()) {
      throw FormatError("svm machine coefficient/support count mismatch");
    }
    for (const auto& v : s.support) {
      if (v.size() != m.dim) throw FormatError("support vector length mismatch");
    }
    m.machines.push_back(std::move(s));
  }
  if (m.classes.size() > 1 && m.machines.size() != m.classes.size()) {
    throw FormatError("svm model needs one machine per class");
  }
}

}  // namespace dcdl
