#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace dcdl {

using Sample = std::vector<double>;

struct SvmOptions {
  // Stop when the maximal KKT violation m(alpha) - M(alpha) drops below this.
  double tolerance = 1e-3;
  std::size_t max_iterations = 10'000'000;
};

// Row-major n x n Gaussian kernel exp(-gamma * |a - b|^2).
std::vector<double> rbf_gram(const std::vector<Sample>& x, double gamma);

// Dual of a binary C-SVM with labels y in {-1, +1}:
//   min 0.5 a'Qa - sum a,  0 <= a <= C,  y'a = 0,  Q_ij = y_i y_j K_ij.
// Decision value f(x) = sum_i a_i y_i K(x_i, x) + bias.
struct BinarySolution {
  std::vector<double> alpha;
  double bias = 0.0;
  double kkt_residual = 0.0;
  std::size_t iterations = 0;
};

BinarySolution solve_binary(const std::vector<double>& gram,
                            const std::vector<double>& y, double C,
                            const SvmOptions& options = {});

// max over I_up of -y G minus min over I_low of -y G, clamped at 0.
double kkt_residual(const std::vector<double>& gram,
                    const std::vector<double>& y,
                    const std::vector<double>& alpha, double C);

struct BinarySvm {
  int label = 0;  // positive class of this one-vs-all machine
  double bias = 0.0;
  std::vector<double> coef;  // alpha_i * y_i per support vector
  std::vector<Sample> support;
  double kkt_residual = 0.0;
};

struct SvmModel {
  double C = 1.0;
  double gamma = 1.0;
  std::size_t dim = 0;
  std::vector<int> classes;  // ascending
  std::vector<BinarySvm> machines;  // one per class; empty for one class
};

void to_json(nlohmann::json& j, const SvmModel& m);
void from_json(const nlohmann::json& j, SvmModel& m);

// One-vs-all training. Throws DegenerateError with fewer than two classes.
SvmModel svm_train(const std::vector<Sample>& x, const std::vector<int>& y,
                   double C, double gamma, const SvmOptions& options = {});

// Per-class decision values in model.classes order.
std::vector<double> svm_decision_values(const SvmModel& model,
                                        const Sample& x);

// Argmax of the decision values; ties go to the lower class id.
int svm_predict(const SvmModel& model, const Sample& x);

// fold_of[i] in [0, folds): each class is shuffled with the seed and dealt
// round-robin, so fold sizes per class differ by at most one.
std::vector<std::size_t> stratified_folds(const std::vector<int>& y,
                                          std::size_t folds,
                                          std::uint64_t seed);

struct CvCell {
  double C = 0.0;
  double gamma = 0.0;
  double accuracy = 0.0;  // mean held-out accuracy over folds
};

struct CvResult {
  double C = 0.0;
  double gamma = 0.0;
  double accuracy = 0.0;
  std::vector<CvCell> grid;
};

std::vector<double> default_c_grid();
std::vector<double> default_gamma_grid();

// Grid search maximizing mean held-out accuracy; ties go to smaller C, then
// smaller gamma.
CvResult svm_cross_validate(const std::vector<Sample>& x,
                            const std::vector<int>& y,
                            std::vector<double> c_grid,
                            std::vector<double> gamma_grid,
                            std::size_t folds, std::uint64_t seed,
                            const SvmOptions& options = {});

}  // namespace dcdl
