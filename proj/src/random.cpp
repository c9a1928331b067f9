#include "dcdl/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dcdl/error.hpp"

namespace dcdl {

Rng derive_stream(std::uint64_t seed, std::uint64_t purpose,
                  std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

double uniform01(Rng& rng) {
  return std::generate_canonical<double, 53>(rng);
}

double normal(Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(rng);
}

double log_gamma_draw(Rng& rng, double shape) {
  if (!(shape > 0.0)) throw NumericalError("gamma shape must be positive");
  if (shape >= 1.0) {
    std::gamma_distribution<double> dist(shape, 1.0);
    return std::log(dist(rng));
  }
  // Gamma(a) = Gamma(a + 1) * U^(1/a)
  std::gamma_distribution<double> dist(shape + 1.0, 1.0);
  const double g = dist(rng);
  double u = uniform01(rng);
  if (u <= 0.0) u = std::numeric_limits<double>::min();
  return std::log(g) + std::log(u) / shape;
}

double gamma_draw(Rng& rng, double shape, double rate) {
  if (!(rate > 0.0)) throw NumericalError("gamma rate must be positive");
  return std::exp(log_gamma_draw(rng, shape) - std::log(rate));
}

double beta_draw(Rng& rng, double a, double b) {
  const double la = log_gamma_draw(rng, a);
  const double lb = log_gamma_draw(rng, b);
  return 1.0 / (1.0 + std::exp(lb - la));
}

std::size_t categorical_from_log(Rng& rng,
                                 std::span<const double> log_weights) {
  if (log_weights.empty()) throw DegenerateError("empty categorical");
  const double top = *std::max_element(log_weights.begin(), log_weights.end());
  if (!std::isfinite(top)) {
    throw DegenerateError("categorical has no finite weight");
  }
  double total = 0.0;
  for (double lw : log_weights) total += std::exp(lw - top);
  double u = uniform01(rng) * total;
  std::size_t last = 0;
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    if (log_weights[i] == -std::numeric_limits<double>::infinity()) continue;
    last = i;
    u -= std::exp(log_weights[i] - top);
    if (u < 0.0) return i;
  }
  return last;
}

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (is.fail()) throw FormatError("unreadable rng state");
}

}  // namespace dcdl
