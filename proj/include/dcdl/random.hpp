#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace dcdl {

using Rng = std::mt19937_64;

// Independent stream derived from a seed and a (purpose, index) tag.
Rng derive_stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index);

double uniform01(Rng& rng);
double normal(Rng& rng, double mean, double stddev);

// log of a Gamma(shape, 1) draw; stable for shapes far below one.
double log_gamma_draw(Rng& rng, double shape);

// Gamma with shape/rate parameterization.
double gamma_draw(Rng& rng, double shape, double rate);

double beta_draw(Rng& rng, double a, double b);

// Index drawn with probability proportional to exp(log_weights[i]).
// Entries equal to -infinity are never drawn. Consumes exactly one uniform.
std::size_t categorical_from_log(Rng& rng, std::span<const double> log_weights);

std::string rng_state(const Rng& rng);
void set_rng_state(Rng& rng, const std::string& state);

}  // namespace dcdl
