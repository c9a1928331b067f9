#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dcdl/pooling.hpp"

namespace dcdl {

struct LayerSpec {
  std::size_t num_dicts = 8;
  std::size_t dict_rows = 5;
  std::size_t dict_cols = 5;
  // Pool for the transition to the layer above; ignored on the top layer.
  std::size_t pool_rows = 2;
  std::size_t pool_cols = 2;
};

// Beta-Bernoulli (a0, b0), weight precision Gamma(c0, d0), noise precision
// Gamma(e0, f0). Gamma priors use the shape/rate convention.
struct Priors {
  double a0 = 1.0;
  double b0 = 1.0;
  double c0 = 1e-6;
  double d0 = 1e-6;
  double e0 = 1e-6;
  double f0 = 1e-6;
};

struct GibbsSettings {
  std::size_t pretrain_sweeps = 100;
  std::size_t refine_sweeps = 50;
  std::size_t burn_in = 20;
  // Independent pretraining chains per layer; the best-scoring one is kept.
  std::size_t chains = 1;
  // Likelihood tempering over the first fraction of pretraining sweeps,
  // rising log-linearly from 0.01 to 1. Zero disables it.
  double anneal_fraction = 0.5;
  // Greedy dictionary alignment every this many pretraining sweeps, stopping
  // two periods before the end. Zero disables it.
  std::size_t align_every = 25;
};

struct ModelConfig {
  std::size_t image_rows = 28;
  std::size_t image_cols = 28;
  std::vector<LayerSpec> layers{LayerSpec{}};
  Priors priors;
  GibbsSettings gibbs;
  std::uint64_t rng_seed = 0;

  std::size_t num_layers() const noexcept { return layers.size(); }

  // Throws ConfigError on any invariant violation.
  void validate() const;
};

// Shapes of one layer derived from a ModelConfig. Layer inputs have
// `channels` planes of input_rows x input_cols; activation maps are
// act_rows x act_cols (valid placements of a dict_rows x dict_cols filter).
// The top layer uses 1x1 blocks, i.e. independent per-pixel activations.
struct LayerGeometry {
  std::size_t channels = 1;
  std::size_t input_rows = 0;
  std::size_t input_cols = 0;
  std::size_t num_dicts = 0;
  std::size_t dict_rows = 0;
  std::size_t dict_cols = 0;
  std::size_t act_rows = 0;
  std::size_t act_cols = 0;
  bool top = false;
  BlockGrid blocks;
};

std::vector<LayerGeometry> layer_geometry(const ModelConfig& config);

void to_json(nlohmann::json& j, const LayerSpec& s);
void from_json(const nlohmann::json& j, LayerSpec& s);
void to_json(nlohmann::json& j, const Priors& p);
void from_json(const nlohmann::json& j, Priors& p);
void to_json(nlohmann::json& j, const GibbsSettings& g);
void from_json(const nlohmann::json& j, GibbsSettings& g);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace dcdl
