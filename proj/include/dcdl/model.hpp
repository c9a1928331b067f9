#pragma once

#include <cstddef>
#include <vector>

#include "dcdl/config.hpp"
#include "dcdl/plane.hpp"
#include "dcdl/random.hpp"

namespace dcdl {

// One convolutional filter D^(k,l). Layers above the first see a stack of
// K_{l-1} pooled planes, so their filters carry one plane per input channel.
struct DictionaryElement {
  std::size_t layer = 1;  // 1-based
  std::size_t index = 1;  // 1-based
  Volume filter;

  double squared_norm() const;
};

// dicts[l][k], both 0-based.
using DictionarySet = std::vector<std::vector<DictionaryElement>>;

// Precisions and activation rates. gamma_e[l] is the residual precision at
// layer l during pretraining; refinement only uses gamma_e[0], the data
// layer. pi[l][k] is the block-activation probability of dictionary k.
struct Hyperstate {
  std::vector<double> gamma_e;
  std::vector<double> gamma_w;
  std::vector<std::vector<double>> pi;

  // Generation tolerates pi of exactly 0 or 1 (closed_pi); samplers do not.
  void validate(const ModelConfig& config, bool closed_pi = false) const;
};

// Latent state of one image at one layer. activations[k] is S = Z .* W with
// Z = (S != 0). positions[k] holds the pooling indicator per block and is
// empty on the top layer, which has no pooling.
struct LayerState {
  std::size_t image = 0;
  std::size_t layer = 1;  // 1-based
  std::vector<Plane> activations;
  std::vector<PositionGrid> positions;

  Plane support(std::size_t k) const;
  std::size_t active_count() const;
};

// Zero state with the shapes implied by the geometry.
LayerState empty_layer_state(const LayerGeometry& g, std::size_t image,
                             std::size_t layer);

// Throws ValidationError (or InvariantViolation) when shapes are off, a
// block holds two non-zeros, or positions disagree with the support.
void validate_layer_state(const LayerState& s, const LayerGeometry& g);

// Beta prior parameters for pi[l][k]: (a0/K, b0(K-1)/K), with the second
// argument taken as b0 when K = 1 so the prior stays proper.
std::pair<double, double> activation_prior(const Priors& p, std::size_t K);

// Prior variance of every dictionary pixel at a layer: 1/(rows*cols).
double dictionary_prior_variance(const LayerGeometry& g);

DictionarySet sample_prior_dictionaries(const ModelConfig& config, Rng& rng);
Hyperstate sample_prior_hyperstate(const ModelConfig& config, Rng& rng);

void validate_dictionaries(const DictionarySet& dicts,
                           const ModelConfig& config);

// sum_k conv2d_full(D^(k,l)[c], S^(k,l)) for each input channel c.
Volume synthesize_layer(const std::vector<Plane>& activations,
                        const std::vector<DictionaryElement>& dicts,
                        const LayerGeometry& g);

struct GeneratedSample {
  Plane image;
  std::vector<LayerState> states;  // one per layer, bottom first
};

// Ancestral draw from the top layer down to the data plane; noise is added
// only at the data layer.
GeneratedSample generate(const ModelConfig& config, const DictionarySet& dicts,
                         const Hyperstate& hyper, Rng& rng);

// Noise-free top-down reconstruction from the top-layer activations and the
// pooling positions of every lower layer.
Plane synthesize(const std::vector<LayerState>& states,
                 const DictionarySet& dicts, const ModelConfig& config);

// log p(image, states, dicts | hyper) for the top-down model, including all
// normalizing constants.
double log_joint(const Plane& image, const std::vector<LayerState>& states,
                 const DictionarySet& dicts, const Hyperstate& hyper,
                 const ModelConfig& config);

// Single-layer score used by pretraining: Gaussian residual at precision
// gamma_e[l] plus block prior and weight prior terms. Dictionary prior
// excluded.
double layer_log_likelihood(const Volume& input, const LayerState& state,
                            const std::vector<DictionaryElement>& dicts,
                            const Hyperstate& hyper, const ModelConfig& config,
                            std::size_t layer);

}  // namespace dcdl
