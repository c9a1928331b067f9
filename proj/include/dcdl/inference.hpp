#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dcdl/config.hpp"
#include "dcdl/model.hpp"
#include "dcdl/random.hpp"

namespace dcdl {

// One line of the per-sweep diagnostics log.
struct SweepRecord {
  std::string phase;  // "pretrain" or "refine"
  std::size_t layer = 1;  // 1-based layer whose residual is reported
  std::size_t sweep = 0;  // 1-based within the phase/layer
  std::size_t chain = 0;  // restart index when a layer runs several chains
  double residual_norm = 0.0;
  std::vector<std::size_t> active_blocks;  // per dictionary of the sampled layer
  double gamma_e = 0.0;
  std::vector<double> gamma_w;
  double log_score = 0.0;  // log posterior up to a config-fixed constant
};

void to_json(nlohmann::json& j, const SweepRecord& r);

using DiagnosticsSink = std::function<void(const SweepRecord&)>;

struct ChainOptions {
  bool update_dictionaries = true;
  bool update_hyper = true;
  // Exhaustive at-most-one and residual-cache checks after every sweep.
  bool debug_checks = false;
  // Separates the rng streams of independent chains built from one seed.
  std::uint64_t stream_tag = 0;
  // Copied into every SweepRecord.
  std::size_t chain_index = 0;
  DiagnosticsSink sink;
};

// Conditional distribution of one pooling block (or one top-layer pixel)
// given everything else. log_weights[0] is the all-zero state and
// log_weights[p] the block active at 1-based position p (-inf on padding).
struct BlockConditional {
  std::vector<double> log_weights;
  std::vector<double> means;
  std::vector<double> variances;
};

enum class Phase { pretrain, refine };

// Gibbs sampler over a fixed image set.
//
// Pretraining works on one layer at a time: the layer input is the image
// (layer 0) or the pooled MAP activations of the layer below, and the layer
// has its own Gaussian residual. Refinement samples the top-down model: the
// top-layer (Z, W), every lower layer's pooling positions, all dictionaries,
// and the data-layer noise. Intermediate activations are unpooled copies of
// the synthesized plane above; only the data layer has a residual.
//
// Each image owns an rng stream; dictionary and hyperparameter updates draw
// from one global stream. All streams derive from config.rng_seed.
class SamplerChain {
 public:
  SamplerChain(ModelConfig config, DictionarySet dicts, Hyperstate hyper,
               std::vector<Plane> images, ChainOptions options = {});
  ~SamplerChain();
  SamplerChain(SamplerChain&&) noexcept;
  SamplerChain& operator=(SamplerChain&&) noexcept;

  const ModelConfig& config() const noexcept { return config_; }
  const std::vector<LayerGeometry>& geometry() const noexcept { return geo_; }
  const DictionarySet& dictionaries() const noexcept { return dicts_; }
  const Hyperstate& hyper() const noexcept { return hyper_; }
  Phase phase() const noexcept { return phase_; }
  std::size_t active_layer() const noexcept { return layer_; }
  std::size_t image_count() const noexcept { return images_.size(); }
  const std::vector<LayerState>& states(std::size_t image) const;
  const Volume& layer_input(std::size_t image, std::size_t layer) const;
  // Pretraining: residual of `layer`. Refinement: only layer 0 is defined.
  const Volume& residual(std::size_t image, std::size_t layer) const;
  const std::vector<SweepRecord>& trace() const noexcept { return trace_; }
  Rng& global_rng() noexcept { return global_rng_; }

  // Test and resimulation hooks. Each rebuilds the affected caches.
  void set_image(std::size_t image, Plane pixels);
  void set_layer_state(std::size_t image, LayerState state);
  void set_hyper(Hyperstate hyper);
  void set_dictionaries(DictionarySet dicts);
  // Likelihood tempering: conditionals see the noise precision scaled by
  // beta in (0, 1]. Hyperparameter draws are untempered.
  void set_temperature(double beta);
  double temperature() const noexcept { return beta_; }

  // --- pretraining ---------------------------------------------------------
  // Makes `layer` (0-based) active. Its input is the image or the pooled
  // activations of layer - 1. With init_hyper, gamma_e starts at the inverse
  // input variance, gamma_w at 1 and pi at its prior mean.
  void begin_pretrain_layer(std::size_t layer, bool init_hyper = true);
  void pretrain_sweep();
  // Replaces the last sample with its conditional-mode polish: repeated
  // block-wise argmax passes (weights set to their posterior means) until no
  // block changes.
  void polish_to_mode(std::size_t max_passes = 5);
  // Greedy search over one-pixel filter shifts (activations translated the
  // other way, refitted to their mode) keeping any that raise log_score.
  // Deterministic; used by polish_to_mode when dictionaries are learned.
  void align_dictionaries();

  // --- refinement ----------------------------------------------------------
  // Switches to the top-down model, keeping the current top-layer
  // activations and the pooling positions of lower layers. Blocks without a
  // position get one drawn uniformly.
  void begin_refine();
  void refine_sweep();

  // --- conditionals --------------------------------------------------------
  BlockConditional block_conditional(std::size_t image, std::size_t layer,
                                     std::size_t dict, std::size_t block_row,
                                     std::size_t block_col);
  void sample_block_zw(std::size_t image, std::size_t layer, std::size_t dict,
                       std::size_t block_row, std::size_t block_col);
  // Refinement only; `channel` indexes the dictionaries of `layer`.
  std::vector<double> pool_position_log_weights(std::size_t image,
                                                std::size_t layer,
                                                std::size_t channel,
                                                std::size_t block_row,
                                                std::size_t block_col);
  void sample_pool_position(std::size_t image, std::size_t layer,
                            std::size_t channel, std::size_t block_row,
                            std::size_t block_col);
  void sample_dictionary(std::size_t layer, std::size_t dict);
  // Pretraining layer only: (mean, precision) of one filter pixel given
  // everything else.
  std::pair<double, double> dictionary_pixel_conditional(
      std::size_t layer, std::size_t dict, std::size_t channel,
      std::size_t row, std::size_t col) const;
  // Pretraining only: joint one-pixel shift of a filter and its activations,
  // accepted or rejected by Metropolis-Hastings. Returns true if accepted.
  bool shift_dictionary(std::size_t layer, std::size_t dict);
  void sample_hyper();

  // --- diagnostics ---------------------------------------------------------
  double residual_norm() const;
  double log_score() const;
  // Largest absolute difference between the cached and recomputed residuals
  // (and, in refinement, cached intermediate planes).
  double max_cache_drift() const;
  // Throws InvariantViolation on any at-most-one or cache violation.
  void check_invariants(double tolerance = 1e-8) const;

 private:
  struct ImageData;
  class Footprint;

  void rebuild_caches();
  void rebuild_pretrain(ImageData& img) const;
  void rebuild_topdown(ImageData& img) const;
  void refresh_norms();
  void record_sweep();

  void local_block(ImageData& img, std::size_t l, std::size_t k,
                   std::size_t br, std::size_t bc, bool sample);
  void top_pixel(ImageData& img, std::size_t k, std::size_t i, std::size_t j,
                 bool sample);
  BlockConditional local_conditional(ImageData& img, std::size_t l,
                                     std::size_t k, std::size_t br,
                                     std::size_t bc);
  BlockConditional top_conditional(ImageData& img, std::size_t k,
                                   std::size_t i, std::size_t j);
  std::vector<double> position_log_weights(ImageData& img, std::size_t l,
                                           std::size_t c, std::size_t br,
                                           std::size_t bc);
  void position_block(ImageData& img, std::size_t l, std::size_t c,
                      std::size_t br, std::size_t bc);

  void local_dictionary(std::size_t l, std::size_t k, bool sample = true);
  struct ShiftProposal {
    DictionaryElement dict;
    std::vector<Plane> maps;
    std::vector<Volume> residuals;
    double change = 0.0;  // summed squared-residual difference
  };
  std::optional<ShiftProposal> propose_shift(std::size_t l, std::size_t k,
                                             long dy, long dx,
                                             bool drop_edges = false) const;
  void apply_shift(std::size_t l, std::size_t k, ShiftProposal&& p);
  void deep_dictionary(std::size_t l, std::size_t k);

  void apply_delta(ImageData& img, std::size_t l, std::size_t k, std::size_t i,
                   std::size_t j, double delta) const;
  void add_footprint(const ImageData& img, std::size_t l, std::size_t k,
                     std::size_t i, std::size_t j, double scale,
                     Footprint& out) const;

  // Data-layer precision in refinement, layer precision in pretraining.
  double noise_precision(std::size_t l) const;

  ModelConfig config_;
  std::vector<LayerGeometry> geo_;
  DictionarySet dicts_;
  Hyperstate hyper_;
  std::vector<Plane> images_;
  ChainOptions options_;
  Phase phase_ = Phase::pretrain;
  std::size_t layer_ = 0;
  std::size_t sweep_ = 0;
  std::vector<ImageData> data_;
  std::vector<std::vector<double>> dict_norm2_;
  std::vector<SweepRecord> trace_;
  Rng global_rng_;
  double beta_ = 1.0;
};

// Configuration, dictionaries and hyperparameters: everything a checkpoint
// stores besides the rng state.
struct TrainedModel {
  ModelConfig config;
  DictionarySet dicts;
  Hyperstate hyper;
};

struct FitResult {
  TrainedModel model;
  std::vector<std::vector<LayerState>> states;  // [image][layer]
  std::vector<SweepRecord> trace;
  std::string rng_state;  // global stream after the run
};

// Bottom-up layer-wise pretraining from prior dictionary draws. Each layer
// runs config.gibbs.chains independent chains (own dictionary draws and rng
// streams) and keeps the one with the highest log score after polishing.
FitResult pretrain(const std::vector<Plane>& images, const ModelConfig& config,
                   const ChainOptions& options = {});

// Top-down joint refinement starting from a pretraining result.
FitResult refine(const FitResult& pretrained, const std::vector<Plane>& images,
                 const ChainOptions& options = {});

// Layer-wise inference of one image's latent states under fixed
// dictionaries and hyperparameters. Each layer runs `sweeps` Gibbs sweeps;
// the best-scoring sample of the last `mode_window` sweeps is polished to
// its conditional mode and pooled into the next layer.
std::vector<LayerState> infer_states(const Plane& image,
                                     const TrainedModel& model,
                                     std::size_t sweeps,
                                     std::uint64_t seed,
                                     std::size_t mode_window = 10);

}  // namespace dcdl
