#include "dcdl/inference.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <limits>
#include <string>

#include <nlohmann/json.hpp>

#include "dcdl/error.hpp"
#include "dcdl/pooling.hpp"
#include "dcdl/tensor_ops.hpp"

namespace dcdl {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kMinPrecision = 1e-8;
constexpr double kMaxPrecision = 1e12;
constexpr double kMinPi = 1e-10;

enum StreamPurpose : std::uint64_t {
  kImageStream = 1,
  kGlobalStream = 2,
  kInitStream = 3,
};

double clamp_precision(double v) {
  if (std::isnan(v)) throw NumericalError("precision draw is NaN");
  return std::clamp(v, kMinPrecision, kMaxPrecision);
}

double clamp_pi(double v) {
  if (std::isnan(v)) throw NumericalError("activation probability is NaN");
  return std::clamp(v, kMinPi, 1.0 - kMinPi);
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(
      std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

void require_precision(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw NumericalError(std::string(what) + " must be positive and finite");
  }
}

constexpr long kShiftSteps[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};

struct ActiveEntry {
  std::size_t row;
  std::size_t col;
  double value;
};

std::vector<ActiveEntry> active_entries(const Plane& s) {
  std::vector<ActiveEntry> out;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (s(i, j) != 0.0) out.push_back({i, j, s(i, j)});
    }
  }
  return out;
}

double gaussian_term(double precision, double sq_residual, double count) {
  return 0.5 * count * (std::log(precision) - kLog2Pi) -
         0.5 * precision * sq_residual;
}

double dictionary_log_prior(const std::vector<DictionaryElement>& dicts,
                            const LayerGeometry& g) {
  const double prec = 1.0 / dictionary_prior_variance(g);
  double total = 0.0;
  for (const auto& d : dicts) {
    const double count = static_cast<double>(g.channels * g.dict_rows *
                                             g.dict_cols);
    total += gaussian_term(prec, d.squared_norm(), count);
  }
  return total;
}

}  // namespace

void to_json(nlohmann::json& j, const SweepRecord& r) {
  j = {{"phase", r.phase},
       {"layer", r.layer},
       {"sweep", r.sweep},
       {"chain", r.chain},
       {"residual_norm", r.residual_norm},
       {"active_blocks", r.active_blocks},
       {"gamma_e", r.gamma_e},
       {"gamma_w", r.gamma_w},
       {"log_score", r.log_score}};
}

struct SamplerChain::ImageData {
  std::vector<LayerState> states;
  std::vector<Volume> inputs;
  std::vector<Volume> residuals;
  // Refinement: pooling position of every block below the top layer, kept
  // even while the parent value is zero.
  std::vector<std::vector<PositionGrid>> latent;
  Rng rng;
};

// Dense accumulator for the data-layer image of a sparse set of
// activations, tracking the touched bounding box.
class SamplerChain::Footprint {
 public:
  Footprint(std::size_t rows, std::size_t cols) : plane_(rows, cols) {
    reset_box();
  }

  void add(const Plane& kernel, std::size_t r, std::size_t c, double scale) {
    add_placed(plane_, kernel, r, c, scale);
    r0_ = std::min(r0_, r);
    c0_ = std::min(c0_, c);
    r1_ = std::max(r1_, r + kernel.rows());
    c1_ = std::max(c1_, c + kernel.cols());
  }

  double dot(const Plane& x) const {
    double acc = 0.0;
    for (std::size_t r = r0_; r < r1_; ++r) {
      const double* a = plane_.row(r);
      const double* b = x.row(r);
      for (std::size_t c = c0_; c < c1_; ++c) acc += a[c] * b[c];
    }
    return acc;
  }

  double norm2() const {
    double acc = 0.0;
    for (std::size_t r = r0_; r < r1_; ++r) {
      const double* a = plane_.row(r);
      for (std::size_t c = c0_; c < c1_; ++c) acc += a[c] * a[c];
    }
    return acc;
  }

  void clear() {
    for (std::size_t r = r0_; r < r1_; ++r) {
      double* a = plane_.row(r);
      std::fill(a + c0_, a + c1_, 0.0);
    }
    reset_box();
  }

 private:
  void reset_box() {
    r0_ = plane_.rows();
    c0_ = plane_.cols();
    r1_ = 0;
    c1_ = 0;
  }

  Plane plane_;
  std::size_t r0_, c0_, r1_, c1_;
};

namespace {

// Scratch accumulator shared by the conditionals of one thread.
thread_local std::vector<double> log_weight_scratch;

}  // namespace

SamplerChain::SamplerChain(ModelConfig config, DictionarySet dicts,
                           Hyperstate hyper, std::vector<Plane> images,
                           ChainOptions options)
    : config_(std::move(config)),
      geo_(layer_geometry(config_)),
      dicts_(std::move(dicts)),
      hyper_(std::move(hyper)),
      images_(std::move(images)),
      options_(std::move(options)),
      global_rng_(derive_stream(config_.rng_seed,
                                kGlobalStream + 16 * options_.stream_tag, 0)) {
  validate_dictionaries(dicts_, config_);
  hyper_.validate(config_);
  if (images_.empty()) throw ConfigError("image set is empty");
  data_.resize(images_.size());
  const std::size_t L = geo_.size();
  for (std::size_t n = 0; n < images_.size(); ++n) {
    const Plane& x = images_[n];
    if (x.rows() != config_.image_rows || x.cols() != config_.image_cols) {
      throw DimensionError("image " + std::to_string(n) + " is " +
                           std::to_string(x.rows()) + "x" +
                           std::to_string(x.cols()) + ", config expects " +
                           std::to_string(config_.image_rows) + "x" +
                           std::to_string(config_.image_cols));
    }
    ensure_finite(x, "input image");
    ImageData& img = data_[n];
    img.rng = derive_stream(config_.rng_seed,
                            kImageStream + 16 * options_.stream_tag, n);
    img.inputs.resize(L);
    img.residuals.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
      img.states.push_back(empty_layer_state(geo_[l], n, l + 1));
    }
  }
  begin_pretrain_layer(0, false);
}

SamplerChain::~SamplerChain() = default;
SamplerChain::SamplerChain(SamplerChain&&) noexcept = default;
SamplerChain& SamplerChain::operator=(SamplerChain&&) noexcept = default;

const std::vector<LayerState>& SamplerChain::states(std::size_t image) const {
  return data_.at(image).states;
}

const Volume& SamplerChain::layer_input(std::size_t image,
                                        std::size_t layer) const {
  return data_.at(image).inputs.at(layer);
}

const Volume& SamplerChain::residual(std::size_t image,
                                     std::size_t layer) const {
  if (phase_ == Phase::refine && layer != 0) {
    throw ValidationError("refinement keeps a residual only at layer 1");
  }
  if (phase_ == Phase::pretrain && layer != layer_) {
    throw ValidationError("residual requested for an inactive layer");
  }
  return data_.at(image).residuals.at(layer);
}

void SamplerChain::set_image(std::size_t image, Plane pixels) {
  if (!pixels.same_shape(images_.at(image))) {
    throw DimensionError("replacement image has the wrong shape");
  }
  ensure_finite(pixels, "input image");
  images_[image] = std::move(pixels);
  if (phase_ == Phase::pretrain) {
    rebuild_pretrain(data_[image]);
  } else {
    rebuild_topdown(data_[image]);
  }
}

void SamplerChain::set_layer_state(std::size_t image, LayerState state) {
  const std::size_t l = state.layer - 1;
  if (l >= geo_.size()) throw ValidationError("layer index out of range");
  state.image = image;
  validate_layer_state(state, geo_[l]);
  ImageData& img = data_.at(image);
  img.states[l] = std::move(state);
  if (phase_ == Phase::pretrain) {
    rebuild_pretrain(img);
  } else {
    if (l + 1 < geo_.size()) {
      for (std::size_t k = 0; k < geo_[l].num_dicts; ++k) {
        const auto& pos = img.states[l].positions[k];
        auto& latent = img.latent[l][k];
        for (std::size_t b = 0; b < pos.size(); ++b) {
          if (pos.values()[b] != 0) latent.values()[b] = pos.values()[b];
        }
      }
    }
    rebuild_topdown(img);
  }
}

void SamplerChain::set_hyper(Hyperstate hyper) {
  hyper.validate(config_);
  hyper_ = std::move(hyper);
}

void SamplerChain::set_dictionaries(DictionarySet dicts) {
  validate_dictionaries(dicts, config_);
  dicts_ = std::move(dicts);
  rebuild_caches();
}

double SamplerChain::noise_precision(std::size_t l) const {
  return beta_ * (phase_ == Phase::refine ? hyper_.gamma_e[0] : hyper_.gamma_e[l]);
}

void SamplerChain::set_temperature(double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) {
    throw ValidationError("tempering factor must lie in (0, 1]");
  }
  beta_ = beta;
}

void SamplerChain::refresh_norms() {
  dict_norm2_.assign(geo_.size(), {});
  for (std::size_t l = 0; l < geo_.size(); ++l) {
    for (const auto& d : dicts_[l]) dict_norm2_[l].push_back(d.squared_norm());
  }
}

void SamplerChain::rebuild_caches() {
  refresh_norms();
  for (auto& img : data_) {
    if (phase_ == Phase::pretrain) {
      rebuild_pretrain(img);
    } else {
      rebuild_topdown(img);
    }
  }
}

void SamplerChain::rebuild_pretrain(ImageData& img) const {
  const std::size_t l = layer_;
  const std::size_t n = img.states[0].image;
  if (l == 0) {
    img.inputs[0] = Volume{images_[n]};
  } else {
    const auto& below = img.states[l - 1];
    Volume in;
    for (std::size_t k = 0; k < geo_[l - 1].num_dicts; ++k) {
      in.push_back(pool_max(below.activations[k], geo_[l - 1].blocks).values);
    }
    img.inputs[l] = std::move(in);
  }
  const Volume recon =
      synthesize_layer(img.states[l].activations, dicts_[l], geo_[l]);
  Volume r = img.inputs[l];
  for (std::size_t c = 0; c < r.size(); ++c) {
    auto rv = r[c].values();
    const auto sv = recon[c].values();
    for (std::size_t i = 0; i < rv.size(); ++i) rv[i] -= sv[i];
  }
  img.residuals[l] = std::move(r);
}

void SamplerChain::rebuild_topdown(ImageData& img) const {
  const std::size_t L = geo_.size();
  const std::size_t n = img.states[0].image;
  img.inputs[0] = Volume{images_[n]};
  for (std::size_t l = L - 1; l >= 1; --l) {
    img.inputs[l] =
        synthesize_layer(img.states[l].activations, dicts_[l], geo_[l]);
    const LayerGeometry& below = geo_[l - 1];
    LayerState& st = img.states[l - 1];
    for (std::size_t k = 0; k < below.num_dicts; ++k) {
      Plane& s = st.activations[k];
      s.fill(0.0);
      PositionGrid& pos = st.positions[k];
      pos.fill(0);
      const Plane& parent = img.inputs[l][k];
      for (std::size_t br = 0; br < below.blocks.rows(); ++br) {
        for (std::size_t bc = 0; bc < below.blocks.cols(); ++bc) {
          const double v = parent(br, bc);
          if (v == 0.0) continue;
          const int p = img.latent[l - 1][k](br, bc);
          const auto cell = below.blocks.cell(br, bc, p);
          s(cell->first, cell->second) = v;
          pos(br, bc) = p;
        }
      }
    }
  }
  const Volume recon =
      synthesize_layer(img.states[0].activations, dicts_[0], geo_[0]);
  Plane r = images_[n];
  auto rv = r.values();
  const auto sv = recon[0].values();
  for (std::size_t i = 0; i < rv.size(); ++i) rv[i] -= sv[i];
  img.residuals[0] = Volume{std::move(r)};
}

// --- pretraining ---------------------------------------------------------

void SamplerChain::begin_pretrain_layer(std::size_t layer, bool init_hyper) {
  if (layer >= geo_.size()) throw ValidationError("layer index out of range");
  if (phase_ == Phase::refine) {
    throw ValidationError("cannot return to pretraining after refinement");
  }
  layer_ = layer;
  sweep_ = 0;
  for (auto& img : data_) {
    img.states[layer] =
        empty_layer_state(geo_[layer], img.states[0].image, layer + 1);
  }
  rebuild_caches();
  if (!init_hyper) return;

  double sum = 0.0;
  double sum2 = 0.0;
  double count = 0.0;
  for (const auto& img : data_) {
    for (const auto& p : img.inputs[layer]) {
      for (double v : p.values()) {
        sum += v;
        sum2 += v * v;
        count += 1.0;
      }
    }
  }
  const double mean = sum / count;
  const double var = sum2 / count - mean * mean;
  hyper_.gamma_e[layer] = var > 0.0 ? clamp_precision(1.0 / var) : 1.0;
  hyper_.gamma_w[layer] = 1.0;
  const auto [a, b] =
      activation_prior(config_.priors, geo_[layer].num_dicts);
  for (double& p : hyper_.pi[layer]) p = clamp_pi(a / (a + b));
}

void SamplerChain::pretrain_sweep() {
  if (phase_ != Phase::pretrain) {
    throw ValidationError("pretrain_sweep called during refinement");
  }
  const LayerGeometry& g = geo_[layer_];
  for (auto& img : data_) {
    for (std::size_t k = 0; k < g.num_dicts; ++k) {
      for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
        for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
          local_block(img, layer_, k, br, bc, true);
        }
      }
    }
  }
  if (options_.update_dictionaries) {
    for (std::size_t k = 0; k < g.num_dicts; ++k) {
      local_dictionary(layer_, k);
      shift_dictionary(layer_, k);
    }
  }
  if (options_.update_hyper) sample_hyper();
  if (options_.debug_checks) check_invariants();
  rebuild_caches();
  ++sweep_;
  record_sweep();
}

void SamplerChain::align_dictionaries() {
  if (phase_ != Phase::pretrain) {
    throw ValidationError("alignment applies to pretraining");
  }
  const LayerGeometry& g = geo_[layer_];
  // Mode of dictionary k and its activations for the current alignment.
  auto fitted = [&](std::size_t k) {
    for (int pass = 0; pass < 2; ++pass) {
      for (auto& img : data_) {
        for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
          for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
            local_block(img, layer_, k, br, bc, false);
          }
        }
      }
      local_dictionary(layer_, k, false);
    }
    return log_score();
  };
  for (std::size_t k = 0; k < g.num_dicts; ++k) {
    double current = fitted(k);
    for (std::size_t step = 0; step < g.dict_rows + g.dict_cols; ++step) {
      const DictionaryElement keep_dict = dicts_[layer_][k];
      std::vector<LayerState> keep_states;
      std::vector<Volume> keep_res;
      for (const auto& img : data_) {
        keep_states.push_back(img.states[layer_]);
        keep_res.push_back(img.residuals[layer_]);
      }
      auto restore = [&] {
        dicts_[layer_][k] = keep_dict;
        dict_norm2_[layer_][k] = keep_dict.squared_norm();
        for (std::size_t n = 0; n < data_.size(); ++n) {
          data_[n].states[layer_] = keep_states[n];
          data_[n].residuals[layer_] = keep_res[n];
        }
      };
      std::optional<std::size_t> best;
      double best_score = current;
      for (std::size_t dir = 0; dir < 4; ++dir) {
        auto p = propose_shift(layer_, k, kShiftSteps[dir][0],
                               kShiftSteps[dir][1], true);
        if (!p) continue;
        apply_shift(layer_, k, std::move(*p));
        const double score = fitted(k);
        if (score > best_score) {
          best_score = score;
          best = dir;
        }
        restore();
      }
      if (!best) break;
      apply_shift(layer_, k, *propose_shift(layer_, k, kShiftSteps[*best][0],
                                            kShiftSteps[*best][1], true));
      current = fitted(k);
    }
  }
  rebuild_caches();
}

void SamplerChain::polish_to_mode(std::size_t max_passes) {
  if (phase_ != Phase::pretrain) {
    throw ValidationError("mode polishing applies to pretraining states");
  }
  const LayerGeometry& g = geo_[layer_];
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool changed = false;
    for (auto& img : data_) {
      for (std::size_t k = 0; k < g.num_dicts; ++k) {
        const Plane before = img.states[layer_].activations[k];
        for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
          for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
            local_block(img, layer_, k, br, bc, false);
          }
        }
        // Weight updates alone converge geometrically; count only
        // support changes as progress.
        const Plane& after = img.states[layer_].activations[k];
        for (std::size_t i = 0; i < before.size() && !changed; ++i) {
          changed = (before.values()[i] != 0.0) != (after.values()[i] != 0.0);
        }
      }
    }
    if (!changed) break;
  }
  rebuild_caches();
}

// --- block conditionals ----------------------------------------------------

BlockConditional SamplerChain::local_conditional(ImageData& img,
                                                 std::size_t l, std::size_t k,
                                                 std::size_t br,
                                                 std::size_t bc) {
  const LayerGeometry& g = geo_[l];
  const DictionaryElement& d = dicts_[l][k];
  const double ge = noise_precision(l);
  const double gw = hyper_.gamma_w[l];
  const double pi = hyper_.pi[l][k];
  require_precision(ge, "noise precision");
  require_precision(gw, "weight precision");
  const double var = 1.0 / (gw + ge * dict_norm2_[l][k]);
  const std::size_t bs = g.blocks.block_size();
  const double log_on =
      std::log(pi) -
      std::log(static_cast<double>(g.blocks.valid_count(br, bc))) +
      0.5 * std::log(gw * var);

  BlockConditional out;
  out.log_weights.assign(bs + 1, kNegInf);
  out.means.assign(bs + 1, 0.0);
  out.variances.assign(bs + 1, var);
  out.log_weights[0] = std::log1p(-pi);
  const Volume& r = img.residuals[l];
  for (std::size_t p = 1; p <= bs; ++p) {
    const auto cell = g.blocks.cell(br, bc, static_cast<int>(p));
    if (!cell) continue;
    double rho = 0.0;
    for (std::size_t c = 0; c < g.channels; ++c) {
      rho += placed_inner(d.filter[c], r[c], cell->first, cell->second);
    }
    const double mean = var * ge * rho;
    out.means[p] = mean;
    out.log_weights[p] = log_on + 0.5 * mean * mean / var;
  }
  return out;
}

namespace {

struct LocalCell {
  bool active = false;
  std::size_t row = 0;
  std::size_t col = 0;
  double value = 0.0;
};

LocalCell find_active(const LayerState& st, const LayerGeometry& g,
                      std::size_t k, std::size_t br, std::size_t bc) {
  LocalCell out;
  if (g.top) {
    out.row = br;
    out.col = bc;
    out.value = st.activations[k](br, bc);
    out.active = out.value != 0.0;
    return out;
  }
  const int p = st.positions[k](br, bc);
  if (p == 0) return out;
  const auto cell = g.blocks.cell(br, bc, p);
  out.active = true;
  out.row = cell->first;
  out.col = cell->second;
  out.value = st.activations[k](out.row, out.col);
  return out;
}

void place_local(LayerState& st, Volume& residual, const LayerGeometry& g,
                 const DictionaryElement& d, std::size_t k, std::size_t row,
                 std::size_t col, double w) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    add_placed(residual[c], d.filter[c], row, col, -w);
  }
  st.activations[k](row, col) = w;
  if (!g.top) st.positions[k](row / g.blocks.pool_rows(),
                              col / g.blocks.pool_cols()) =
      w != 0.0 ? g.blocks.position_of(row, col) : 0;
}

void remove_local(LayerState& st, Volume& residual, const LayerGeometry& g,
                  const DictionaryElement& d, std::size_t k,
                  const LocalCell& cell) {
  if (!cell.active) return;
  for (std::size_t c = 0; c < g.channels; ++c) {
    add_placed(residual[c], d.filter[c], cell.row, cell.col, cell.value);
  }
  st.activations[k](cell.row, cell.col) = 0.0;
  if (!g.top) {
    st.positions[k](cell.row / g.blocks.pool_rows(),
                    cell.col / g.blocks.pool_cols()) = 0;
  }
}

}  // namespace

void SamplerChain::local_block(ImageData& img, std::size_t l, std::size_t k,
                               std::size_t br, std::size_t bc, bool sample) {
  const LayerGeometry& g = geo_[l];
  LayerState& st = img.states[l];
  const DictionaryElement& d = dicts_[l][k];
  const LocalCell current = find_active(st, g, k, br, bc);
  remove_local(st, img.residuals[l], g, d, k, current);
  const BlockConditional cond = local_conditional(img, l, k, br, bc);
  const std::size_t pick = sample ? categorical_from_log(img.rng, cond.log_weights)
                                  : argmax(cond.log_weights);
  if (pick == 0) return;
  const double w = sample ? normal(img.rng, cond.means[pick],
                                   std::sqrt(cond.variances[pick]))
                          : cond.means[pick];
  if (w == 0.0) return;
  const auto cell = g.blocks.cell(br, bc, static_cast<int>(pick));
  place_local(st, img.residuals[l], g, d, k, cell->first, cell->second, w);
}

void SamplerChain::apply_delta(ImageData& img, std::size_t l, std::size_t k,
                               std::size_t i, std::size_t j,
                               double delta) const {
  const LayerGeometry& g = geo_[l];
  LayerState& st = img.states[l];
  double& s = st.activations[k](i, j);
  s += delta;
  if (!g.top) {
    const std::size_t br = i / g.blocks.pool_rows();
    const std::size_t bc = j / g.blocks.pool_cols();
    st.positions[k](br, bc) = s != 0.0 ? img.latent[l][k](br, bc) : 0;
  }
  const DictionaryElement& d = dicts_[l][k];
  if (l == 0) {
    add_placed(img.residuals[0][0], d.filter[0], i, j, -delta);
    return;
  }
  const LayerGeometry& below = geo_[l - 1];
  for (std::size_t c = 0; c < g.channels; ++c) {
    const Plane& f = d.filter[c];
    Plane& x = img.inputs[l][c];
    for (std::size_t u = 0; u < f.rows(); ++u) {
      for (std::size_t v = 0; v < f.cols(); ++v) {
        const double dx = delta * f(u, v);
        if (dx == 0.0) continue;
        const std::size_t a = i + u;
        const std::size_t b = j + v;
        x(a, b) += dx;
        const auto cell = below.blocks.cell(a, b, img.latent[l - 1][c](a, b));
        apply_delta(img, l - 1, c, cell->first, cell->second, dx);
      }
    }
  }
}

void SamplerChain::add_footprint(const ImageData& img, std::size_t l,
                                 std::size_t k, std::size_t i, std::size_t j,
                                 double scale, Footprint& out) const {
  const DictionaryElement& d = dicts_[l][k];
  if (l == 0) {
    out.add(d.filter[0], i, j, scale);
    return;
  }
  const LayerGeometry& g = geo_[l];
  const LayerGeometry& below = geo_[l - 1];
  for (std::size_t c = 0; c < g.channels; ++c) {
    const Plane& f = d.filter[c];
    for (std::size_t u = 0; u < f.rows(); ++u) {
      for (std::size_t v = 0; v < f.cols(); ++v) {
        const double dx = scale * f(u, v);
        if (dx == 0.0) continue;
        const std::size_t a = i + u;
        const std::size_t b = j + v;
        const auto cell = below.blocks.cell(a, b, img.latent[l - 1][c](a, b));
        add_footprint(img, l - 1, c, cell->first, cell->second, dx, out);
      }
    }
  }
}

BlockConditional SamplerChain::top_conditional(ImageData& img, std::size_t k,
                                               std::size_t i, std::size_t j) {
  const std::size_t l = geo_.size() - 1;
  const double ge = noise_precision(0);
  const double gw = hyper_.gamma_w[l];
  const double pi = hyper_.pi[l][k];
  require_precision(ge, "noise precision");
  require_precision(gw, "weight precision");
  Footprint fp(config_.image_rows, config_.image_cols);
  add_footprint(img, l, k, i, j, 1.0, fp);
  const double rho = fp.dot(img.residuals[0][0]);
  const double g2 = fp.norm2();
  const double var = 1.0 / (gw + ge * g2);
  const double mean = var * ge * rho;
  BlockConditional out;
  out.log_weights = {std::log1p(-pi),
                     std::log(pi) + 0.5 * std::log(gw * var) +
                         0.5 * mean * mean / var};
  out.means = {0.0, mean};
  out.variances = {var, var};
  return out;
}

void SamplerChain::top_pixel(ImageData& img, std::size_t k, std::size_t i,
                             std::size_t j, bool sample) {
  const std::size_t l = geo_.size() - 1;
  Plane& s = img.states[l].activations[k];
  if (const double old = s(i, j); old != 0.0) {
    apply_delta(img, l, k, i, j, -old);
    s(i, j) = 0.0;
  }
  const BlockConditional cond = top_conditional(img, k, i, j);
  const std::size_t pick = sample ? categorical_from_log(img.rng, cond.log_weights)
                                  : argmax(cond.log_weights);
  if (pick == 0) return;
  const double w = sample ? normal(img.rng, cond.means[1],
                                   std::sqrt(cond.variances[1]))
                          : cond.means[1];
  if (w != 0.0) apply_delta(img, l, k, i, j, w);
}

BlockConditional SamplerChain::block_conditional(std::size_t image,
                                                 std::size_t layer,
                                                 std::size_t dict,
                                                 std::size_t block_row,
                                                 std::size_t block_col) {
  ImageData& img = data_.at(image);
  const std::size_t L = geo_.size();
  const bool local = phase_ == Phase::pretrain || L == 1;
  if (local) {
    if (phase_ == Phase::pretrain && layer != layer_) {
      throw ValidationError("block conditional requested off the active layer");
    }
    const LayerGeometry& g = geo_[layer];
    LayerState& st = img.states[layer];
    const DictionaryElement& d = dicts_[layer][dict];
    const LocalCell current = find_active(st, g, dict, block_row, block_col);
    remove_local(st, img.residuals[layer], g, d, dict, current);
    BlockConditional out =
        local_conditional(img, layer, dict, block_row, block_col);
    if (current.active) {
      place_local(st, img.residuals[layer], g, d, dict, current.row,
                  current.col, current.value);
    }
    return out;
  }
  if (layer != L - 1) {
    throw ValidationError(
        "refinement samples (Z, W) only on the top layer; lower layers "
        "resample pooling positions");
  }
  Plane& s = img.states[layer].activations[dict];
  const double old = s(block_row, block_col);
  if (old != 0.0) {
    apply_delta(img, layer, dict, block_row, block_col, -old);
    s(block_row, block_col) = 0.0;
  }
  BlockConditional out = top_conditional(img, dict, block_row, block_col);
  if (old != 0.0) apply_delta(img, layer, dict, block_row, block_col, old);
  return out;
}

void SamplerChain::sample_block_zw(std::size_t image, std::size_t layer,
                                   std::size_t dict, std::size_t block_row,
                                   std::size_t block_col) {
  ImageData& img = data_.at(image);
  const std::size_t L = geo_.size();
  if (phase_ == Phase::pretrain || L == 1) {
    if (phase_ == Phase::pretrain && layer != layer_) {
      throw ValidationError("block update requested off the active layer");
    }
    local_block(img, layer, dict, block_row, block_col, true);
    return;
  }
  if (layer != L - 1) {
    throw ValidationError("refinement samples (Z, W) only on the top layer");
  }
  top_pixel(img, dict, block_row, block_col, true);
}

// --- pooling positions (refinement) ----------------------------------------

std::vector<double> SamplerChain::position_log_weights(ImageData& img,
                                                       std::size_t l,
                                                       std::size_t c,
                                                       std::size_t br,
                                                       std::size_t bc) {
  const LayerGeometry& g = geo_[l];
  const double v = img.inputs[l + 1][c](br, bc);
  const double ge = noise_precision(0);
  const std::size_t bs = g.blocks.block_size();
  std::vector<double> lw(bs + 1, kNegInf);
  const Plane& r = img.residuals[0][0];
  Footprint fp(config_.image_rows, config_.image_cols);
  for (std::size_t p = 1; p <= bs; ++p) {
    const auto cell = g.blocks.cell(br, bc, static_cast<int>(p));
    if (!cell) continue;
    if (v == 0.0) {
      lw[p] = 0.0;
      continue;
    }
    double rho;
    double g2;
    if (l == 0) {
      rho = placed_inner(dicts_[0][c].filter[0], r, cell->first, cell->second);
      g2 = dict_norm2_[0][c];
    } else {
      fp.clear();
      add_footprint(img, l, c, cell->first, cell->second, 1.0, fp);
      rho = fp.dot(r);
      g2 = fp.norm2();
    }
    lw[p] = ge * (v * rho - 0.5 * v * v * g2);
  }
  return lw;
}

void SamplerChain::position_block(ImageData& img, std::size_t l,
                                  std::size_t c, std::size_t br,
                                  std::size_t bc) {
  const LayerGeometry& g = geo_[l];
  const double v = img.inputs[l + 1][c](br, bc);
  int& latent = img.latent[l][c](br, bc);
  if (v != 0.0) {
    const auto cell = g.blocks.cell(br, bc, latent);
    apply_delta(img, l, c, cell->first, cell->second, -v);
    img.states[l].activations[c](cell->first, cell->second) = 0.0;
    img.states[l].positions[c](br, bc) = 0;
  }
  const auto lw = position_log_weights(img, l, c, br, bc);
  latent = static_cast<int>(categorical_from_log(img.rng, lw));
  if (v != 0.0) {
    const auto cell = g.blocks.cell(br, bc, latent);
    apply_delta(img, l, c, cell->first, cell->second, v);
  }
}

std::vector<double> SamplerChain::pool_position_log_weights(
    std::size_t image, std::size_t layer, std::size_t channel,
    std::size_t block_row, std::size_t block_col) {
  if (phase_ != Phase::refine || layer + 1 >= geo_.size()) {
    throw ValidationError(
        "pool positions are sampled during refinement below the top layer");
  }
  ImageData& img = data_.at(image);
  const double v = img.inputs[layer + 1][channel](block_row, block_col);
  const int latent = img.latent[layer][channel](block_row, block_col);
  const auto cell = geo_[layer].blocks.cell(block_row, block_col, latent);
  if (v != 0.0) apply_delta(img, layer, channel, cell->first, cell->second, -v);
  auto lw = position_log_weights(img, layer, channel, block_row, block_col);
  if (v != 0.0) apply_delta(img, layer, channel, cell->first, cell->second, v);
  return lw;
}

void SamplerChain::sample_pool_position(std::size_t image, std::size_t layer,
                                        std::size_t channel,
                                        std::size_t block_row,
                                        std::size_t block_col) {
  if (phase_ != Phase::refine || layer + 1 >= geo_.size()) {
    throw ValidationError(
        "pool positions are sampled during refinement below the top layer");
  }
  position_block(data_.at(image), layer, channel, block_row, block_col);
}

// --- dictionaries ----------------------------------------------------------

void SamplerChain::local_dictionary(std::size_t l, std::size_t k, bool sample) {
  const LayerGeometry& g = geo_[l];
  DictionaryElement& d = dicts_[l][k];
  const double prior_prec = 1.0 / dictionary_prior_variance(g);
  const double ge = noise_precision(l);
  require_precision(ge, "noise precision");

  std::vector<std::vector<ActiveEntry>> active;
  active.reserve(data_.size());
  double energy = 0.0;
  for (const auto& img : data_) {
    active.push_back(active_entries(img.states[l].activations[k]));
    for (const auto& e : active.back()) energy += e.value * e.value;
  }

  for (std::size_t c = 0; c < g.channels; ++c) {
    Plane& f = d.filter[c];
    for (std::size_t u = 0; u < g.dict_rows; ++u) {
      for (std::size_t v = 0; v < g.dict_cols; ++v) {
        double cross = 0.0;
        for (std::size_t n = 0; n < data_.size(); ++n) {
          const Plane& r = data_[n].residuals[l][c];
          for (const auto& e : active[n]) {
            cross += e.value * r(e.row + u, e.col + v);
          }
        }
        const double old = f(u, v);
        const double prec = prior_prec + ge * energy;
        const double mean = ge * (cross + old * energy) / prec;
        const double fresh =
            sample ? normal(global_rng_, mean, 1.0 / std::sqrt(prec)) : mean;
        const double delta = fresh - old;
        f(u, v) = fresh;
        if (delta == 0.0) continue;
        for (std::size_t n = 0; n < data_.size(); ++n) {
          Plane& r = data_[n].residuals[l][c];
          for (const auto& e : active[n]) {
            r(e.row + u, e.col + v) -= delta * e.value;
          }
        }
      }
    }
  }
  dict_norm2_[l][k] = d.squared_norm();
}

// Circular one-pixel shift of every channel of D^(k) with the activation
// map translated the opposite way, so the unwrapped part of each placement
// lands where it was. Activations pushed off the map are dropped if
// drop_edges, otherwise the proposal is empty; so is one that would put two
// activations in a pooling block.
std::optional<SamplerChain::ShiftProposal> SamplerChain::propose_shift(
    std::size_t l, std::size_t k, long dy, long dx, bool drop_edges) const {
  const LayerGeometry& g = geo_[l];
  const long rows = static_cast<long>(g.act_rows);
  const long cols = static_cast<long>(g.act_cols);
  const long dh = static_cast<long>(g.dict_rows);
  const long dw = static_cast<long>(g.dict_cols);
  const DictionaryElement& d = dicts_[l][k];
  ShiftProposal out;
  out.dict = d;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (long u = 0; u < dh; ++u) {
      for (long v = 0; v < dw; ++v) {
        out.dict.filter[c](static_cast<std::size_t>(u), static_cast<std::size_t>(v)) =
            d.filter[c](static_cast<std::size_t>((u + dy + dh) % dh),
                        static_cast<std::size_t>((v + dx + dw) % dw));
      }
    }
  }
  out.maps.reserve(data_.size());
  out.residuals.reserve(data_.size());
  for (const auto& img : data_) {
    const Plane& s = img.states[l].activations[k];
    Plane t(s.rows(), s.cols());
    Volume r = img.residuals[l];
    for (const auto& e : active_entries(s)) {
      const long i = static_cast<long>(e.row) + dy;
      const long j = static_cast<long>(e.col) + dx;
      if (i < 0 || j < 0 || i >= rows || j >= cols) {
        if (!drop_edges) return std::nullopt;
        for (std::size_t c = 0; c < g.channels; ++c) {
          add_placed(r[c], d.filter[c], e.row, e.col, e.value);
        }
        continue;
      }
      const auto ni = static_cast<std::size_t>(i);
      const auto nj = static_cast<std::size_t>(j);
      t(ni, nj) = e.value;
      for (std::size_t c = 0; c < g.channels; ++c) {
        add_placed(r[c], d.filter[c], e.row, e.col, e.value);
        add_placed(r[c], out.dict.filter[c], ni, nj, -e.value);
      }
    }
    if (!g.top && !at_most_one_per_block(t, g.blocks)) return std::nullopt;
    for (std::size_t c = 0; c < g.channels; ++c) {
      out.change += squared_norm(r[c]) - squared_norm(img.residuals[l][c]);
    }
    out.maps.push_back(std::move(t));
    out.residuals.push_back(std::move(r));
  }
  return out;
}

void SamplerChain::apply_shift(std::size_t l, std::size_t k, ShiftProposal&& p) {
  const LayerGeometry& g = geo_[l];
  dicts_[l][k] = std::move(p.dict);
  for (std::size_t n = 0; n < data_.size(); ++n) {
    LayerState& st = data_[n].states[l];
    if (!g.top) st.positions[k] = pool_max(p.maps[n], g.blocks).positions;
    st.activations[k] = std::move(p.maps[n]);
    data_[n].residuals[l] = std::move(p.residuals[n]);
  }
}

// Metropolis-Hastings: pixel-wise Gibbs cannot move a filter locked onto an
// off-centre copy of a pattern. The dictionary prior is invariant under
// pixel permutations and the activation prior under translation (same
// counts, uniform positions), and the direction is drawn uniformly, so the
// acceptance ratio is the likelihood ratio.
bool SamplerChain::shift_dictionary(std::size_t l, std::size_t k) {
  if (phase_ != Phase::pretrain) {
    throw ValidationError("shift moves apply to pretraining");
  }
  const auto dir = std::min<std::size_t>(
      3, static_cast<std::size_t>(uniform01(global_rng_) * 4.0));
  auto p = propose_shift(l, k, kShiftSteps[dir][0], kShiftSteps[dir][1]);
  if (!p) return false;
  const double log_ratio = -0.5 * noise_precision(l) * p->change;
  if (log_ratio < 0.0 && std::log(uniform01(global_rng_)) >= log_ratio) {
    return false;
  }
  apply_shift(l, k, std::move(*p));
  return true;
}

std::pair<double, double> SamplerChain::dictionary_pixel_conditional(
    std::size_t l, std::size_t k, std::size_t c, std::size_t u,
    std::size_t v) const {
  if (phase_ != Phase::pretrain || l != layer_) {
    throw ValidationError("pixel conditionals are defined for the pretraining layer");
  }
  const LayerGeometry& g = geo_[l];
  const Plane& f = dicts_.at(l).at(k).filter.at(c);
  if (u >= g.dict_rows || v >= g.dict_cols) throw RangeError("pixel out of range");
  const double ge = noise_precision(l);
  double cross = 0.0;
  double energy = 0.0;
  for (const auto& img : data_) {
    const Plane& r = img.residuals[l][c];
    for (const auto& e : active_entries(img.states[l].activations[k])) {
      cross += e.value * r(e.row + u, e.col + v);
      energy += e.value * e.value;
    }
  }
  const double prec = 1.0 / dictionary_prior_variance(g) + ge * energy;
  return {ge * (cross + f(u, v) * energy) / prec, prec};
}

void SamplerChain::deep_dictionary(std::size_t l, std::size_t k) {
  const LayerGeometry& g = geo_[l];
  const LayerGeometry& below = geo_[l - 1];
  DictionaryElement& d = dicts_[l][k];
  const double prior_prec = 1.0 / dictionary_prior_variance(g);
  const double ge = noise_precision(0);
  require_precision(ge, "noise precision");

  std::vector<std::vector<ActiveEntry>> active;
  active.reserve(data_.size());
  for (const auto& img : data_) {
    active.push_back(active_entries(img.states[l].activations[k]));
  }
  Footprint fp(config_.image_rows, config_.image_cols);

  for (std::size_t c = 0; c < g.channels; ++c) {
    Plane& f = d.filter[c];
    for (std::size_t u = 0; u < g.dict_rows; ++u) {
      for (std::size_t v = 0; v < g.dict_cols; ++v) {
        double cross = 0.0;
        double energy = 0.0;
        for (std::size_t n = 0; n < data_.size(); ++n) {
          if (active[n].empty()) continue;
          const ImageData& img = data_[n];
          fp.clear();
          for (const auto& e : active[n]) {
            const std::size_t a = e.row + u;
            const std::size_t b = e.col + v;
            const auto cell =
                below.blocks.cell(a, b, img.latent[l - 1][c](a, b));
            add_footprint(img, l - 1, c, cell->first, cell->second, e.value,
                          fp);
          }
          cross += fp.dot(img.residuals[0][0]);
          energy += fp.norm2();
        }
        const double old = f(u, v);
        const double prec = prior_prec + ge * energy;
        const double mean = ge * (cross + old * energy) / prec;
        const double fresh = normal(global_rng_, mean, 1.0 / std::sqrt(prec));
        const double delta = fresh - old;
        f(u, v) = fresh;
        if (delta == 0.0) continue;
        for (std::size_t n = 0; n < data_.size(); ++n) {
          ImageData& img = data_[n];
          for (const auto& e : active[n]) {
            const std::size_t a = e.row + u;
            const std::size_t b = e.col + v;
            const double dx = delta * e.value;
            img.inputs[l][c](a, b) += dx;
            const auto cell =
                below.blocks.cell(a, b, img.latent[l - 1][c](a, b));
            apply_delta(img, l - 1, c, cell->first, cell->second, dx);
          }
        }
      }
    }
  }
  dict_norm2_[l][k] = d.squared_norm();
}

void SamplerChain::sample_dictionary(std::size_t layer, std::size_t dict) {
  if (layer >= geo_.size() || dict >= geo_[layer].num_dicts) {
    throw ValidationError("dictionary index out of range");
  }
  if (phase_ == Phase::pretrain) {
    if (layer != layer_) {
      throw ValidationError("dictionary update requested off the active layer");
    }
    local_dictionary(layer, dict);
  } else if (layer == 0) {
    local_dictionary(0, dict);
  } else {
    deep_dictionary(layer, dict);
  }
}

// --- hyperparameters -------------------------------------------------------

void SamplerChain::sample_hyper() {
  const auto& pr = config_.priors;
  const std::size_t noise_layer = phase_ == Phase::refine ? 0 : layer_;
  const std::size_t act_layer =
      phase_ == Phase::refine ? geo_.size() - 1 : layer_;
  const LayerGeometry& g = geo_[act_layer];

  double pixels = 0.0;
  double sq = 0.0;
  for (const auto& img : data_) {
    for (const auto& p : img.residuals[noise_layer]) {
      pixels += static_cast<double>(p.size());
      sq += squared_norm(p);
    }
  }
  hyper_.gamma_e[noise_layer] =
      clamp_precision(gamma_draw(global_rng_, pr.e0 + 0.5 * pixels,
                                 pr.f0 + 0.5 * sq));

  std::vector<double> active(g.num_dicts, 0.0);
  double weight_sq = 0.0;
  for (const auto& img : data_) {
    const auto& st = img.states[act_layer];
    for (std::size_t k = 0; k < g.num_dicts; ++k) {
      for (double s : st.activations[k].values()) {
        if (s == 0.0) continue;
        active[k] += 1.0;
        weight_sq += s * s;
      }
    }
  }
  double total_active = 0.0;
  for (double a : active) total_active += a;
  hyper_.gamma_w[act_layer] = clamp_precision(gamma_draw(
      global_rng_, pr.c0 + 0.5 * total_active, pr.d0 + 0.5 * weight_sq));

  const auto [a, b] = activation_prior(pr, g.num_dicts);
  const double blocks =
      static_cast<double>(data_.size() * g.blocks.block_count());
  for (std::size_t k = 0; k < g.num_dicts; ++k) {
    hyper_.pi[act_layer][k] = clamp_pi(
        beta_draw(global_rng_, a + active[k], b + blocks - active[k]));
  }
}

// --- refinement --------------------------------------------------------------

void SamplerChain::begin_refine() {
  const std::size_t L = geo_.size();
  phase_ = Phase::refine;
  layer_ = 0;
  sweep_ = 0;
  for (auto& img : data_) {
    img.latent.assign(L > 0 ? L - 1 : 0, {});
    for (std::size_t l = 0; l + 1 < L; ++l) {
      const LayerGeometry& g = geo_[l];
      for (std::size_t k = 0; k < g.num_dicts; ++k) {
        PositionGrid latent = img.states[l].positions[k];
        for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
          for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
            if (latent(br, bc) != 0) continue;
            std::vector<double> lw(g.blocks.block_size(), kNegInf);
            for (std::size_t p = 0; p < lw.size(); ++p) {
              if (g.blocks.cell(br, bc, static_cast<int>(p + 1))) lw[p] = 0.0;
            }
            latent(br, bc) =
                static_cast<int>(categorical_from_log(img.rng, lw)) + 1;
          }
        }
        img.latent[l].push_back(std::move(latent));
      }
    }
  }
  rebuild_caches();
}

void SamplerChain::refine_sweep() {
  if (phase_ != Phase::refine) {
    throw ValidationError("refine_sweep called before begin_refine");
  }
  const std::size_t L = geo_.size();
  const LayerGeometry& top = geo_[L - 1];
  for (auto& img : data_) {
    if (L == 1) {
      for (std::size_t k = 0; k < top.num_dicts; ++k) {
        for (std::size_t br = 0; br < top.blocks.rows(); ++br) {
          for (std::size_t bc = 0; bc < top.blocks.cols(); ++bc) {
            local_block(img, 0, k, br, bc, true);
          }
        }
      }
      continue;
    }
    for (std::size_t k = 0; k < top.num_dicts; ++k) {
      for (std::size_t i = 0; i < top.act_rows; ++i) {
        for (std::size_t j = 0; j < top.act_cols; ++j) {
          top_pixel(img, k, i, j, true);
        }
      }
    }
    for (std::size_t l = L - 1; l-- > 0;) {
      const LayerGeometry& g = geo_[l];
      for (std::size_t c = 0; c < g.num_dicts; ++c) {
        for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
          for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
            position_block(img, l, c, br, bc);
          }
        }
      }
    }
  }
  if (options_.update_dictionaries) {
    for (std::size_t l = L; l-- > 0;) {
      for (std::size_t k = 0; k < geo_[l].num_dicts; ++k) {
        if (l == 0) {
          local_dictionary(0, k);
        } else {
          deep_dictionary(l, k);
        }
      }
    }
  }
  if (options_.update_hyper) sample_hyper();
  if (options_.debug_checks) check_invariants();
  rebuild_caches();
  ++sweep_;
  record_sweep();
}

// --- diagnostics -----------------------------------------------------------

double SamplerChain::residual_norm() const {
  const std::size_t l = phase_ == Phase::refine ? 0 : layer_;
  double sq = 0.0;
  for (const auto& img : data_) sq += squared_norm(img.residuals[l]);
  return std::sqrt(sq);
}

double SamplerChain::log_score() const {
  const std::size_t L = geo_.size();
  double total = 0.0;
  if (phase_ == Phase::pretrain) {
    const std::size_t l = layer_;
    const LayerGeometry& g = geo_[l];
    const double ge = hyper_.gamma_e[l];
    const double gw = hyper_.gamma_w[l];
    for (const auto& img : data_) {
      double pixels = 0.0;
      for (const auto& p : img.residuals[l]) pixels += static_cast<double>(p.size());
      total += gaussian_term(ge, squared_norm(img.residuals[l]), pixels);
      const LayerState& st = img.states[l];
      for (std::size_t k = 0; k < g.num_dicts; ++k) {
        const double pi = hyper_.pi[l][k];
        for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
          for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
            const LocalCell cell = find_active(st, g, k, br, bc);
            if (cell.active) {
              total += std::log(pi) -
                       std::log(static_cast<double>(
                           g.blocks.valid_count(br, bc))) +
                       gaussian_term(gw, cell.value * cell.value, 1.0);
            } else {
              total += std::log1p(-pi);
            }
          }
        }
      }
    }
    total += dictionary_log_prior(dicts_[l], g);
    return total;
  }

  const double ge = hyper_.gamma_e[0];
  const LayerGeometry& top = geo_[L - 1];
  for (const auto& img : data_) {
    total += gaussian_term(ge, squared_norm(img.residuals[0]),
                           static_cast<double>(img.residuals[0][0].size()));
    for (std::size_t k = 0; k < top.num_dicts; ++k) {
      const double pi = hyper_.pi[L - 1][k];
      for (double s : img.states[L - 1].activations[k].values()) {
        total += s != 0.0 ? std::log(pi) +
                                gaussian_term(hyper_.gamma_w[L - 1], s * s, 1.0)
                          : std::log1p(-pi);
      }
    }
    for (std::size_t l = 0; l + 1 < L; ++l) {
      const LayerGeometry& g = geo_[l];
      for (const auto& pos : img.states[l].positions) {
        for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
          for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
            if (pos(br, bc) != 0) {
              total -= std::log(
                  static_cast<double>(g.blocks.valid_count(br, bc)));
            }
          }
        }
      }
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    total += dictionary_log_prior(dicts_[l], geo_[l]);
  }
  return total;
}

double SamplerChain::max_cache_drift() const {
  double drift = 0.0;
  auto compare = [&drift](const Volume& a, const Volume& b) {
    for (std::size_t c = 0; c < a.size(); ++c) {
      const auto av = a[c].values();
      const auto bv = b[c].values();
      for (std::size_t i = 0; i < av.size(); ++i) {
        drift = std::max(drift, std::abs(av[i] - bv[i]));
      }
    }
  };
  for (const auto& img : data_) {
    ImageData fresh = img;
    if (phase_ == Phase::pretrain) {
      rebuild_pretrain(fresh);
      compare(fresh.residuals[layer_], img.residuals[layer_]);
    } else {
      rebuild_topdown(fresh);
      compare(fresh.residuals[0], img.residuals[0]);
      for (std::size_t l = 1; l < geo_.size(); ++l) {
        compare(fresh.inputs[l], img.inputs[l]);
        compare(fresh.states[l - 1].activations, img.states[l - 1].activations);
      }
    }
  }
  return drift;
}

void SamplerChain::check_invariants(double tolerance) const {
  for (const auto& img : data_) {
    for (std::size_t l = 0; l < geo_.size(); ++l) {
      validate_layer_state(img.states[l], geo_[l]);
    }
  }
  for (double g : hyper_.gamma_e) require_precision(g, "noise precision");
  for (double g : hyper_.gamma_w) require_precision(g, "weight precision");
  const double drift = max_cache_drift();
  if (!(drift <= tolerance)) {
    throw InvariantViolation("residual cache drifted by " +
                             std::to_string(drift));
  }
}

void SamplerChain::record_sweep() {
  SweepRecord r;
  r.phase = phase_ == Phase::refine ? "refine" : "pretrain";
  r.layer = phase_ == Phase::refine ? 1 : layer_ + 1;
  r.sweep = sweep_;
  r.chain = options_.chain_index;
  r.residual_norm = residual_norm();
  const std::size_t act = phase_ == Phase::refine ? geo_.size() - 1 : layer_;
  r.active_blocks.assign(geo_[act].num_dicts, 0);
  for (const auto& img : data_) {
    for (std::size_t k = 0; k < geo_[act].num_dicts; ++k) {
      for (double s : img.states[act].activations[k].values()) {
        r.active_blocks[k] += s != 0.0;
      }
    }
  }
  r.gamma_e = hyper_.gamma_e[phase_ == Phase::refine ? 0 : layer_];
  r.gamma_w = hyper_.gamma_w;
  r.log_score = log_score();
  if (!std::isfinite(r.residual_norm) || !std::isfinite(r.log_score)) {
    throw NumericalError("sampler diverged at sweep " + std::to_string(sweep_));
  }
  if (options_.sink) options_.sink(r);
  trace_.push_back(std::move(r));
}

// --- drivers -----------------------------------------------------------------

namespace {

Hyperstate placeholder_hyper(const ModelConfig& config) {
  Hyperstate h;
  for (const auto& layer : config.layers) {
    h.gamma_e.push_back(1.0);
    h.gamma_w.push_back(1.0);
    const auto [a, b] = activation_prior(config.priors, layer.num_dicts);
    h.pi.emplace_back(layer.num_dicts, clamp_pi(a / (a + b)));
  }
  return h;
}

// Early sweeps see a flattened likelihood so filters can move before
// activations lock in; periodic alignment recentres filters stuck on
// off-centre copies of a pattern, which one-pixel Gibbs moves cannot undo.
void run_pretrain_schedule(SamplerChain& chain, const GibbsSettings& g,
                           bool learn_dicts) {
  const std::size_t sweeps = g.pretrain_sweeps;
  const auto warm = static_cast<std::size_t>(g.anneal_fraction * static_cast<double>(sweeps));
  const bool align = g.align_every > 0 && learn_dicts;
  for (std::size_t s = 0; s < sweeps; ++s) {
    chain.set_temperature(
        s < warm ? std::pow(10.0, -2.0 + 2.0 * static_cast<double>(s) / static_cast<double>(warm))
                 : 1.0);
    chain.pretrain_sweep();
    if (align && (s + 1) % g.align_every == 0 && s + 2 * g.align_every < sweeps) {
      chain.align_dictionaries();
    }
  }
  chain.set_temperature(1.0);
}

}  // namespace

FitResult pretrain(const std::vector<Plane>& images, const ModelConfig& config,
                   const ChainOptions& options) {
  config.validate();
  if (images.empty()) throw ConfigError("pretraining needs at least one image");
  const std::size_t L = config.num_layers();
  const std::size_t chains = config.gibbs.chains;
  // Layer 0, chain 0 uses the caller's tag; every other (layer, chain) pair
  // gets streams of its own.
  auto tag_for = [&](std::size_t l, std::size_t c) {
    return options.stream_tag + 0x10000 * (l * chains + c);
  };

  Rng init0 = derive_stream(config.rng_seed, kInitStream + 16 * tag_for(0, 0), 0);
  DictionarySet dicts = sample_prior_dictionaries(config, init0);
  Hyperstate hyper = placeholder_hyper(config);
  std::vector<std::vector<LayerState>> states(images.size());
  FitResult out;

  for (std::size_t l = 0; l < L; ++l) {
    double best = kNegInf;
    std::optional<SamplerChain> kept;
    std::vector<SweepRecord> kept_trace;
    for (std::size_t c = 0; c < chains; ++c) {
      ChainOptions opts = options;
      opts.stream_tag = tag_for(l, c);
      opts.chain_index = c;
      DictionarySet start = dicts;
      if (l > 0 || c > 0) {
        Rng init = derive_stream(config.rng_seed,
                                 kInitStream + 16 * opts.stream_tag, 0);
        start[l] = sample_prior_dictionaries(config, init)[l];
      }
      SamplerChain chain(config, std::move(start), hyper, images, opts);
      for (std::size_t n = 0; n < images.size(); ++n) {
        for (const auto& st : states[n]) chain.set_layer_state(n, st);
      }
      chain.begin_pretrain_layer(l, true);
      run_pretrain_schedule(chain, config.gibbs, opts.update_dictionaries);
      chain.polish_to_mode();
      const double score = chain.log_score();
      if (!kept || score > best) {
        best = score;
        kept_trace = chain.trace();
        kept.emplace(std::move(chain));
      }
    }
    dicts[l] = kept->dictionaries()[l];
    hyper.gamma_e[l] = kept->hyper().gamma_e[l];
    hyper.gamma_w[l] = kept->hyper().gamma_w[l];
    hyper.pi[l] = kept->hyper().pi[l];
    for (std::size_t n = 0; n < images.size(); ++n) {
      states[n].push_back(kept->states(n)[l]);
    }
    out.trace.insert(out.trace.end(), kept_trace.begin(), kept_trace.end());
    out.rng_state = rng_state(kept->global_rng());
  }
  out.model = {config, std::move(dicts), std::move(hyper)};
  out.states = std::move(states);
  return out;
}

FitResult refine(const FitResult& pretrained, const std::vector<Plane>& images,
                 const ChainOptions& options) {
  const TrainedModel& m = pretrained.model;
  if (pretrained.states.size() != images.size()) {
    throw ValidationError("pretraining states do not match the image set");
  }
  ChainOptions opts = options;
  opts.stream_tag = options.stream_tag + 1;
  SamplerChain chain(m.config, m.dicts, m.hyper, images, opts);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (pretrained.states[n].size() != m.config.num_layers()) {
      throw ValidationError("pretraining states have the wrong depth");
    }
    for (const auto& st : pretrained.states[n]) chain.set_layer_state(n, st);
  }
  chain.begin_refine();
  for (std::size_t s = 0; s < m.config.gibbs.refine_sweeps; ++s) {
    chain.refine_sweep();
  }
  FitResult out;
  out.model = {m.config, chain.dictionaries(), chain.hyper()};
  for (std::size_t n = 0; n < chain.image_count(); ++n) {
    out.states.push_back(chain.states(n));
  }
  out.trace = pretrained.trace;
  out.trace.insert(out.trace.end(), chain.trace().begin(), chain.trace().end());
  out.rng_state = rng_state(chain.global_rng());
  return out;
}

std::vector<LayerState> infer_states(const Plane& image,
                                     const TrainedModel& model,
                                     std::size_t sweeps, std::uint64_t seed,
                                     std::size_t mode_window) {
  ModelConfig config = model.config;
  config.rng_seed = seed;
  ChainOptions opts;
  opts.update_dictionaries = false;
  opts.update_hyper = false;
  opts.stream_tag = 2;
  SamplerChain chain(config, model.dicts, model.hyper, {image}, opts);
  for (std::size_t l = 0; l < config.num_layers(); ++l) {
    chain.begin_pretrain_layer(l, false);
    double best = kNegInf;
    LayerState best_state;
    for (std::size_t s = 0; s < sweeps; ++s) {
      chain.pretrain_sweep();
      if (s + mode_window < sweeps) continue;
      const double score = chain.log_score();
      if (score > best) {
        best = score;
        best_state = chain.states(0)[l];
      }
    }
    if (sweeps > 0) chain.set_layer_state(0, std::move(best_state));
    chain.polish_to_mode();
  }
  return chain.states(0);
}

}  // namespace dcdl
