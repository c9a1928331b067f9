#include "dcdl/model.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "dcdl/error.hpp"
#include "dcdl/tensor_ops.hpp"

namespace dcdl {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double log_normal(double x, double mean, double precision) {
  const double d = x - mean;
  return 0.5 * (std::log(precision) - kLog2Pi) - 0.5 * precision * d * d;
}

std::string layer_name(std::size_t l) {
  return "layer " + std::to_string(l + 1);
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("non-finite ") + what);
  }
}

}  // namespace

double DictionaryElement::squared_norm() const {
  return dcdl::squared_norm(filter);
}

void Hyperstate::validate(const ModelConfig& config, bool closed_pi) const {
  const std::size_t L = config.num_layers();
  if (gamma_e.size() != L || gamma_w.size() != L || pi.size() != L) {
    throw ValidationError("hyperstate needs one entry per layer");
  }
  for (std::size_t l = 0; l < L; ++l) {
    if (!(gamma_e[l] > 0.0) || !(gamma_w[l] > 0.0) ||
        !std::isfinite(gamma_e[l]) || !std::isfinite(gamma_w[l])) {
      throw ValidationError(layer_name(l) + ": precisions must be positive");
    }
    if (pi[l].size() != config.layers[l].num_dicts) {
      throw ValidationError(layer_name(l) + ": need one pi per dictionary");
    }
    for (double p : pi[l]) {
      const bool ok = closed_pi ? (p >= 0.0 && p <= 1.0) : (p > 0.0 && p < 1.0);
      if (!ok) {
        throw ValidationError(layer_name(l) + ": pi must lie in " +
                              (closed_pi ? "[0,1]" : "(0,1)"));
      }
    }
  }
}

Plane LayerState::support(std::size_t k) const {
  const Plane& s = activations.at(k);
  Plane z(s.rows(), s.cols());
  auto out = z.values();
  auto in = s.values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] != 0.0 ? 1.0 : 0.0;
  return z;
}

std::size_t LayerState::active_count() const {
  std::size_t n = 0;
  for (const auto& s : activations) {
    for (double v : s.values()) n += v != 0.0;
  }
  return n;
}

LayerState empty_layer_state(const LayerGeometry& g, std::size_t image,
                             std::size_t layer) {
  LayerState s;
  s.image = image;
  s.layer = layer;
  s.activations.assign(g.num_dicts, Plane(g.act_rows, g.act_cols));
  if (!g.top) {
    s.positions.assign(g.num_dicts, PositionGrid(g.blocks.rows(),
                                                 g.blocks.cols()));
  }
  return s;
}

void validate_layer_state(const LayerState& s, const LayerGeometry& g) {
  const std::string name = layer_name(s.layer - 1);
  if (s.activations.size() != g.num_dicts) {
    throw ValidationError(name + ": wrong number of activation maps");
  }
  for (const auto& a : s.activations) {
    if (a.rows() != g.act_rows || a.cols() != g.act_cols) {
      throw ValidationError(name + ": activation map has wrong shape");
    }
    ensure_finite(a, "activation map");
  }
  if (g.top) {
    if (!s.positions.empty()) {
      throw ValidationError(name + ": top layer carries no pool positions");
    }
    return;
  }
  if (s.positions.size() != g.num_dicts) {
    throw ValidationError(name + ": wrong number of position grids");
  }
  for (std::size_t k = 0; k < g.num_dicts; ++k) {
    const PooledPlane pooled = pool_max(s.activations[k], g.blocks);
    if (!(pooled.positions == s.positions[k])) {
      throw ValidationError(name + ", dictionary " + std::to_string(k + 1) +
                            ": pool positions disagree with the support");
    }
  }
}

std::pair<double, double> activation_prior(const Priors& p, std::size_t K) {
  const double k = static_cast<double>(K);
  const double b = K > 1 ? p.b0 * (k - 1.0) / k : p.b0;
  return {p.a0 / k, b};
}

double dictionary_prior_variance(const LayerGeometry& g) {
  return 1.0 / static_cast<double>(g.dict_rows * g.dict_cols);
}

DictionarySet sample_prior_dictionaries(const ModelConfig& config, Rng& rng) {
  const auto geo = layer_geometry(config);
  DictionarySet dicts(geo.size());
  for (std::size_t l = 0; l < geo.size(); ++l) {
    const double sd = std::sqrt(dictionary_prior_variance(geo[l]));
    for (std::size_t k = 0; k < geo[l].num_dicts; ++k) {
      DictionaryElement d{l + 1, k + 1, {}};
      for (std::size_t c = 0; c < geo[l].channels; ++c) {
        Plane p(geo[l].dict_rows, geo[l].dict_cols);
        for (double& v : p.values()) v = normal(rng, 0.0, sd);
        d.filter.push_back(std::move(p));
      }
      dicts[l].push_back(std::move(d));
    }
  }
  return dicts;
}

Hyperstate sample_prior_hyperstate(const ModelConfig& config, Rng& rng) {
  const auto& p = config.priors;
  Hyperstate h;
  for (const auto& layer : config.layers) {
    h.gamma_e.push_back(gamma_draw(rng, p.e0, p.f0));
    h.gamma_w.push_back(gamma_draw(rng, p.c0, p.d0));
    const auto [a, b] = activation_prior(p, layer.num_dicts);
    std::vector<double> pis;
    for (std::size_t k = 0; k < layer.num_dicts; ++k) {
      pis.push_back(beta_draw(rng, a, b));
    }
    h.pi.push_back(std::move(pis));
  }
  return h;
}

void validate_dictionaries(const DictionarySet& dicts,
                           const ModelConfig& config) {
  const auto geo = layer_geometry(config);
  if (dicts.size() != geo.size()) {
    throw ConfigError("dictionary set has " + std::to_string(dicts.size()) +
                      " layers, config has " + std::to_string(geo.size()));
  }
  for (std::size_t l = 0; l < geo.size(); ++l) {
    if (dicts[l].size() != geo[l].num_dicts) {
      throw ConfigError(layer_name(l) + ": dictionary count mismatch");
    }
    for (const auto& d : dicts[l]) {
      if (d.filter.size() != geo[l].channels) {
        throw ConfigError(layer_name(l) + ": filter channel count mismatch");
      }
      for (const auto& p : d.filter) {
        if (p.rows() != geo[l].dict_rows || p.cols() != geo[l].dict_cols) {
          throw ConfigError(layer_name(l) + ": filter shape mismatch");
        }
        ensure_finite(p, "dictionary element");
      }
    }
  }
}

Volume synthesize_layer(const std::vector<Plane>& activations,
                        const std::vector<DictionaryElement>& dicts,
                        const LayerGeometry& g) {
  Volume out(g.channels, Plane(g.input_rows, g.input_cols));
  for (std::size_t k = 0; k < dicts.size(); ++k) {
    const Plane& s = activations[k];
    for (std::size_t i = 0; i < s.rows(); ++i) {
      for (std::size_t j = 0; j < s.cols(); ++j) {
        const double v = s(i, j);
        if (v == 0.0) continue;
        for (std::size_t c = 0; c < g.channels; ++c) {
          add_placed(out[c], dicts[k].filter[c], i, j, v);
        }
      }
    }
  }
  return out;
}

GeneratedSample generate(const ModelConfig& config, const DictionarySet& dicts,
                         const Hyperstate& hyper, Rng& rng) {
  const auto geo = layer_geometry(config);
  validate_dictionaries(dicts, config);
  hyper.validate(config, true);
  const std::size_t L = geo.size();

  GeneratedSample out;
  out.states.resize(L);
  const LayerGeometry& top = geo[L - 1];
  out.states[L - 1] = empty_layer_state(top, 0, L);
  const double w_sd = 1.0 / std::sqrt(hyper.gamma_w[L - 1]);
  for (std::size_t k = 0; k < top.num_dicts; ++k) {
    for (double& s : out.states[L - 1].activations[k].values()) {
      if (uniform01(rng) < hyper.pi[L - 1][k]) s = normal(rng, 0.0, w_sd);
    }
  }

  Volume x = synthesize_layer(out.states[L - 1].activations, dicts[L - 1],
                              geo[L - 1]);
  for (std::size_t l = L - 1; l-- > 0;) {
    const LayerGeometry& g = geo[l];
    LayerState& st = out.states[l];
    st = empty_layer_state(g, 0, l + 1);
    for (std::size_t k = 0; k < g.num_dicts; ++k) {
      const Plane& parent = x[k];
      for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
        for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
          if (parent(br, bc) == 0.0) continue;
          const std::size_t n = g.blocks.valid_count(br, bc);
          const auto pick = static_cast<std::size_t>(uniform01(rng) * n);
          // Walk the valid cells in row-major order to the chosen one.
          std::size_t seen = 0;
          for (int p = 1; p <= static_cast<int>(g.blocks.block_size()); ++p) {
            if (!g.blocks.cell(br, bc, p)) continue;
            if (seen++ == std::min(pick, n - 1)) {
              st.positions[k](br, bc) = p;
              break;
            }
          }
        }
      }
      st.activations[k] = unpool(parent, st.positions[k], g.blocks);
    }
    x = synthesize_layer(st.activations, dicts[l], g);
  }

  out.image = std::move(x[0]);
  const double e_sd = 1.0 / std::sqrt(hyper.gamma_e[0]);
  for (double& v : out.image.values()) v += normal(rng, 0.0, e_sd);
  return out;
}

Plane synthesize(const std::vector<LayerState>& states,
                 const DictionarySet& dicts, const ModelConfig& config) {
  const auto geo = layer_geometry(config);
  validate_dictionaries(dicts, config);
  if (states.size() != geo.size()) {
    throw ValidationError("need one layer state per layer");
  }
  for (std::size_t l = 0; l < geo.size(); ++l) {
    validate_layer_state(states[l], geo[l]);
  }
  const std::size_t L = geo.size();
  std::vector<Plane> acts = states[L - 1].activations;
  for (std::size_t l = L - 1; l-- > 0;) {
    const Volume x = synthesize_layer(acts, dicts[l + 1], geo[l + 1]);
    for (std::size_t k = 0; k < geo[l].num_dicts; ++k) {
      acts[k] = unpool(x[k], states[l].positions[k], geo[l].blocks);
    }
    acts.resize(geo[l].num_dicts);
  }
  return synthesize_layer(acts, dicts[0], geo[0])[0];
}

double log_joint(const Plane& image, const std::vector<LayerState>& states,
                 const DictionarySet& dicts, const Hyperstate& hyper,
                 const ModelConfig& config) {
  const auto geo = layer_geometry(config);
  hyper.validate(config);
  const Plane recon = synthesize(states, dicts, config);
  if (!image.same_shape(recon)) {
    throw DimensionError("image does not match the configured size");
  }
  const std::size_t L = geo.size();
  double total = 0.0;

  for (std::size_t l = 0; l < L; ++l) {
    const double prec = 1.0 / dictionary_prior_variance(geo[l]);
    for (const auto& d : dicts[l]) {
      for (const auto& p : d.filter) {
        for (double v : p.values()) total += log_normal(v, 0.0, prec);
      }
    }
  }

  const auto& top = states[L - 1];
  for (std::size_t k = 0; k < geo[L - 1].num_dicts; ++k) {
    const double pi = hyper.pi[L - 1][k];
    for (double s : top.activations[k].values()) {
      total += s != 0.0 ? std::log(pi) + log_normal(s, 0.0, hyper.gamma_w[L - 1])
                        : std::log1p(-pi);
    }
  }

  for (std::size_t l = 0; l + 1 < L; ++l) {
    const auto& g = geo[l];
    for (const auto& pos : states[l].positions) {
      for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
        for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
          if (pos(br, bc) != 0) {
            total -= std::log(static_cast<double>(g.blocks.valid_count(br, bc)));
          }
        }
      }
    }
  }

  const auto rv = recon.values();
  const auto xv = image.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    total += log_normal(xv[i], rv[i], hyper.gamma_e[0]);
  }
  require_finite(total, "log joint");
  return total;
}

double layer_log_likelihood(const Volume& input, const LayerState& state,
                            const std::vector<DictionaryElement>& dicts,
                            const Hyperstate& hyper, const ModelConfig& config,
                            std::size_t layer) {
  const auto geo = layer_geometry(config);
  const LayerGeometry& g = geo.at(layer);
  const Volume recon = synthesize_layer(state.activations, dicts, g);
  double total = 0.0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const auto rv = recon[c].values();
    const auto xv = input[c].values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      total += log_normal(xv[i], rv[i], hyper.gamma_e[layer]);
    }
  }
  for (std::size_t k = 0; k < g.num_dicts; ++k) {
    const double pi = hyper.pi[layer][k];
    const Plane& s = state.activations[k];
    for (std::size_t br = 0; br < g.blocks.rows(); ++br) {
      for (std::size_t bc = 0; bc < g.blocks.cols(); ++bc) {
        double w = 0.0;
        for (int p = 1; p <= static_cast<int>(g.blocks.block_size()); ++p) {
          if (const auto cell = g.blocks.cell(br, bc, p)) {
            if (s(cell->first, cell->second) != 0.0) {
              w = s(cell->first, cell->second);
            }
          }
        }
        if (w != 0.0) {
          total += std::log(pi) -
                   std::log(static_cast<double>(g.blocks.valid_count(br, bc))) +
                   log_normal(w, 0.0, hyper.gamma_w[layer]);
        } else {
          total += std::log1p(-pi);
        }
      }
    }
  }
  require_finite(total, "layer log likelihood");
  return total;
}

}  // namespace dcdl
