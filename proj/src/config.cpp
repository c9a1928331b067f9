#include "dcdl/config.hpp"

#include <string>

#include <nlohmann/json.hpp>

#include "dcdl/error.hpp"

namespace dcdl {

namespace {

template <typename T>
void read_optional(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->template get<T>();
}

void reject_unknown(const nlohmann::json& j,
                    std::initializer_list<const char*> known,
                    const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (layers.empty()) throw ConfigError("model needs at least one layer");
  if (gibbs.chains == 0) throw ConfigError("gibbs.chains must be >= 1");
  if (!(gibbs.anneal_fraction >= 0.0 && gibbs.anneal_fraction <= 1.0)) {
    throw ConfigError("gibbs.anneal_fraction must lie in [0, 1]");
  }
  if (image_rows == 0 || image_cols == 0) {
    throw ConfigError("image dimensions must be positive");
  }
  const double priors_list[] = {priors.a0, priors.b0, priors.c0,
                                priors.d0, priors.e0, priors.f0};
  for (double v : priors_list) {
    if (!(v > 0.0)) throw ConfigError("prior constants must be positive");
  }
  std::size_t rows = image_rows;
  std::size_t cols = image_cols;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    const std::string name = "layer " + std::to_string(l + 1);
    if (s.num_dicts == 0) throw ConfigError(name + ": num_dicts must be >= 1");
    if (s.dict_rows == 0 || s.dict_cols == 0) {
      throw ConfigError(name + ": dictionary dimensions must be >= 1");
    }
    if (s.dict_rows > rows || s.dict_cols > cols) {
      throw ConfigError(name + ": " + std::to_string(s.dict_rows) + "x" +
                        std::to_string(s.dict_cols) +
                        " filter does not fit its " + std::to_string(rows) +
                        "x" + std::to_string(cols) + " input");
    }
    const bool top = l + 1 == layers.size();
    if (!top && (s.pool_rows == 0 || s.pool_cols == 0)) {
      throw ConfigError(name + ": pool dimensions must be >= 1");
    }
    rows = rows - s.dict_rows + 1;
    cols = cols - s.dict_cols + 1;
    if (!top) {
      rows = (rows + s.pool_rows - 1) / s.pool_rows;
      cols = (cols + s.pool_cols - 1) / s.pool_cols;
    }
  }
}

std::vector<LayerGeometry> layer_geometry(const ModelConfig& config) {
  config.validate();
  std::vector<LayerGeometry> out;
  std::size_t rows = config.image_rows;
  std::size_t cols = config.image_cols;
  std::size_t channels = 1;
  for (std::size_t l = 0; l < config.layers.size(); ++l) {
    const auto& s = config.layers[l];
    LayerGeometry g;
    g.channels = channels;
    g.input_rows = rows;
    g.input_cols = cols;
    g.num_dicts = s.num_dicts;
    g.dict_rows = s.dict_rows;
    g.dict_cols = s.dict_cols;
    g.act_rows = rows - s.dict_rows + 1;
    g.act_cols = cols - s.dict_cols + 1;
    g.top = l + 1 == config.layers.size();
    g.blocks = g.top ? BlockGrid(g.act_rows, g.act_cols, 1, 1)
                     : BlockGrid(g.act_rows, g.act_cols, s.pool_rows,
                                 s.pool_cols);
    rows = g.blocks.rows();
    cols = g.blocks.cols();
    channels = s.num_dicts;
    out.push_back(g);
  }
  return out;
}

void to_json(nlohmann::json& j, const LayerSpec& s) {
  j = {{"num_dicts", s.num_dicts}, {"dict_rows", s.dict_rows},
       {"dict_cols", s.dict_cols}, {"pool_rows", s.pool_rows},
       {"pool_cols", s.pool_cols}};
}

void from_json(const nlohmann::json& j, LayerSpec& s) {
  reject_unknown(j, {"num_dicts", "dict_rows", "dict_cols", "pool_rows",
                     "pool_cols"},
                 "layer");
  read_optional(j, "num_dicts", s.num_dicts);
  read_optional(j, "dict_rows", s.dict_rows);
  read_optional(j, "dict_cols", s.dict_cols);
  read_optional(j, "pool_rows", s.pool_rows);
  read_optional(j, "pool_cols", s.pool_cols);
}

void to_json(nlohmann::json& j, const Priors& p) {
  j = {{"a0", p.a0}, {"b0", p.b0}, {"c0", p.c0},
       {"d0", p.d0}, {"e0", p.e0}, {"f0", p.f0}};
}

void from_json(const nlohmann::json& j, Priors& p) {
  reject_unknown(j, {"a0", "b0", "c0", "d0", "e0", "f0"}, "priors");
  read_optional(j, "a0", p.a0);
  read_optional(j, "b0", p.b0);
  read_optional(j, "c0", p.c0);
  read_optional(j, "d0", p.d0);
  read_optional(j, "e0", p.e0);
  read_optional(j, "f0", p.f0);
}

void to_json(nlohmann::json& j, const GibbsSettings& g) {
  j = {{"pretrain_sweeps", g.pretrain_sweeps},
       {"refine_sweeps", g.refine_sweeps},
       {"burn_in", g.burn_in},
       {"chains", g.chains},
       {"anneal_fraction", g.anneal_fraction},
       {"align_every", g.align_every}};
}

void from_json(const nlohmann::json& j, GibbsSettings& g) {
  reject_unknown(j, {"pretrain_sweeps", "refine_sweeps", "burn_in", "chains",
                     "anneal_fraction", "align_every"},
                 "gibbs");
  read_optional(j, "pretrain_sweeps", g.pretrain_sweeps);
  read_optional(j, "refine_sweeps", g.refine_sweeps);
  read_optional(j, "burn_in", g.burn_in);
  read_optional(j, "chains", g.chains);
  read_optional(j, "anneal_fraction", g.anneal_fraction);
  read_optional(j, "align_every", g.align_every);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_rows", c.image_rows}, {"image_cols", c.image_cols},
       {"layers", c.layers},         {"priors", c.priors},
       {"gibbs", c.gibbs},           {"rng_seed", c.rng_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown(j, {"image_rows", "image_cols", "layers", "priors", "gibbs",
                     "rng_seed"},
                 "model");
  read_optional(j, "image_rows", c.image_rows);
  read_optional(j, "image_cols", c.image_cols);
  read_optional(j, "layers", c.layers);
  read_optional(j, "priors", c.priors);
  read_optional(j, "gibbs", c.gibbs);
  read_optional(j, "rng_seed", c.rng_seed);
}

}  // namespace dcdl
