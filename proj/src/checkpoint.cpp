#include "dcdl/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "dcdl/error.hpp"

namespace dcdl {

namespace fs = std::filesystem;

namespace {

std::string element_file(std::size_t layer, std::size_t index) {
  return "d_" + std::to_string(layer) + "_" + std::to_string(index) + ".bin";
}

void write_f64(std::ofstream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) {
    b[i] = static_cast<unsigned char>(bits & 0xffu);
    bits >>= 8;
  }
  out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(const unsigned char* b) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[i];
  return std::bit_cast<double>(bits);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ItemError(path.string(), "cannot open");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw ItemError(path.string(), "cannot open for writing");
  out << j.dump(1) << '\n';
  if (!out) throw ItemError(path.string(), "write failed");
}

nlohmann::json states_to_json(const std::vector<std::vector<LayerState>>& all) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t n = 0; n < all.size(); ++n) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& st : all[n]) {
      nlohmann::json active = nlohmann::json::array();
      for (std::size_t k = 0; k < st.activations.size(); ++k) {
        const Plane& a = st.activations[k];
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = 0; j < a.cols(); ++j) {
            if (a(i, j) != 0.0) active.push_back({k, i, j, a(i, j)});
          }
        }
      }
      layers.push_back({{"layer", st.layer}, {"active", active}});
    }
    out.push_back(layers);
  }
  return out;
}

std::vector<std::vector<LayerState>> states_from_json(
    const nlohmann::json& j, const std::vector<LayerGeometry>& geo) {
  std::vector<std::vector<LayerState>> out;
  for (std::size_t n = 0; n < j.size(); ++n) {
    const auto& layers = j.at(n);
    if (layers.size() != geo.size()) {
      throw ConsistencyError("states.json image " + std::to_string(n) +
                             " has the wrong number of layers");
    }
    std::vector<LayerState> per;
    for (std::size_t l = 0; l < geo.size(); ++l) {
      const LayerGeometry& g = geo[l];
      LayerState st = empty_layer_state(g, n, l + 1);
      for (const auto& e : layers.at(l).at("active")) {
        const auto k = e.at(0).get<std::size_t>();
        const auto i = e.at(1).get<std::size_t>();
        const auto c = e.at(2).get<std::size_t>();
        if (k >= g.num_dicts || i >= g.act_rows || c >= g.act_cols) {
          throw ConsistencyError("states.json entry out of range");
        }
        st.activations[k](i, c) = e.at(3).get<double>();
        if (!g.top) {
          st.positions[k](i / g.blocks.pool_rows(), c / g.blocks.pool_cols()) =
              g.blocks.position_of(i, c);
        }
      }
      validate_layer_state(st, g);
      per.push_back(std::move(st));
    }
    out.push_back(std::move(per));
  }
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const Hyperstate& h) {
  j = {{"gamma_e", h.gamma_e}, {"gamma_w", h.gamma_w}, {"pi", h.pi}};
}

void from_json(const nlohmann::json& j, Hyperstate& h) {
  h.gamma_e = j.at("gamma_e").get<std::vector<double>>();
  h.gamma_w = j.at("gamma_w").get<std::vector<double>>();
  h.pi = j.at("pi").get<std::vector<std::vector<double>>>();
}

Checkpoint make_checkpoint(const FitResult& fit) {
  Checkpoint c;
  c.model = fit.model;
  c.states = fit.states;
  c.rng_state = fit.rng_state;
  c.sweeps = fit.trace.size();
  for (const auto& r : fit.trace) {
    c.residual_trace.push_back(r.residual_norm);
    c.score_trace.push_back(r.log_score);
  }
  return c;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  const auto& m = ckpt.model;
  validate_dictionaries(m.dicts, m.config);
  m.hyper.validate(m.config);
  fs::create_directories(dir);

  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& layer : m.dicts) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& d : layer) {
      row.push_back({{"layer", d.layer},
                     {"index", d.index},
                     {"channels", d.filter.size()},
                     {"rows", d.filter.front().rows()},
                     {"cols", d.filter.front().cols()}});
      const fs::path path = dir / element_file(d.layer, d.index);
      std::ofstream out(path, std::ios::binary);
      if (!out) throw ItemError(path.string(), "cannot open for writing");
      for (const auto& plane : d.filter) {
        for (double v : plane.values()) write_f64(out, v);
      }
      if (!out) throw ItemError(path.string(), "write failed");
    }
    shapes.push_back(row);
  }
  nlohmann::json meta = {{"format_version", kCheckpointVersion},
                         {"config", m.config},
                         {"hyperstate", m.hyper},
                         {"dictionaries", shapes},
                         {"rng_state", ckpt.rng_state},
                         {"sweeps", ckpt.sweeps},
                         {"residual_trace", ckpt.residual_trace},
                         {"score_trace", ckpt.score_trace},
                         {"has_states", !ckpt.states.empty()}};
  write_json(dir / "meta.json", meta);
  if (!ckpt.states.empty()) {
    write_json(dir / "states.json", states_to_json(ckpt.states));
  } else {
    fs::remove(dir / "states.json");
  }
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const nlohmann::json meta = read_json(dir / "meta.json");
  const auto version = meta.value("format_version", std::string{});
  if (version != kCheckpointVersion) {
    throw VersionError((dir / "meta.json").string() +
                       ": unsupported format_version '" + version + "'");
  }
  Checkpoint c;
  try {
    c.model.config = meta.at("config").get<ModelConfig>();
    c.model.hyper = meta.at("hyperstate").get<Hyperstate>();
    c.rng_state = meta.value("rng_state", std::string{});
    c.sweeps = meta.value("sweeps", std::size_t{0});
    c.residual_trace = meta.value("residual_trace", std::vector<double>{});
    c.score_trace = meta.value("score_trace", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "meta.json").string() + ": " + e.what());
  }
  const ModelConfig& cfg = c.model.config;
  const auto geo = layer_geometry(cfg);
  c.model.hyper.validate(cfg);

  const auto& shapes = meta.at("dictionaries");
  if (shapes.size() != geo.size()) {
    throw ConsistencyError("meta.json lists " + std::to_string(shapes.size()) +
                           " dictionary layers, config has " +
                           std::to_string(geo.size()));
  }
  for (std::size_t l = 0; l < geo.size(); ++l) {
    const LayerGeometry& g = geo[l];
    if (shapes[l].size() != g.num_dicts) {
      throw ConsistencyError("layer " + std::to_string(l + 1) +
                             " dictionary count disagrees with config");
    }
    std::vector<DictionaryElement> layer;
    for (std::size_t k = 0; k < g.num_dicts; ++k) {
      const auto& s = shapes[l][k];
      if (s.at("channels").get<std::size_t>() != g.channels ||
          s.at("rows").get<std::size_t>() != g.dict_rows ||
          s.at("cols").get<std::size_t>() != g.dict_cols ||
          s.at("layer").get<std::size_t>() != l + 1 ||
          s.at("index").get<std::size_t>() != k + 1) {
        throw ConsistencyError("dictionary " + std::to_string(l + 1) + "," +
                               std::to_string(k + 1) +
                               " shape disagrees with config");
      }
      const fs::path path = dir / element_file(l + 1, k + 1);
      std::ifstream in(path, std::ios::binary);
      if (!in) throw ItemError(path.string(), "cannot open");
      const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                             std::istreambuf_iterator<char>()};
      const std::size_t per = g.dict_rows * g.dict_cols;
      const std::size_t expect = 8 * g.channels * per;
      if (bytes.size() != expect) {
        throw LengthError(path.string() + ": expected " +
                          std::to_string(expect) + " bytes, found " +
                          std::to_string(bytes.size()));
      }
      DictionaryElement d;
      d.layer = l + 1;
      d.index = k + 1;
      for (std::size_t ch = 0; ch < g.channels; ++ch) {
        Plane p(g.dict_rows, g.dict_cols);
        for (std::size_t t = 0; t < per; ++t) {
          p.values()[t] = read_f64(bytes.data() + 8 * (ch * per + t));
        }
        d.filter.push_back(std::move(p));
      }
      layer.push_back(std::move(d));
    }
    c.model.dicts.push_back(std::move(layer));
  }
  validate_dictionaries(c.model.dicts, cfg);

  if (meta.value("has_states", false)) {
    try {
      c.states = states_from_json(read_json(dir / "states.json"), geo);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError((dir / "states.json").string() + ": " + e.what());
    }
  }
  return c;
}

}  // namespace dcdl
