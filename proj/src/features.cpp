#include "dcdl/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dcdl/error.hpp"

namespace dcdl {

void to_json(nlohmann::json& j, const FeatureVector& f) {
  j = {{"id", f.id}, {"values", f.values}};
  j["label"] = f.label ? nlohmann::json(*f.label) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, FeatureVector& f) {
  f.id = j.at("id").is_string() ? j.at("id").get<std::string>()
                                : j.at("id").dump();
  f.values = j.at("values").get<std::vector<double>>();
  f.label.reset();
  if (j.contains("label") && !j.at("label").is_null()) {
    f.label = j.at("label").get<int>();
  }
}

std::vector<double> grid_max_abs(const std::vector<Plane>& maps,
                                 std::size_t grid_rows,
                                 std::size_t grid_cols) {
  if (grid_rows == 0 || grid_cols == 0) {
    throw ConfigError("feature grid must be at least 1x1");
  }
  std::vector<double> out;
  out.reserve(maps.size() * grid_rows * grid_cols);
  for (const Plane& m : maps) {
    if (m.rows() < grid_rows || m.cols() < grid_cols) {
      throw DimensionError("activation map smaller than the feature grid");
    }
    for (std::size_t gr = 0; gr < grid_rows; ++gr) {
      const std::size_t r0 = gr * m.rows() / grid_rows;
      const std::size_t r1 = (gr + 1) * m.rows() / grid_rows;
      for (std::size_t gc = 0; gc < grid_cols; ++gc) {
        const std::size_t c0 = gc * m.cols() / grid_cols;
        const std::size_t c1 = (gc + 1) * m.cols() / grid_cols;
        double best = 0.0;
        for (std::size_t i = r0; i < r1; ++i) {
          for (std::size_t j = c0; j < c1; ++j) {
            best = std::max(best, std::abs(m(i, j)));
          }
        }
        out.push_back(best);
      }
    }
  }
  return out;
}

FeatureVector extract_features(const Plane& image, const TrainedModel& model,
                               std::uint64_t seed,
                               const FeatureOptions& options) {
  const ModelConfig& cfg = model.config;
  if (image.rows() != cfg.image_rows || image.cols() != cfg.image_cols) {
    throw ValidationError("image is " + std::to_string(image.rows()) + "x" +
                          std::to_string(image.cols()) + ", model expects " +
                          std::to_string(cfg.image_rows) + "x" +
                          std::to_string(cfg.image_cols));
  }
  const std::size_t sweeps =
      options.sweeps ? options.sweeps : cfg.gibbs.pretrain_sweeps;
  const auto states =
      infer_states(image, model, sweeps, seed, options.mode_window);
  FeatureVector f;
  f.values = grid_max_abs(states.back().activations, options.grid_rows,
                          options.grid_cols);
  return f;
}

Standardizer::Standardizer(const std::vector<FeatureVector>& train) {
  check_feature_set(train);
  if (train.empty()) throw ValidationError("cannot standardize an empty set");
  const std::size_t d = train.front().values.size();
  const double n = static_cast<double>(train.size());
  mean_.assign(d, 0.0);
  scale_.assign(d, 1.0);
  for (const auto& f : train) {
    for (std::size_t i = 0; i < d; ++i) mean_[i] += f.values[i] / n;
  }
  for (std::size_t i = 0; i < d; ++i) {
    double v = 0.0;
    for (const auto& f : train) v += (f.values[i] - mean_[i]) * (f.values[i] - mean_[i]);
    v /= n;
    if (v > 1e-24) scale_[i] = 1.0 / std::sqrt(v);
  }
}

std::vector<double> Standardizer::apply(const std::vector<double>& x) const {
  if (x.size() != mean_.size()) {
    throw ValidationError("feature length " + std::to_string(x.size()) +
                          " does not match standardizer length " +
                          std::to_string(mean_.size()));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - mean_[i]) * scale_[i];
  }
  return out;
}

void Standardizer::apply_in_place(std::vector<FeatureVector>& xs) const {
  for (auto& f : xs) f.values = apply(f.values);
}

void check_feature_set(const std::vector<FeatureVector>& xs) {
  if (xs.empty()) return;
  const std::size_t d = xs.front().values.size();
  for (const auto& f : xs) {
    if (f.values.size() != d) {
      throw ValidationError("feature '" + f.id + "' has length " +
                            std::to_string(f.values.size()) + ", expected " +
                            std::to_string(d));
    }
    for (double v : f.values) {
      if (!std::isfinite(v)) {
        throw ValidationError("feature '" + f.id + "' is not finite");
      }
    }
  }
}

void write_features(const std::filesystem::path& path,
                    const std::vector<FeatureVector>& xs) {
  std::ofstream out(path);
  if (!out) throw ItemError(path.string(), "cannot open for writing");
  for (const auto& f : xs) out << nlohmann::json(f).dump() << '\n';
  if (!out) throw ItemError(path.string(), "write failed");
}

std::vector<FeatureVector> read_features(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ItemError(path.string(), "cannot open");
  std::vector<FeatureVector> xs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      xs.push_back(nlohmann::json::parse(line).get<FeatureVector>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  check_feature_set(xs);
  return xs;
}

}  // namespace dcdl
