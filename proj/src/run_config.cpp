#include "dcdl/run_config.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "dcdl/error.hpp"
#include "dcdl/svm.hpp"

namespace dcdl {

namespace fs = std::filesystem;

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

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

void require_exists(const fs::path& p, const char* what) {
  if (!fs::exists(p)) {
    throw ItemError(p.string(), std::string(what) + " does not exist");
  }
}

}  // namespace

void to_json(nlohmann::json& j, const DataSpec& d) {
  j = {{"format", d.format},
       {"images", d.images.generic_string()},
       {"labels", d.labels.generic_string()},
       {"root", d.root.generic_string()},
       {"extension", d.extension},
       {"per_class", d.per_class},
       {"offset", d.offset},
       {"count", d.count},
       {"mean_subtract", d.mean_subtract}};
}

void from_json(const nlohmann::json& j, DataSpec& d) {
  reject_unknown(j, {"format", "images", "labels", "root", "extension",
                     "per_class", "offset", "count", "mean_subtract"},
                 "data");
  read_optional(j, "format", d.format);
  if (j.contains("images")) d.images = j.at("images").get<std::string>();
  if (j.contains("labels")) d.labels = j.at("labels").get<std::string>();
  if (j.contains("root")) d.root = j.at("root").get<std::string>();
  read_optional(j, "extension", d.extension);
  read_optional(j, "per_class", d.per_class);
  read_optional(j, "offset", d.offset);
  read_optional(j, "count", d.count);
  read_optional(j, "mean_subtract", d.mean_subtract);
  if (d.format != "mnist" && d.format != "image_dir") {
    throw ConfigError("data.format must be \"mnist\" or \"image_dir\"");
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  const auto& f = c.features;
  const auto& k = c.classifier;
  j = {{"model", c.model},
       {"data", c.data},
       {"features",
        {{"sweeps", f.sweeps},
         {"mode_window", f.mode_window},
         {"grid_rows", f.grid_rows},
         {"grid_cols", f.grid_cols}}},
       {"classifier",
        {{"c_grid", k.c_grid.empty() ? default_c_grid() : k.c_grid},
         {"gamma_grid",
          k.gamma_grid.empty() ? default_gamma_grid() : k.gamma_grid},
         {"folds", k.folds},
         {"C", k.C},
         {"gamma", k.gamma}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown(j, {"model", "data", "features", "classifier"}, "run config");
  read_optional(j, "model", c.model);
  read_optional(j, "data", c.data);
  if (auto it = j.find("features"); it != j.end()) {
    reject_unknown(*it, {"sweeps", "mode_window", "grid_rows", "grid_cols"},
                   "features");
    read_optional(*it, "sweeps", c.features.sweeps);
    read_optional(*it, "mode_window", c.features.mode_window);
    read_optional(*it, "grid_rows", c.features.grid_rows);
    read_optional(*it, "grid_cols", c.features.grid_cols);
  }
  if (auto it = j.find("classifier"); it != j.end()) {
    reject_unknown(*it, {"c_grid", "gamma_grid", "folds", "C", "gamma"},
                   "classifier");
    read_optional(*it, "c_grid", c.classifier.c_grid);
    read_optional(*it, "gamma_grid", c.classifier.gamma_grid);
    read_optional(*it, "folds", c.classifier.folds);
    read_optional(*it, "C", c.classifier.C);
    read_optional(*it, "gamma", c.classifier.gamma);
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ItemError(path.string(), "cannot open config");
  RunConfig c;
  try {
    c = nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.model.validate();
  if (c.features.grid_rows == 0 || c.features.grid_cols == 0) {
    throw ConfigError("feature grid must be at least 1x1");
  }
  if (c.classifier.folds < 2) throw ConfigError("classifier.folds must be >= 2");
  const fs::path base = path.parent_path();
  auto& d = c.data;
  d.images = resolve(base, d.images);
  d.labels = resolve(base, d.labels);
  d.root = resolve(base, d.root);
  if (d.format == "mnist") {
    if (d.images.empty()) throw ConfigError("data.images is required");
    require_exists(d.images, "image file");
    if (!d.labels.empty()) require_exists(d.labels, "label file");
  } else {
    if (d.root.empty()) throw ConfigError("data.root is required");
    require_exists(d.root, "image directory");
  }
  return c;
}

Dataset load_dataset(const DataSpec& spec, std::size_t rows, std::size_t cols,
                     std::uint64_t seed, const WarningSink& warn) {
  Dataset d = spec.format == "image_dir"
                  ? load_image_dir(spec.root, spec.extension, rows, cols, warn)
                  : load_mnist_idx(spec.images, spec.labels);
  d.validate();
  if (spec.per_class > 0) d = split_per_class(d, spec.per_class, 0, seed).first;
  d = slice(d, spec.offset, spec.count);
  if (d.size() == 0) throw ValidationError("data selection is empty");
  if (d.images.front().rows() != rows || d.images.front().cols() != cols) {
    throw ValidationError("images are " +
                          std::to_string(d.images.front().rows()) + "x" +
                          std::to_string(d.images.front().cols()) +
                          ", model expects " + std::to_string(rows) + "x" +
                          std::to_string(cols));
  }
  if (spec.mean_subtract) subtract_image_means(d);
  return d;
}

}  // namespace dcdl
