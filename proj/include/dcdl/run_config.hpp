#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dcdl/config.hpp"
#include "dcdl/dataset.hpp"
#include "dcdl/features.hpp"

namespace dcdl {

// Where images come from and which of them to use.
struct DataSpec {
  std::string format = "mnist";  // "mnist" or "image_dir"
  std::filesystem::path images;  // mnist
  std::filesystem::path labels;  // mnist, optional
  std::filesystem::path root;  // image_dir
  std::string extension = ".pgm";
  // Seed-deterministic per-class subset (0 = all), applied before the slice.
  std::size_t per_class = 0;
  std::size_t offset = 0;
  std::size_t count = 0;  // 0 = to the end
  bool mean_subtract = false;
};

struct ClassifierSettings {
  std::vector<double> c_grid;  // defaults when empty
  std::vector<double> gamma_grid;
  std::size_t folds = 5;
  // Used without cross-validation.
  double C = 10.0;
  double gamma = 0.0;  // 0 means 1 / feature length
};

struct RunConfig {
  ModelConfig model;
  DataSpec data;
  FeatureOptions features;
  ClassifierSettings classifier;
};

void to_json(nlohmann::json& j, const DataSpec& d);
void from_json(const nlohmann::json& j, DataSpec& d);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Parses and validates a config file. Relative data paths are resolved
// against the file's directory and must exist.
RunConfig load_run_config(const std::filesystem::path& path);

// Loads, resizes (image_dir) and subsets the data. Images must come out as
// rows x cols.
Dataset load_dataset(const DataSpec& spec, std::size_t rows, std::size_t cols,
                     std::uint64_t seed, const WarningSink& warn = {});

}  // namespace dcdl
