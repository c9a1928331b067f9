#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dcdl/inference.hpp"
#include "dcdl/plane.hpp"

namespace dcdl {

struct FeatureVector {
  std::string id;
  std::vector<double> values;
  std::optional<int> label;
};

void to_json(nlohmann::json& j, const FeatureVector& f);
void from_json(const nlohmann::json& j, FeatureVector& f);

// Max |s| of each map over a grid_rows x grid_cols partition (cell bounds
// split the map as evenly as possible), channel-major then row-major.
std::vector<double> grid_max_abs(const std::vector<Plane>& maps,
                                 std::size_t grid_rows = 2,
                                 std::size_t grid_cols = 2);

struct FeatureOptions {
  // 0 means config.gibbs.pretrain_sweeps.
  std::size_t sweeps = 0;
  std::size_t mode_window = 10;
  std::size_t grid_rows = 2;
  std::size_t grid_cols = 2;
};

// Infers the image's layer-wise states under the model's frozen dictionaries
// and pools the top-layer maps. Length is K_L * grid_rows * grid_cols.
FeatureVector extract_features(const Plane& image, const TrainedModel& model,
                               std::uint64_t seed,
                               const FeatureOptions& options = {});

// Per-dimension affine map to mean 0, variance 1 using training statistics.
// Constant dimensions are only centred.
class Standardizer {
 public:
  Standardizer() = default;
  explicit Standardizer(const std::vector<FeatureVector>& train);

  std::vector<double> apply(const std::vector<double>& x) const;
  void apply_in_place(std::vector<FeatureVector>& xs) const;
  const std::vector<double>& mean() const noexcept { return mean_; }
  const std::vector<double>& scale() const noexcept { return scale_; }

 private:
  std::vector<double> mean_;
  std::vector<double> scale_;
};

// Throws ValidationError on ragged lengths or non-finite entries.
void check_feature_set(const std::vector<FeatureVector>& xs);

// One JSON object per line: {"id", "label", "values"}.
void write_features(const std::filesystem::path& path,
                    const std::vector<FeatureVector>& xs);
std::vector<FeatureVector> read_features(const std::filesystem::path& path);

}  // namespace dcdl
