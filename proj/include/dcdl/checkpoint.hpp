#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dcdl/inference.hpp"
#include "dcdl/model.hpp"

namespace dcdl {

inline constexpr const char* kCheckpointVersion = "1";

// A checkpoint directory holds meta.json (config, hyperstate, dictionary
// shapes, rng state, diagnostics), d_<layer>_<index>.bin per dictionary
// element (raw little-endian float64, channel-major then row-major) and,
// when latent states are saved, states.json (sparse non-zeros).
struct Checkpoint {
  TrainedModel model;
  std::vector<std::vector<LayerState>> states;  // [image][layer], may be empty
  std::string rng_state;
  std::size_t sweeps = 0;
  std::vector<double> residual_trace;
  std::vector<double> score_trace;
};

Checkpoint make_checkpoint(const FitResult& fit);

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);

// Throws VersionError, ConsistencyError (shape mismatch vs meta.json),
// LengthError (truncated binary) or FormatError.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

void to_json(nlohmann::json& j, const Hyperstate& h);
void from_json(const nlohmann::json& j, Hyperstate& h);

}  // namespace dcdl
