#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "dcdl/checkpoint.hpp"
#include "dcdl/error.hpp"

using namespace dcdl;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dcdl_ckpt_" + name);
  fs::remove_all(p);
  return p;
}

Checkpoint random_checkpoint() {
  ModelConfig cfg;
  cfg.image_rows = 12;
  cfg.image_cols = 12;
  cfg.layers = {LayerSpec{3, 3, 3, 2, 2}, LayerSpec{2, 2, 2, 1, 1}};
  cfg.gibbs.pretrain_sweeps = 4;
  cfg.rng_seed = 8;
  Rng rng = derive_stream(80, 0, 0);
  std::vector<Plane> imgs(3, Plane(12, 12));
  for (auto& p : imgs) for (double& v : p.values()) v = normal(rng, 0, 1);
  return make_checkpoint(pretrain(imgs, cfg));
}

void check_equal(const Checkpoint& a, const Checkpoint& b) {
  CHECK(nlohmann::json(a.model.config) == nlohmann::json(b.model.config));
  CHECK(a.model.hyper.gamma_e == b.model.hyper.gamma_e);
  CHECK(a.model.hyper.gamma_w == b.model.hyper.gamma_w);
  CHECK(a.model.hyper.pi == b.model.hyper.pi);
  REQUIRE(a.model.dicts.size() == b.model.dicts.size());
  for (std::size_t l = 0; l < a.model.dicts.size(); ++l) {
    for (std::size_t k = 0; k < a.model.dicts[l].size(); ++k) {
      CHECK(a.model.dicts[l][k].filter == b.model.dicts[l][k].filter);
    }
  }
  CHECK(a.rng_state == b.rng_state);
  CHECK(a.sweeps == b.sweeps);
  CHECK(a.residual_trace == b.residual_trace);
  CHECK(a.score_trace == b.score_trace);
  REQUIRE(a.states.size() == b.states.size());
  for (std::size_t n = 0; n < a.states.size(); ++n) {
    for (std::size_t l = 0; l < a.states[n].size(); ++l) {
      CHECK(a.states[n][l].activations == b.states[n][l].activations);
      CHECK(a.states[n][l].positions == b.states[n][l].positions);
    }
  }
}

}  // namespace

TEST_CASE("checkpoint round-trip on a random model") {
  const Checkpoint c = random_checkpoint();
  const fs::path dir = scratch("rt");
  save_checkpoint(dir, c);
  CHECK(fs::exists(dir / "meta.json"));
  CHECK(fs::file_size(dir / "d_1_1.bin") == 9 * 8);
  CHECK(fs::file_size(dir / "d_2_2.bin") == 3 * 4 * 8);
  check_equal(c, load_checkpoint(dir));
  fs::remove_all(dir);
}

TEST_CASE("save/load/save is bit-exact") {
  const fs::path a = scratch("a"), b = scratch("b");
  save_checkpoint(a, random_checkpoint());
  save_checkpoint(b, load_checkpoint(a));
  for (const auto& e : fs::directory_iterator(a)) {
    CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("checkpoint without states") {
  Checkpoint c = random_checkpoint();
  c.states.clear();
  const fs::path dir = scratch("nostates");
  save_checkpoint(dir, c);
  CHECK_FALSE(fs::exists(dir / "states.json"));
  CHECK(load_checkpoint(dir).states.empty());
  fs::remove_all(dir);
}

TEST_CASE("corrupted checkpoints") {
  const fs::path dir = scratch("bad");
  save_checkpoint(dir, random_checkpoint());
  const std::string meta = slurp(dir / "meta.json");
  const std::string bin = slurp(dir / "d_1_2.bin");

  SUBCASE("truncated binary") {
    std::ofstream(dir / "d_1_2.bin", std::ios::binary) << bin.substr(0, bin.size() - 3);
    CHECK_THROWS_AS(load_checkpoint(dir), LengthError);
  }
  SUBCASE("oversized binary") {
    std::ofstream(dir / "d_1_2.bin", std::ios::binary) << bin << "12345678";
    CHECK_THROWS_AS(load_checkpoint(dir), LengthError);
  }
  SUBCASE("unknown version") {
    auto j = nlohmann::json::parse(meta);
    j["format_version"] = "9";
    std::ofstream(dir / "meta.json") << j.dump();
    CHECK_THROWS_AS(load_checkpoint(dir), VersionError);
  }
  SUBCASE("shape mismatch against meta.json") {
    auto j = nlohmann::json::parse(meta);
    j["dictionaries"][0][1]["rows"] = 4;
    std::ofstream(dir / "meta.json") << j.dump();
    CHECK_THROWS_AS(load_checkpoint(dir), ConsistencyError);
  }
  SUBCASE("malformed meta.json") {
    std::ofstream(dir / "meta.json") << meta.substr(0, meta.size() / 2);
    CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  }
  SUBCASE("missing dictionary file") {
    fs::remove(dir / "d_1_2.bin");
    CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  }
  fs::remove_all(dir);
}
