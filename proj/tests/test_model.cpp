#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "dcdl/model.hpp"
#include "dcdl/pooling.hpp"
#include "dcdl/tensor_ops.hpp"

using namespace dcdl;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

ModelConfig one_layer(std::size_t rows, std::size_t cols, std::size_t K,
                      std::size_t dr, std::size_t dc) {
  ModelConfig c;
  c.image_rows = rows;
  c.image_cols = cols;
  c.layers = {LayerSpec{K, dr, dc, 1, 1}};
  return c;
}

ModelConfig two_layer() {
  ModelConfig c;
  c.image_rows = 9;
  c.image_cols = 8;
  c.layers = {LayerSpec{2, 3, 2, 2, 2}, LayerSpec{3, 2, 2, 1, 1}};
  return c;
}

Hyperstate flat_hyper(const ModelConfig& c, double ge, double gw, double pi) {
  Hyperstate h;
  for (const auto& l : c.layers) {
    h.gamma_e.push_back(ge);
    h.gamma_w.push_back(gw);
    h.pi.emplace_back(l.num_dicts, pi);
  }
  return h;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = two_layer();
  CHECK_NOTHROW(c.validate());
  c.layers[0].num_dicts = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = two_layer();
  c.priors.a0 = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = two_layer();
  c.layers[0].dict_rows = 20;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = two_layer();
  c.layers.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = two_layer();
  c.gibbs.chains = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("geometry pads activation maps to whole blocks") {
  const auto g = layer_geometry(two_layer());
  REQUIRE(g.size() == 2);
  CHECK(g[0].act_rows == 7);
  CHECK(g[0].act_cols == 7);
  CHECK(g[0].blocks.rows() == 4);
  CHECK(g[0].blocks.cols() == 4);
  CHECK(g[1].channels == 2);
  CHECK(g[1].input_rows == 4);
  CHECK(g[1].act_rows == 3);
  CHECK(g[1].top);
  CHECK(g[1].blocks.block_size() == 1);
}

TEST_CASE("config JSON round-trip and unknown keys") {
  ModelConfig c = two_layer();
  c.rng_seed = 123456789012345ULL;
  c.gibbs.chains = 3;
  c.priors.e0 = 0.5;
  const nlohmann::json j = c;
  const ModelConfig back = j.get<ModelConfig>();
  CHECK(nlohmann::json(back) == j);
  nlohmann::json bad = j;
  bad["gibbs"]["sweeps"] = 3;
  CHECK_THROWS_AS(bad.get<ModelConfig>(), ConfigError);
}

TEST_CASE("activation prior keeps K=1 proper") {
  Priors p;
  p.a0 = 2.0;
  p.b0 = 3.0;
  CHECK(activation_prior(p, 4).first == doctest::Approx(0.5));
  CHECK(activation_prior(p, 4).second == doctest::Approx(2.25));
  CHECK(activation_prior(p, 1).second == doctest::Approx(3.0));
}

TEST_CASE("generate: all pi = 0 gives zero latents and pure noise") {
  ModelConfig c = one_layer(64, 64, 2, 4, 4);
  Rng rng = derive_stream(11, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  const Hyperstate h = flat_hyper(c, 25.0, 1.0, 0.0);
  const auto g = generate(c, dicts, h, rng);
  CHECK(g.states[0].active_count() == 0);
  double m = 0.0, v = 0.0;
  const double n = static_cast<double>(g.image.size());
  for (double x : g.image.values()) m += x / n;
  for (double x : g.image.values()) v += (x - m) * (x - m) / (n - 1);
  CHECK(std::abs(v - 1.0 / 25.0) <= 3.0 * std::sqrt(2.0 / n) / 25.0);
}

TEST_CASE("generate: suppressed noise reproduces the placed filter") {
  // 1x1 activation map, pi = 1: exactly one placement at the origin.
  ModelConfig c = one_layer(3, 4, 1, 3, 4);
  Rng rng = derive_stream(12, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  const auto g = generate(c, dicts, flat_hyper(c, 1e12, 1.0, 1.0), rng);
  const double w = g.states[0].activations[0](0, 0);
  REQUIRE(w != 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(std::abs(g.image(i, j) - w * dicts[0][0].filter[0](i, j)) < 1e-5);
    }
  }
  // Larger map: the image is the hand-placed sum of every active filter.
  ModelConfig c2 = one_layer(10, 9, 2, 3, 2);
  const auto d2 = sample_prior_dictionaries(c2, rng);
  const auto g2 = generate(c2, d2, flat_hyper(c2, 1e12, 1.0, 0.05), rng);
  Plane expect(10, 9);
  for (std::size_t k = 0; k < 2; ++k) {
    const Plane& s = g2.states[0].activations[k];
    for (std::size_t i = 0; i < s.rows(); ++i) {
      for (std::size_t j = 0; j < s.cols(); ++j) {
        for (std::size_t p = 0; p < 3; ++p) {
          for (std::size_t q = 0; q < 2; ++q) {
            expect(i + p, j + q) += s(i, j) * d2[0][k].filter[0](p, q);
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(std::abs(g2.image.values()[i] - expect.values()[i]) < 1e-5);
  }
}

TEST_CASE("generate: block activation rate matches pi") {
  ModelConfig c = one_layer(103, 103, 1, 4, 4);  // 100 x 100 top pixels
  Rng rng = derive_stream(13, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  const double pi = 0.3;
  const auto g = generate(c, dicts, flat_hyper(c, 1.0, 1.0, pi), rng);
  const double n = 1e4;
  const double rate = static_cast<double>(g.states[0].active_count()) / n;
  CHECK(std::abs(rate - pi) <= 3.0 * std::sqrt(pi * (1 - pi) / n));

  // Lower-layer blocks are active exactly where their parent pixel is.
  ModelConfig c2 = two_layer();
  c2.image_rows = 40;
  c2.image_cols = 40;
  const auto d2 = sample_prior_dictionaries(c2, rng);
  std::size_t blocks = 0, active = 0;
  for (int rep = 0; rep < 40; ++rep) {
    const auto g2 = generate(c2, d2, flat_hyper(c2, 1.0, 1.0, pi), rng);
    const auto geo = layer_geometry(c2);
    for (const auto& s : g2.states[0].activations) {
      CHECK(at_most_one_per_block(s, geo[0].blocks));
    }
    for (const auto& s : g2.states[1].activations) {
      for (double v : s.values()) {
        ++blocks;
        active += v != 0.0;
      }
    }
    CHECK_NOTHROW(validate_layer_state(g2.states[0], geo[0]));
  }
  const double r2 = static_cast<double>(active) / static_cast<double>(blocks);
  CHECK(std::abs(r2 - pi) <= 3.0 * std::sqrt(pi * (1 - pi) / static_cast<double>(blocks)));
}

TEST_CASE("generate minus synthesize is noise of variance 1/gamma_e") {
  ModelConfig c = two_layer();
  c.image_rows = 30;
  c.image_cols = 30;
  Rng rng = derive_stream(14, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  const double ge = 40.0;
  double chi2 = 0.0;
  double n = 0.0;
  while (n < 1e4) {
    const auto g = generate(c, dicts, flat_hyper(c, ge, 1.0, 0.2), rng);
    const Plane s = synthesize(g.states, dicts, c);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double r = g.image.values()[i] - s.values()[i];
      chi2 += ge * r * r;
      n += 1.0;
    }
  }
  // Two-sided 1% band of chi^2(n), normal approximation.
  CHECK(std::abs(chi2 - n) <= 2.576 * std::sqrt(2.0 * n));
}

TEST_CASE("synthesize: zero and single-atom cases") {
  ModelConfig c = one_layer(6, 6, 1, 3, 3);
  Rng rng = derive_stream(15, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  const auto geo = layer_geometry(c);
  LayerState st = empty_layer_state(geo[0], 0, 1);
  CHECK(synthesize({st}, dicts, c) == Plane(6, 6));
  st.activations[0](0, 0) = 2.0;
  const Plane out = synthesize({st}, dicts, c);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      const double want = i < 3 && j < 3 ? 2.0 * dicts[0][0].filter[0](i, j) : 0.0;
      CHECK(out(i, j) == doctest::Approx(want).epsilon(1e-14));
    }
  }
}

TEST_CASE("synthesize matches a hand-coded two-layer double sum") {
  const ModelConfig c = two_layer();
  Rng rng = derive_stream(16, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  const auto geo = layer_geometry(c);
  for (int rep = 0; rep < 20; ++rep) {
    const auto g = generate(c, dicts, flat_hyper(c, 1.0, 1.0, 0.4), rng);
    // Layer 2 -> pooled layer-1 maps.
    std::vector<Plane> x1(2, Plane(4, 4));
    for (std::size_t k2 = 0; k2 < 3; ++k2) {
      const Plane& s = g.states[1].activations[k2];
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
          for (std::size_t ch = 0; ch < 2; ++ch)
            for (std::size_t p = 0; p < 2; ++p)
              for (std::size_t q = 0; q < 2; ++q)
                x1[ch](i + p, j + q) += s(i, j) * dicts[1][k2].filter[ch](p, q);
    }
    // Unpool by hand using the positions.
    Plane img(9, 8);
    for (std::size_t k = 0; k < 2; ++k) {
      Plane s1(7, 7);
      for (std::size_t br = 0; br < 4; ++br) {
        for (std::size_t bc = 0; bc < 4; ++bc) {
          const int p = g.states[0].positions[k](br, bc);
          if (p == 0) continue;
          s1(br * 2 + (p - 1) / 2, bc * 2 + (p - 1) % 2) = x1[k](br, bc);
        }
      }
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 7; ++j)
          for (std::size_t p = 0; p < 3; ++p)
            for (std::size_t q = 0; q < 2; ++q)
              img(i + p, j + q) += s1(i, j) * dicts[0][k].filter[0](p, q);
    }
    const Plane out = synthesize(g.states, dicts, c);
    for (std::size_t i = 0; i < img.size(); ++i) {
      CHECK(std::abs(out.values()[i] - img.values()[i]) < 1e-10);
    }
  }
}

TEST_CASE("synthesize rejects positions that disagree with the support") {
  const ModelConfig c = two_layer();
  Rng rng = derive_stream(17, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  auto g = generate(c, dicts, flat_hyper(c, 1.0, 1.0, 0.5), rng);
  // Find an active lower block and move its recorded position.
  bool changed = false;
  for (auto& pos : g.states[0].positions) {
    for (int& p : pos.values()) {
      if (p != 0 && !changed) {
        p = p == 1 ? 2 : 1;
        changed = true;
      }
    }
  }
  REQUIRE(changed);
  CHECK_THROWS_AS(synthesize(g.states, dicts, c), ValidationError);
}

TEST_CASE("log_joint: single-pixel closed form") {
  ModelConfig c = one_layer(1, 1, 1, 1, 1);
  DictionarySet dicts{{DictionaryElement{1, 1, {Plane{{0.7}}}}}};
  const auto geo = layer_geometry(c);
  LayerState st = empty_layer_state(geo[0], 0, 1);
  st.activations[0](0, 0) = -1.3;
  const Hyperstate h{{9.0}, {2.0}, {{0.25}}};
  const double x = 0.4;
  const auto lnorm = [](double v, double mean, double prec) {
    return 0.5 * std::log(prec) - 0.5 * kLog2Pi - 0.5 * prec * (v - mean) * (v - mean);
  };
  const double want = lnorm(0.7, 0.0, 1.0) + std::log(0.25) + lnorm(-1.3, 0.0, 2.0) +
                      lnorm(x, 0.7 * -1.3, 9.0);
  CHECK(std::abs(log_joint(Plane{{x}}, {st}, dicts, h, c) - want) < 1e-10);

  st.activations[0](0, 0) = 0.0;
  const double off = lnorm(0.7, 0.0, 1.0) + std::log(0.75) + lnorm(x, 0.0, 9.0);
  CHECK(std::abs(log_joint(Plane{{x}}, {st}, dicts, h, c) - off) < 1e-10);
}

TEST_CASE("log_joint: identical latent content gives identical values") {
  const ModelConfig c = two_layer();
  Rng rng = derive_stream(18, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  const Hyperstate h = flat_hyper(c, 4.0, 1.0, 0.3);
  const auto g = generate(c, dicts, h, rng);
  auto copy = g.states;
  // A zero entry stays zero whatever weight it "would" have had under z = 0.
  CHECK(log_joint(g.image, g.states, dicts, h, c) ==
        log_joint(g.image, copy, dicts, h, c));
}

TEST_CASE("log_joint: perturbing W away from the conditional mode lowers it") {
  ModelConfig c = one_layer(8, 8, 1, 3, 3);
  Rng rng = derive_stream(19, 0, 0);
  const auto dicts = sample_prior_dictionaries(c, rng);
  const Hyperstate h = flat_hyper(c, 50.0, 1.0, 0.1);
  const auto geo = layer_geometry(c);
  const auto g = generate(c, dicts, h, rng);
  LayerState st = empty_layer_state(geo[0], 0, 1);
  // Fixed overlapping support.
  st.activations[0](1, 1) = 1.0;
  st.activations[0](2, 3) = 1.0;
  st.activations[0](4, 2) = 1.0;
  const Plane& d = dicts[0][0].filter[0];
  const double dd = squared_norm(d);
  // Coordinate ascent on W to the exact conditional mode.
  for (int it = 0; it < 2000; ++it) {
    for (auto [i, j] : {std::pair{1, 1}, std::pair{2, 3}, std::pair{4, 2}}) {
      st.activations[0](i, j) = 0.0;
      const Plane r = [&] {
        Plane x = g.image;
        const Plane s = synthesize({st}, dicts, c);
        for (std::size_t t = 0; t < x.size(); ++t) x.values()[t] -= s.values()[t];
        return x;
      }();
      const double num = h.gamma_e[0] * placed_inner(d, r, i, j);
      st.activations[0](i, j) = num / (h.gamma_w[0] + h.gamma_e[0] * dd);
    }
  }
  const double mode = log_joint(g.image, {st}, dicts, h, c);
  for (int rep = 0; rep < 20; ++rep) {
    LayerState p = st;
    for (auto [i, j] : {std::pair{1, 1}, std::pair{2, 3}, std::pair{4, 2}}) {
      p.activations[0](i, j) += normal(rng, 0.0, 0.05);
    }
    CHECK(log_joint(g.image, {p}, dicts, h, c) < mode);
  }
}

TEST_CASE("layer state validation") {
  const ModelConfig c = two_layer();
  const auto geo = layer_geometry(c);
  LayerState st = empty_layer_state(geo[0], 0, 1);
  st.activations[0](0, 0) = 1.0;
  CHECK_THROWS_AS(validate_layer_state(st, geo[0]), ValidationError);
  st.positions[0](0, 0) = 1;
  CHECK_NOTHROW(validate_layer_state(st, geo[0]));
  st.activations[0](1, 1) = 1.0;
  CHECK_THROWS_AS(validate_layer_state(st, geo[0]), InvariantViolation);
}

TEST_CASE("hyperstate validation") {
  const ModelConfig c = two_layer();
  Hyperstate h = flat_hyper(c, 1.0, 1.0, 0.5);
  CHECK_NOTHROW(h.validate(c));
  h.pi[0][1] = 0.0;
  CHECK_THROWS_AS(h.validate(c), ValidationError);
  CHECK_NOTHROW(h.validate(c, true));
  h.gamma_w[1] = -1.0;
  CHECK_THROWS_AS(h.validate(c, true), ValidationError);
}

TEST_CASE("prior dictionary draws have variance 1/(rows*cols)") {
  ModelConfig c = one_layer(40, 40, 200, 5, 4);
  Rng rng = derive_stream(20, 0, 0);
  const auto d = sample_prior_dictionaries(c, rng);
  double ss = 0.0, n = 0.0;
  for (const auto& e : d[0]) {
    for (double v : e.filter[0].values()) {
      ss += v * v;
      n += 1.0;
    }
  }
  CHECK(std::abs(ss / n - 1.0 / 20.0) < 3.0 * std::sqrt(2.0 / n) / 20.0);
}
