// Toy detection network: output shapes and ranges, determinism, query
// permutation equivariance, and the stable parameter enumeration order the
// checkpoint format depends on.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "seqco/model.hpp"
#include "seqco/rng.hpp"

using namespace seqco;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.image_size = 32;
  c.d_model = 16;
  c.heads = 4;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.queries = 6;
  c.proj_dim = 8;
  c.ffn_hidden = 32;
  c.head_hidden = 16;
  return c;
}

Image random_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  Image im = Image::filled(size, size, 0, 0, 0);
  for (auto& v : im.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return im;
}

}  // namespace

TEST_CASE("forward pass produces finite, well-shaped predictions") {
  auto cfg = tiny();
  auto params = init_params<float>(cfg, 3);
  auto pred = model_forward(params, cfg, random_image(32, 4));
  REQUIRE(pred.class_logits.shape() == Shape{6});
  REQUIRE(pred.boxes.shape() == Shape{6, 4});
  REQUIRE(pred.projections.shape() == Shape{6, 8});
  for (float v : pred.class_logits.data()) REQUIRE(std::isfinite(v));
  for (float v : pred.projections.data()) REQUIRE(std::isfinite(v));
  for (float v : pred.boxes.data()) {
    REQUIRE(v > 0.0f);
    REQUIRE(v < 1.0f);
  }
}

TEST_CASE("forward pass is deterministic for fixed params and input") {
  auto cfg = tiny();
  auto params = init_params<float>(cfg, 5);
  auto img = random_image(32, 6);
  auto a = model_forward(params, cfg, img);
  auto b = model_forward(params, cfg, img);
  REQUIRE(a.class_logits.data() == b.class_logits.data());
  REQUIRE(a.boxes.data() == b.boxes.data());
  REQUIRE(a.projections.data() == b.projections.data());
}

TEST_CASE("different init seeds give different parameters") {
  auto cfg = tiny();
  auto a = init_params<float>(cfg, 1);
  auto b = init_params<float>(cfg, 2);
  REQUIRE(a.count() == b.count());
  REQUIRE((a.get("queries").data() != b.get("queries").data()));
  // same seed reproduces exactly
  auto c = init_params<float>(cfg, 1);
  for (const auto& [name, t] : a) REQUIRE(t.data() == c.get(name).data());
}

TEST_CASE("permuting the query embeddings permutes the output sequences") {
  auto cfg = tiny();
  auto params = init_params<double>(cfg, 7);
  auto img = random_image(32, 8);
  auto base = model_forward(params, cfg, img);

  // rotate query rows by one
  auto& q = params.get("queries");
  const int n = cfg.queries, d = cfg.d_model;
  std::vector<double> rotated(q.data().size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      rotated[static_cast<std::size_t>(i * d + j)] = q.data()[static_cast<std::size_t>(((i + 1) % n) * d + j)];
  q.data() = rotated;
  auto perm = model_forward(params, cfg, img);

  for (int i = 0; i < n; ++i) {
    int src = (i + 1) % n;
    REQUIRE_THAT(perm.class_logits.value(i),
                 Catch::Matchers::WithinAbs(base.class_logits.value(src), 1e-9));
    for (int j = 0; j < 4; ++j)
      REQUIRE_THAT(perm.boxes.value(i * 4 + j),
                   Catch::Matchers::WithinAbs(base.boxes.value(src * 4 + j), 1e-9));
    for (int j = 0; j < cfg.proj_dim; ++j)
      REQUIRE_THAT(perm.projections.value(i * cfg.proj_dim + j),
                   Catch::Matchers::WithinAbs(base.projections.value(src * cfg.proj_dim + j), 1e-9));
  }
}

TEST_CASE("parameter enumeration order is stable and complete") {
  auto cfg = tiny();
  auto a = init_params<float>(cfg, 9);
  auto b = init_params<float>(cfg, 10);
  std::vector<std::string> na, nb;
  for (const auto& [name, t] : a) na.push_back(name);
  for (const auto& [name, t] : b) nb.push_back(name);
  REQUIRE(na == nb);
  REQUIRE(na.front() == "stem.conv1.w");
  REQUIRE(a.has("queries"));
  REQUIRE(a.has("head.cls.l2.b"));
  REQUIRE(a.has("dec.0.cross.q.w"));
}

TEST_CASE("scalar prediction view mirrors the tensors") {
  auto cfg = tiny();
  auto params = init_params<float>(cfg, 11);
  auto pred = model_forward(params, cfg, random_image(32, 12));
  auto vals = pred.values();
  REQUIRE(vals.count() == cfg.queries);
  for (int i = 0; i < cfg.queries; ++i) {
    REQUIRE_THAT(vals.fg_logits[static_cast<std::size_t>(i)],
                 Catch::Matchers::WithinAbs(static_cast<double>(pred.class_logits.value(i)), 1e-6));
    double p = vals.fg_prob(i);
    REQUIRE(p > 0.0);
    REQUIRE(p < 1.0);
    REQUIRE_THAT(vals.boxes[static_cast<std::size_t>(i)].cx,
                 Catch::Matchers::WithinAbs(static_cast<double>(pred.boxes.value(i * 4)), 1e-6));
  }
}

TEST_CASE("invalid configurations and inputs are rejected") {
  ModelConfig bad = tiny();
  bad.d_model = 15;  // not divisible by heads
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  auto cfg = tiny();
  auto params = init_params<float>(cfg, 13);
  REQUIRE_THROWS_AS(model_forward(params, cfg, random_image(64, 1)), std::invalid_argument);
}

TEST_CASE("cloned parameter stores detach from the original") {
  auto cfg = tiny();
  auto params = init_params<float>(cfg, 15);
  auto clone = params.clone(false);
  REQUIRE(clone.count() == params.count());
  clone.get("queries").data()[0] += 1.0f;
  REQUIRE(clone.get("queries").value(0) != params.get("queries").value(0));
  REQUIRE_FALSE(clone.get("queries").requires_grad());
}
