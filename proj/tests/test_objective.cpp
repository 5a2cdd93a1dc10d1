// Training losses: closed-form focal values, BCE degeneration, scalar oracles
// for the box and similarity terms, the weighted total, the stop-gradient on
// the momentum branch, and EMA exactness.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "seqco/model.hpp"
#include "seqco/objective.hpp"
#include "seqco/rng.hpp"

using namespace seqco;

TEST_CASE("focal loss matches hand-computed values at p = 0.5") {
  // logits 0 -> p = 0.5; positive and negative both give (1-p_t)^2 = 0.25, -log p_t = ln 2
  auto logits = Tensor<double>::from({2}, {0.0, 0.0}, true);
  auto loss = focal_loss(logits, {0}, 0.25, 2.0);
  double expect = (0.25 * 0.25 * std::log(2.0) + 0.75 * 0.25 * std::log(2.0)) / 1.0;
  REQUIRE_THAT(loss.value(), Catch::Matchers::WithinAbs(expect, 1e-12));
}

TEST_CASE("focal loss normalizes by the positive count") {
  auto logits = Tensor<double>::from({4}, {0.0, 0.0, 0.0, 0.0});
  double one = focal_loss(logits, {0}).value();
  double two = focal_loss(logits, {0, 1}).value();
  // four identical queries: per-query focal value f; one positive -> 4f/1, two -> (2*0.25 + 2*0.75)*c/2
  double c = 0.25 * std::log(2.0);
  REQUIRE_THAT(one, Catch::Matchers::WithinAbs((0.25 + 3 * 0.75) * c, 1e-12));
  REQUIRE_THAT(two, Catch::Matchers::WithinAbs((2 * 0.25 + 2 * 0.75) * c / 2, 1e-12));
  // empty match list: all background, normalizer clamps to 1
  double none = focal_loss(logits, {}).value();
  REQUIRE_THAT(none, Catch::Matchers::WithinAbs(4 * 0.75 * c, 1e-12));
}

TEST_CASE("focal loss with gamma 0 and disabled alpha reduces to cross-entropy") {
  auto logits = Tensor<double>::from({3}, {0.4, -1.2, 2.0});
  auto loss = focal_loss(logits, {2}, /*alpha=*/-1.0, /*gamma=*/0.0);
  auto p = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  double bce = -std::log(1 - p(0.4)) - std::log(1 - p(-1.2)) - std::log(p(2.0));
  REQUIRE_THAT(loss.value(), Catch::Matchers::WithinAbs(bce, 1e-9));
}

TEST_CASE("focal loss rejects out-of-range query indices") {
  auto logits = Tensor<double>::from({2}, {0.0, 0.0});
  REQUIRE_THROWS_AS(focal_loss(logits, {2}), std::invalid_argument);
}

TEST_CASE("box loss recomputes from scalar distances") {
  std::vector<double> pv = {0.3, 0.3, 0.2, 0.2, 0.6, 0.6, 0.3, 0.3, 0.5, 0.5, 0.1, 0.1};
  auto pred = Tensor<double>::from({3, 4}, pv, true);
  std::vector<Box> targets = {{0.35, 0.25, 0.2, 0.25}, {0.55, 0.6, 0.25, 0.3}};
  Assignment a{{2, 0}};  // target 0 -> query 2, target 1 -> query 0
  double expect = 0.0;
  Box q2{0.5, 0.5, 0.1, 0.1}, q0{0.3, 0.3, 0.2, 0.2};
  expect += l1_distance(q2, targets[0]) + 0.4 * (1 - giou(q2, targets[0]));
  expect += l1_distance(q0, targets[1]) + 0.4 * (1 - giou(q0, targets[1]));
  expect /= 2;
  auto loss = box_loss(pred, targets, a);
  // the tensor path guards GIoU denominators with a tiny epsilon
  REQUIRE_THAT(loss.value(), Catch::Matchers::WithinAbs(expect, 1e-6));
  // gradient reaches only matched rows
  backward(loss);
  bool row1_zero = true;
  for (int j = 0; j < 4; ++j) row1_zero = row1_zero && pred.grad(4 + j) == 0.0;
  REQUIRE(row1_zero);
  REQUIRE(pred.grad(0) != 0.0);

  Assignment empty{{}};
  REQUIRE(box_loss(pred, {}, empty).value() == 0.0);
}

TEST_CASE("similarity loss matches the scalar oracle for L2 and L1") {
  Rng rng(5);
  const int n = 3, d = 4;
  std::vector<double> zm(n * d), zo(n * d);
  for (auto& v : zm) v = rng.uniform(-1, 1);
  for (auto& v : zo) v = rng.uniform(-1, 1);
  auto z_momentum = Tensor<double>::from({n, d}, zm);
  auto z_online = Tensor<double>::from({n, d}, zo, true);
  Assignment a{{1, 2, 0}};
  double l2 = 0, l1 = 0;
  for (int i = 0; i < n; ++i) {
    int q = a.query_for(i);
    for (int j = 0; j < d; ++j) {
      double t = zo[static_cast<std::size_t>(q * d + j)] - zm[static_cast<std::size_t>(i * d + j)];
      l2 += t * t;
      l1 += std::fabs(t);
    }
  }
  REQUIRE_THAT(similarity_loss(z_momentum, z_online, a, SimilarityKind::kL2).value(),
               Catch::Matchers::WithinAbs(l2 / n, 1e-12));
  REQUIRE_THAT(similarity_loss(z_momentum, z_online, a, SimilarityKind::kL1).value(),
               Catch::Matchers::WithinAbs(l1 / n, 1e-12));
  // non-permutations are rejected
  REQUIRE_THROWS_AS(similarity_loss(z_momentum, z_online, Assignment{{0, 0, 1}}, SimilarityKind::kL2),
                    std::invalid_argument);
}

TEST_CASE("similarity loss sends no gradient into the momentum projections") {
  auto z_momentum = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto z_online = Tensor<double>::from({2, 3}, {0, 0, 0, 1, 1, 1}, true);
  auto loss = similarity_loss(z_momentum, z_online, Assignment{{0, 1}});
  backward(loss);
  REQUIRE_FALSE(z_momentum.has_grad());
  REQUIRE(z_online.has_grad());
}

TEST_CASE("total loss combines the three terms with the default weights") {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.d_model = 16;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.queries = 5;
  cfg.proj_dim = 8;
  cfg.ffn_hidden = 32;
  cfg.head_hidden = 16;
  auto online_params = init_params<double>(cfg, 1);
  auto momentum_params = init_params<double>(cfg, 2).clone(false);
  Rng rng(3);
  Image img = Image::filled(32, 32, 0, 0, 0);
  for (auto& v : img.v) v = static_cast<float>(rng.uniform(0.0, 1.0));

  SequencePrediction<double> momentum_pred;
  {
    NoGrad guard;
    momentum_pred = model_forward(momentum_params, cfg, img);
  }
  auto online_pred = model_forward(online_params, cfg, img);
  std::vector<Box> proposals = {{0.4, 0.4, 0.2, 0.3}, {0.7, 0.6, 0.2, 0.2}};
  LossWeights w;
  auto loss = total_loss(online_pred, momentum_pred, proposals, w);

  REQUIRE(loss.n_matched == 2);
  REQUIRE_THAT(loss.value,
               Catch::Matchers::WithinAbs(2.0 * loss.focal + 5.0 * loss.box + 10.0 * loss.similarity, 1e-7));
  REQUIRE_THAT(loss.rps, Catch::Matchers::WithinAbs(2.0 * loss.focal + 5.0 * loss.box, 1e-12));

  // backward fills online grads and leaves the momentum branch untouched
  backward(loss.total);
  bool any_online = false;
  for (const auto& [name, p] : online_params) any_online = any_online || p.has_grad();
  REQUIRE(any_online);
  for (const auto& [name, p] : momentum_params) REQUIRE_FALSE(p.has_grad());

  // with no proposals only focal (all background) and similarity remain
  auto no_props = total_loss(online_pred, momentum_pred, {}, w);
  REQUIRE(no_props.n_matched == 0);
  REQUIRE(no_props.box == 0.0);
}

TEST_CASE("default weights are the adopted constants") {
  LossWeights w;
  REQUIRE(w.lambda_f == 2.0);
  REQUIRE(w.lambda_b == 5.0);
  REQUIRE(w.lambda_e == 10.0);
  REQUIRE(w.lambda_cm == 2.0);
  REQUIRE(w.lambda_bm == 5.0);
  REQUIRE(EmaConfig{}.beta == 0.996);
  REQUIRE(kLambdaClassMatch == 2.0);
  REQUIRE(kLambdaBoxMatch == 5.0);
}

TEST_CASE("EMA update is exact for boundary and interior decay values") {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.d_model = 16;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.queries = 4;
  cfg.proj_dim = 8;
  cfg.ffn_hidden = 32;
  cfg.head_hidden = 16;
  auto online = init_params<double>(cfg, 21);
  auto momentum = init_params<double>(cfg, 22).clone(false);
  auto before = momentum.clone(false);

  SECTION("beta 1 freezes the momentum branch") {
    ema_update(momentum, online, 1.0);
    for (const auto& [name, p] : momentum) REQUIRE(p.data() == before.get(name).data());
  }
  SECTION("beta 0 copies the online branch") {
    ema_update(momentum, online, 0.0);
    for (const auto& [name, p] : momentum) REQUIRE(p.data() == online.get(name).data());
  }
  SECTION("beta 0.5 is the exact midpoint") {
    ema_update(momentum, online, 0.5);
    for (const auto& [name, p] : momentum)
      for (std::size_t i = 0; i < p.data().size(); ++i)
        REQUIRE_THAT(p.value(static_cast<std::int64_t>(i)),
                     Catch::Matchers::WithinAbs(
                         0.5 * before.get(name).value(static_cast<std::int64_t>(i)) +
                             0.5 * online.get(name).value(static_cast<std::int64_t>(i)),
                         1e-15));
  }
  SECTION("out-of-range beta is rejected") {
    REQUIRE_THROWS_AS(ema_update(momentum, online, 1.5), std::invalid_argument);
  }
}
