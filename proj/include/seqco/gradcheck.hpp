#pragma once

// Finite-difference verification of the full training objective in double
// precision: every parameter scalar of the online network is perturbed and
// the central difference is compared against the reverse-mode gradient.

#include <cmath>
#include <string>

#include "seqco/model.hpp"
#include "seqco/objective.hpp"
#include "seqco/rng.hpp"

namespace seqco {

struct GradcheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  std::int64_t checked = 0;
  bool pass(double tol = 1e-4) const { return max_rel_err <= tol; }
};

struct GradcheckSetup {
  ModelConfig model;
  std::vector<Box> proposals;
  std::uint64_t seed = 7;
  double h = 1e-5;
  int stride = 1;  // check every stride-th scalar

  static GradcheckSetup standard() {
    GradcheckSetup s;
    s.model.image_size = 32;
    s.model.d_model = 16;
    s.model.heads = 4;
    s.model.enc_layers = 1;
    s.model.dec_layers = 1;
    s.model.queries = 4;
    s.model.proj_dim = 8;
    s.model.ffn_hidden = 32;
    s.model.head_hidden = 16;
    s.proposals = {{0.3, 0.35, 0.25, 0.3}, {0.7, 0.6, 0.3, 0.25}};
    return s;
  }
};

namespace detail {

inline Tensor<double> random_image_tensor(int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(3) * size * size);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor<double>::from({3, size, size}, std::move(v));
}

}  // namespace detail

inline GradcheckResult gradcheck_total_loss(const GradcheckSetup& setup) {
  const auto& cfg = setup.model;
  LossWeights w;
  auto online = init_params<double>(cfg, setup.seed);
  auto momentum = init_params<double>(cfg, mix64(setup.seed, 9)).clone(/*requires_grad=*/false);
  auto img1 = detail::random_image_tensor(cfg.image_size, mix64(setup.seed, 21));
  auto img2 = detail::random_image_tensor(cfg.image_size, mix64(setup.seed, 22));

  SequencePrediction<double> momentum_pred;
  {
    NoGrad guard;
    momentum_pred = model_forward(momentum, cfg, img1);
  }
  auto eval = [&]() {
    auto pred = model_forward(online, cfg, img2);
    return total_loss(pred, momentum_pred, setup.proposals, w);
  };

  auto loss = eval();
  backward(loss.total);

  GradcheckResult res;
  for (auto& [name, p] : online) {
    auto& data = p.data();
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(setup.stride)) {
      double saved = data[i];
      data[i] = saved + setup.h;
      double fp;
      {
        NoGrad guard;
        fp = eval().value;
      }
      data[i] = saved - setup.h;
      double fm;
      {
        NoGrad guard;
        fm = eval().value;
      }
      data[i] = saved;
      double numeric = (fp - fm) / (2.0 * setup.h);
      double analytic = p.grad(static_cast<std::int64_t>(i));
      double rel = std::fabs(numeric - analytic) /
                   std::max({1e-3, std::fabs(numeric), std::fabs(analytic)});
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
        res.worst_index = static_cast<std::int64_t>(i);
      }
    }
  }
  return res;
}

}  // namespace seqco
