#pragma once

// Training losses: sigmoid focal classification against matched proposals,
// L1 + GIoU box regression, the matched-sequence similarity loss (L2 or L1),
// the weighted total, and the EMA momentum update.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "seqco/geometry.hpp"
#include "seqco/matching.hpp"
#include "seqco/model.hpp"
#include "seqco/tensor.hpp"

namespace seqco {

struct LossWeights {
  double lambda_f = 2.0;
  double lambda_b = 5.0;
  double lambda_e = 10.0;
  double lambda_cm = 2.0;
  double lambda_bm = 5.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double giou_sub_weight = 0.4;
};

struct EmaConfig {
  double beta = 0.996;
};

enum class SimilarityKind { kL2, kL1 };

inline SimilarityKind parse_similarity(const std::string& s) {
  if (s == "l2" || s == "L2") return SimilarityKind::kL2;
  if (s == "l1" || s == "L1") return SimilarityKind::kL1;
  throw std::invalid_argument("unknown similarity kind: " + s);
}

namespace detail {
// numerical floor under logs; sigmoid outputs can saturate in 32-bit
template <class T>
constexpr T prob_eps() {
  return std::is_same_v<T, float> ? T(1e-7) : T(1e-12);
}
}  // namespace detail

// Per-query binary focal loss; target 1 for queries matched to a proposal.
// Sum over queries, normalized by max(1, #positives).
template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, const std::vector<int>& matched_queries, double alpha = 0.25,
                     double gamma = 2.0) {
  const int n = logits.dim(0);
  std::vector<T> target(static_cast<std::size_t>(n), T(0));
  for (int q : matched_queries) {
    if (q < 0 || q >= n) throw std::invalid_argument("focal_loss: matched query index out of range");
    target[static_cast<std::size_t>(q)] = T(1);
  }
  auto t = Tensor<T>::from({n}, std::move(target));
  auto one_minus_t = Tensor<T>::from({n}, [&] {
    std::vector<T> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = T(1) - t.value(i);
    return v;
  }());
  auto p = sigmoid(logits);
  // p_t = t*p + (1-t)*(1-p)
  auto p_t = add(mul(t, p), mul(one_minus_t, add_scalar(neg(p), T(1))));
  const T eps = detail::prob_eps<T>();
  p_t = clamp(p_t, eps, T(1) - eps);
  // alpha < 0 disables the alpha weighting (alpha_t = 1)
  std::vector<T> alpha_t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    alpha_t[static_cast<std::size_t>(i)] =
        alpha < 0 ? T(1) : (t.value(i) > T(0.5) ? static_cast<T>(alpha) : static_cast<T>(1.0 - alpha));
  auto a_t = Tensor<T>::from({n}, std::move(alpha_t));
  auto focal = mul(a_t, mul(power(add_scalar(neg(p_t), T(1)), static_cast<T>(gamma)), neg(log(p_t))));
  const T norm = T(1) / static_cast<T>(std::max<std::size_t>(1, matched_queries.size()));
  return mul_scalar(sum(focal), norm);
}

// Mean over matched pairs of L1 + giou_sub_weight * (1 - GIoU); zero when
// nothing is matched.
template <class T>
Tensor<T> box_loss(const Tensor<T>& pred_boxes, const std::vector<Box>& targets, const Assignment& matched,
                   double giou_sub_weight = kGiouSubWeight) {
  if (matched.size() == 0) return Tensor<T>::scalar(T(0));
  if (static_cast<int>(targets.size()) != matched.size())
    throw std::invalid_argument("box_loss: target/assignment size mismatch");
  std::vector<int> rows(static_cast<std::size_t>(matched.size()));
  std::vector<T> tgt(static_cast<std::size_t>(matched.size()) * 4);
  for (int j = 0; j < matched.size(); ++j) {
    rows[static_cast<std::size_t>(j)] = matched.query_for(j);
    const Box& b = targets[static_cast<std::size_t>(j)];
    tgt[static_cast<std::size_t>(j) * 4 + 0] = static_cast<T>(b.cx);
    tgt[static_cast<std::size_t>(j) * 4 + 1] = static_cast<T>(b.cy);
    tgt[static_cast<std::size_t>(j) * 4 + 2] = static_cast<T>(b.w);
    tgt[static_cast<std::size_t>(j) * 4 + 3] = static_cast<T>(b.h);
  }
  auto pred = gather_rows(pred_boxes, rows);  // [M, 4]
  auto target = Tensor<T>::from({matched.size(), 4}, std::move(tgt));
  // per-pair L1 summed over coords, averaged over pairs == sum(|diff|)/M
  auto l1 = mul_scalar(sum(abs(sub(pred, target))), T(1) / static_cast<T>(matched.size()));
  auto g = giou_rows(pred, target);  // [M]
  auto giou_term = mul_scalar(sum(add_scalar(neg(g), T(1))), T(1) / static_cast<T>(matched.size()));
  return add(l1, mul_scalar(giou_term, static_cast<T>(giou_sub_weight)));
}

// Momentum projections are constants (detached); assignment maps momentum
// row i to online row. Sum over feature dim per pair, mean over pairs.
template <class T>
Tensor<T> similarity_loss(const Tensor<T>& z_momentum, const Tensor<T>& z_online, const Assignment& assignment,
                          SimilarityKind kind = SimilarityKind::kL2) {
  const int n = z_momentum.dim(0);
  if (assignment.size() != n)
    throw std::invalid_argument("similarity_loss: assignment must be a full permutation over " +
                                std::to_string(n) + " sequences");
  if (z_online.dim(0) != n || z_online.dim(1) != z_momentum.dim(1))
    throw std::invalid_argument("similarity_loss: projection shapes disagree");
  std::vector<int> rows(static_cast<std::size_t>(n));
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    int q = assignment.query_for(i);
    if (q < 0 || q >= n || used[static_cast<std::size_t>(q)])
      throw std::invalid_argument("similarity_loss: assignment is not a permutation");
    used[static_cast<std::size_t>(q)] = 1;
    rows[static_cast<std::size_t>(i)] = q;
  }
  auto zo = gather_rows(z_online, rows);
  auto diff = sub(zo, z_momentum.detach());
  auto per_elem = kind == SimilarityKind::kL2 ? mul(diff, diff) : abs(diff);
  return mul_scalar(sum(per_elem), T(1) / static_cast<T>(n));
}

template <class T>
struct TotalLoss {
  Tensor<T> total;
  double focal = 0, box = 0, similarity = 0;
  double rps = 0;    // lambda_f * focal + lambda_b * box
  double value = 0;  // total
  Assignment rps_assignment;   // proposal -> online query
  Assignment ssl_assignment;   // momentum row -> online query
  int n_matched = 0;
};

// Eq-5-shaped total: RPS terms matched against proposals, SSL term matched
// across branches. Momentum predictions must come from a no-grad forward.
template <class T>
TotalLoss<T> total_loss(const SequencePrediction<T>& online, const SequencePrediction<T>& momentum,
                        const std::vector<Box>& proposals, const LossWeights& w,
                        SimilarityKind kind = SimilarityKind::kL2) {
  if (static_cast<int>(proposals.size()) > online.count())
    throw std::invalid_argument("total_loss: more proposals than queries");
  TotalLoss<T> out;
  SeqValues online_vals = online.values();

  std::vector<int> matched_queries;
  Tensor<T> box_term = Tensor<T>::scalar(T(0));
  if (!proposals.empty()) {
    out.rps_assignment = hungarian(build_rps_cost(online_vals, proposals));
    for (int j = 0; j < out.rps_assignment.size(); ++j)
      matched_queries.push_back(out.rps_assignment.query_for(j));
    box_term = box_loss(online.boxes, proposals, out.rps_assignment, w.giou_sub_weight);
  }
  out.n_matched = static_cast<int>(matched_queries.size());
  auto focal_term = focal_loss(online.class_logits, matched_queries, w.focal_alpha, w.focal_gamma);

  out.ssl_assignment = hungarian(build_branch_cost(online_vals, momentum.values()));
  auto sim_term = similarity_loss(momentum.projections, online.projections, out.ssl_assignment, kind);

  out.focal = static_cast<double>(focal_term.value());
  out.box = static_cast<double>(box_term.value());
  out.similarity = static_cast<double>(sim_term.value());
  out.rps = w.lambda_f * out.focal + w.lambda_b * out.box;
  out.total = add(add(mul_scalar(focal_term, static_cast<T>(w.lambda_f)),
                      mul_scalar(box_term, static_cast<T>(w.lambda_b))),
                  mul_scalar(sim_term, static_cast<T>(w.lambda_e)));
  out.value = static_cast<double>(out.total.value());
  return out;
}

// theta_m <- beta * theta_m + (1 - beta) * theta_o, elementwise
template <class T>
void ema_update(ParamStore<T>& momentum, const ParamStore<T>& online, double beta) {
  if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("ema_update: beta out of [0,1]");
  if (momentum.count() != online.count()) throw std::invalid_argument("ema_update: parameter count mismatch");
  const T b = static_cast<T>(beta);
  for (auto& [name, t] : momentum) {
    const Tensor<T>& o = online.get(name);
    if (t.shape() != o.shape()) throw std::invalid_argument("ema_update: shape mismatch for " + name);
    auto& md = t.data();
    const auto& od = o.data();
    for (std::size_t i = 0; i < md.size(); ++i) md[i] = b * md[i] + (T(1) - b) * od[i];
  }
}

}  // namespace seqco
