#pragma once

// Exact Hungarian assignment (shortest augmenting path with potentials) plus
// the two cost constructions: online queries vs objectness proposals, and
// online vs momentum branch predictions. Targets are columns; an assignment
// maps every target to a distinct query row.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "seqco/geometry.hpp"

namespace seqco {

inline constexpr double kLambdaClassMatch = 2.0;
inline constexpr double kLambdaBoxMatch = 5.0;
inline constexpr double kProbClamp = 1e-8;

class CostMatrix {
 public:
  CostMatrix(int rows, int cols) : rows_(rows), cols_(cols), c_(static_cast<std::size_t>(rows) * cols, 0.0) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("cost matrix: empty dimension");
    if (cols > rows) throw std::invalid_argument("cost matrix: more targets than queries");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  double& at(int r, int c) { return c_[static_cast<std::size_t>(r) * cols_ + c]; }
  double at(int r, int c) const { return c_[static_cast<std::size_t>(r) * cols_ + c]; }

  void validate() const {
    for (double v : c_)
      if (!std::isfinite(v)) throw std::invalid_argument("cost matrix: non-finite entry");
  }

 private:
  int rows_, cols_;
  std::vector<double> c_;
};

// target j -> query index
struct Assignment {
  std::vector<int> target_to_query;

  int size() const { return static_cast<int>(target_to_query.size()); }
  int query_for(int target) const { return target_to_query[static_cast<std::size_t>(target)]; }

  double cost_under(const CostMatrix& c) const {
    double total = 0.0;
    for (int j = 0; j < size(); ++j) total += c.at(query_for(j), j);
    return total;
  }
};

namespace detail {

// Jonker-Volgenant style Hungarian over `cols` targets and `rows` queries,
// cols <= rows. `fixed_query[q]` excludes query rows. Returns per-target
// query or empty on infeasible (cannot happen when enough rows remain).
inline std::vector<int> solve_hungarian(const CostMatrix& c, const std::vector<char>& query_blocked) {
  const int n = c.cols();   // targets, assigned one by one
  const int m = c.rows();   // queries
  const double INF = std::numeric_limits<double>::infinity();
  // 1-based potentials as in the classic formulation
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, INF);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      int i0 = p[static_cast<std::size_t>(j0)], j1 = -1;
      double delta = INF;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)] || query_blocked[static_cast<std::size_t>(j - 1)]) continue;
        double cur = c.at(j - 1, i0 - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> target_to_query(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] != 0)
      target_to_query[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return target_to_query;
}

inline double plain_cost(const CostMatrix& c, const std::vector<int>& t2q) {
  double s = 0.0;
  for (int j = 0; j < static_cast<int>(t2q.size()); ++j) s += c.at(t2q[static_cast<std::size_t>(j)], j);
  return s;
}

}  // namespace detail

// Minimum-cost assignment. Among cost-minimal assignments, returns the
// lexicographically smallest (query index per target, in target order),
// determined by re-solving with prefixes fixed.
inline Assignment hungarian(const CostMatrix& cost) {
  cost.validate();
  const int n = cost.cols(), m = cost.rows();
  std::vector<char> blocked(static_cast<std::size_t>(m), 0);
  auto base = detail::solve_hungarian(cost, blocked);
  const double best = detail::plain_cost(cost, base);
  const double tol = 1e-9 * (1.0 + std::fabs(best));

  // lexicographic tie-break refinement
  std::vector<int> result(static_cast<std::size_t>(n), -1);
  double fixed_cost = 0.0;
  for (int t = 0; t < n; ++t) {
    bool last = (t == n - 1);
    for (int q = 0; q < m; ++q) {
      if (blocked[static_cast<std::size_t>(q)]) continue;
      double cand = fixed_cost + cost.at(q, t);
      if (cand > best + tol) continue;
      if (!last) {
        // cost of the remaining (t+1..n-1) x (unblocked minus q) subproblem
        blocked[static_cast<std::size_t>(q)] = 1;
        CostMatrix rest(m, n - t - 1);
        for (int r = 0; r < m; ++r)
          for (int j = 0; j < n - t - 1; ++j) rest.at(r, j) = cost.at(r, t + 1 + j);
        auto sub = detail::solve_hungarian(rest, blocked);
        cand += detail::plain_cost(rest, sub);
        blocked[static_cast<std::size_t>(q)] = 0;
      }
      if (cand <= best + tol) {
        result[static_cast<std::size_t>(t)] = q;
        blocked[static_cast<std::size_t>(q)] = 1;
        fixed_cost += cost.at(q, t);
        break;
      }
    }
    if (result[static_cast<std::size_t>(t)] < 0) {
      // numerical fallback: keep the unrefined optimum
      return Assignment{base};
    }
  }
  return Assignment{result};
}

inline Assignment one_by_one(int n) {
  if (n < 1) throw std::invalid_argument("one_by_one: n must be >= 1");
  Assignment a;
  a.target_to_query.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) a.target_to_query[static_cast<std::size_t>(i)] = i;
  return a;
}

// Scalar view of one branch's predictions, used for cost construction
// (matching never backpropagates).
struct SeqValues {
  std::vector<double> fg_logits;           // one foreground logit per query
  std::vector<Box> boxes;                  // per-query (cx,cy,w,h)
  std::vector<std::vector<double>> proj;   // per-query projection vector

  int count() const { return static_cast<int>(fg_logits.size()); }
  double fg_prob(int i) const { return 1.0 / (1.0 + std::exp(-fg_logits[static_cast<std::size_t>(i)])); }
};

inline double clamped_log_prob(double p) {
  return std::log(std::clamp(p, kProbClamp, 1.0 - kProbClamp));
}

// entry(i,j) = -2 log p_fg(i) + 5 L_box(box_i, proposal_j); all proposals are
// foreground targets. Empty proposal lists must be handled by the caller.
inline CostMatrix build_rps_cost(const SeqValues& pred, const std::vector<Box>& proposals) {
  if (proposals.empty()) throw std::invalid_argument("build_rps_cost: no targets");
  if (static_cast<int>(proposals.size()) > pred.count())
    throw std::invalid_argument("build_rps_cost: more proposals than queries");
  CostMatrix c(pred.count(), static_cast<int>(proposals.size()));
  for (int i = 0; i < pred.count(); ++i) {
    double cls = -kLambdaClassMatch * clamped_log_prob(pred.fg_prob(i));
    for (int j = 0; j < c.cols(); ++j)
      c.at(i, j) = cls + kLambdaBoxMatch * box_distance(pred.boxes[static_cast<std::size_t>(i)],
                                                        proposals[static_cast<std::size_t>(j)]);
  }
  return c;
}

// Momentum predictions are the targets; their class is discretized at
// fg prob >= 0.5. entry(i,j) = -2 log p_online,i(c_j) + [c_j=fg] 5 L_box.
inline CostMatrix build_branch_cost(const SeqValues& online, const SeqValues& momentum) {
  if (online.count() != momentum.count())
    throw std::invalid_argument("build_branch_cost: branch query counts differ (" +
                                std::to_string(online.count()) + " vs " + std::to_string(momentum.count()) + ")");
  const int n = online.count();
  CostMatrix c(n, n);
  for (int j = 0; j < n; ++j) {
    bool fg = momentum.fg_prob(j) >= 0.5;
    for (int i = 0; i < n; ++i) {
      double p = online.fg_prob(i);
      double cls = -kLambdaClassMatch * clamped_log_prob(fg ? p : 1.0 - p);
      double box = fg ? kLambdaBoxMatch * box_distance(momentum.boxes[static_cast<std::size_t>(j)],
                                                       online.boxes[static_cast<std::size_t>(i)])
                      : 0.0;
      c.at(i, j) = cls + box;
    }
  }
  return c;
}

}  // namespace seqco
