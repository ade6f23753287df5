#include "vglab/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace vg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Potentials + shortest augmenting path over rows = targets, cols = preds
// (n_t <= n_p). Returns col assigned to each row and the total cost.
// Indices are 1-based internally.
std::pair<std::vector<int>, double> solve_min_cost(const std::vector<double>& cost, int n_t,
                                                   int n_p) {
  std::vector<double> u(n_t + 1, 0.0), v(n_p + 1, 0.0);
  std::vector<int> match(n_p + 1, 0), way(n_p + 1, 0);
  for (int i = 1; i <= n_t; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(n_p + 1, kInf);
    std::vector<bool> used(n_p + 1, false);
    do {
      used[j0] = true;
      const int i0 = match[j0];
      int j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n_p; ++j) {
        if (used[j]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * n_p + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n_p; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n_t, -1);
  double total = 0.0;
  for (int j = 1; j <= n_p; ++j) {
    if (match[j] != 0) {
      row_to_col[match[j] - 1] = j - 1;
      total += cost[static_cast<std::size_t>(match[j] - 1) * n_p + (j - 1)];
    }
  }
  return {std::move(row_to_col), total};
}

// cost transposed to target-major [n_t x n_p]
std::vector<double> target_major(const CostMatrix& c) {
  std::vector<double> t(static_cast<std::size_t>(c.cols) * c.rows);
  for (int i = 0; i < c.rows; ++i)
    for (int j = 0; j < c.cols; ++j) t[static_cast<std::size_t>(j) * c.rows + i] = c.at(i, j);
  return t;
}

double sum_in_target_order(const CostMatrix& c, const std::vector<int>& target_to_pred) {
  double s = 0.0;
  for (int j = 0; j < c.cols; ++j) s += c.at(target_to_pred[j], j);
  return s;
}

Assignment finish(const CostMatrix& c, const std::vector<int>& target_to_pred) {
  Assignment a;
  a.total_cost = sum_in_target_order(c, target_to_pred);
  std::vector<bool> used(c.rows, false);
  for (int j = 0; j < c.cols; ++j) {
    a.pairs.emplace_back(target_to_pred[j], j);
    used[target_to_pred[j]] = true;
  }
  for (int i = 0; i < c.rows; ++i)
    if (!used[i]) a.unmatched_predictions.push_back(i);
  return a;
}

}  // namespace

CostMatrix build_cost_matrix(const std::vector<BoxCxCyWh>& pred_boxes,
                             const std::vector<double>& pred_scores,
                             const std::vector<BoxCxCyWh>& gt_boxes, const CostWeights& w) {
  if (pred_boxes.size() != pred_scores.size())
    throw std::invalid_argument("build_cost_matrix: boxes/scores length mismatch");
  if (pred_boxes.empty()) throw std::invalid_argument("build_cost_matrix: need at least one prediction");
  for (double s : pred_scores) {
    if (!(s > 0.0 && s < 1.0))
      throw std::domain_error("build_cost_matrix: score " + std::to_string(s) +
                              " outside open interval (0,1)");
  }
  CostMatrix c;
  c.rows = static_cast<int>(pred_boxes.size());
  c.cols = static_cast<int>(gt_boxes.size());
  c.v.assign(static_cast<std::size_t>(c.rows) * c.cols, 0.0);
  for (int i = 0; i < c.rows; ++i) {
    const double cls = -std::log(pred_scores[i]);
    const BoxXyXy pi = pred_boxes[i].to_xyxy();
    for (int j = 0; j < c.cols; ++j) {
      c.at(i, j) = w.lambda1 * cls + w.lambda2 * l1_box(pred_boxes[i], gt_boxes[j]) +
                   w.lambda3 * (1.0 - giou(pi, gt_boxes[j].to_xyxy()));
    }
  }
  return c;
}

Assignment hungarian(const CostMatrix& cost) {
  if (cost.rows < cost.cols)
    throw std::invalid_argument("hungarian: infeasible, more targets (" +
                                std::to_string(cost.cols) + ") than predictions (" +
                                std::to_string(cost.rows) + ")");
  for (double x : cost.v)
    if (!std::isfinite(x)) throw std::invalid_argument("hungarian: non-finite cost entry");
  Assignment a;
  if (cost.cols == 0) {
    for (int i = 0; i < cost.rows; ++i) a.unmatched_predictions.push_back(i);
    return a;
  }

  const std::vector<double> tm = target_major(cost);
  const double optimal = solve_min_cost(tm, cost.cols, cost.rows).second;
  const double tol = 1e-12 * std::max(1.0, std::fabs(optimal));

  // Canonicalize among optima: targets in order greedily take the lowest
  // prediction index that still admits an optimal completion.
  std::vector<int> pick(cost.cols, -1);
  std::vector<bool> used(cost.rows, false);
  double fixed = 0.0;
  for (int j = 0; j < cost.cols; ++j) {
    const int rem_t = cost.cols - j - 1;
    bool found = false;
    for (int i = 0; i < cost.rows && !found; ++i) {
      if (used[i]) continue;
      double completion = 0.0;
      if (rem_t > 0) {
        std::vector<int> free_preds;
        for (int p = 0; p < cost.rows; ++p)
          if (!used[p] && p != i) free_preds.push_back(p);
        std::vector<double> sub(static_cast<std::size_t>(rem_t) * free_preds.size());
        for (int tj = 0; tj < rem_t; ++tj)
          for (std::size_t pj = 0; pj < free_preds.size(); ++pj)
            sub[static_cast<std::size_t>(tj) * free_preds.size() + pj] =
                cost.at(free_preds[pj], j + 1 + tj);
        completion = solve_min_cost(sub, rem_t, static_cast<int>(free_preds.size())).second;
      }
      if (fixed + cost.at(i, j) + completion <= optimal + tol) {
        pick[j] = i;
        used[i] = true;
        fixed += cost.at(i, j);
        found = true;
      }
    }
    if (!found) throw std::logic_error("hungarian: canonicalization failed to extend assignment");
  }
  return finish(cost, pick);
}

Assignment brute_force_match(const CostMatrix& cost) {
  if (cost.cols > 8)
    throw std::invalid_argument("brute_force_match: refusing " + std::to_string(cost.cols) +
                                " targets (limit 8)");
  if (cost.rows < cost.cols) throw std::invalid_argument("brute_force_match: infeasible");
  Assignment a;
  if (cost.cols == 0) {
    for (int i = 0; i < cost.rows; ++i) a.unmatched_predictions.push_back(i);
    return a;
  }
  std::vector<int> cur(cost.cols, -1), best;
  std::vector<bool> used(cost.rows, false);
  double best_cost = kInf;
  // pass 1: exact minimum cost
  auto rec = [&](auto&& self, int j, double acc) -> void {
    if (j == cost.cols) {
      best_cost = std::min(best_cost, acc);
      return;
    }
    for (int i = 0; i < cost.rows; ++i) {
      if (used[i]) continue;
      used[i] = true;
      self(self, j + 1, acc + cost.at(i, j));
      used[i] = false;
    }
  };
  rec(rec, 0, 0.0);
  // pass 2: lexicographically-first assignment within the same tolerance the
  // Hungarian canonicalization uses, so both solvers return identical pairs
  const double tol = 1e-12 * std::max(1.0, std::fabs(best_cost));
  auto rec2 = [&](auto&& self, int j, double acc) -> bool {
    if (j == cost.cols) return acc <= best_cost + tol;
    for (int i = 0; i < cost.rows; ++i) {
      if (used[i]) continue;
      used[i] = true;
      cur[j] = i;
      if (self(self, j + 1, acc + cost.at(i, j))) return true;
      used[i] = false;
    }
    return false;
  };
  if (!rec2(rec2, 0, 0.0)) throw std::logic_error("brute_force_match: lost the optimum");
  best = cur;
  return finish(cost, best);
}

}  // namespace vg
