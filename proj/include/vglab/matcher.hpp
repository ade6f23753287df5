#pragma once

// Prediction-to-target assignment: the three-part matching cost and an exact
// Hungarian solver, plus the exhaustive oracle used to cross-check it.

#include <utility>
#include <vector>

#include "vglab/box.hpp"

namespace vg {

// class / L1 / GIoU weights of both the matching cost and the detection loss
struct CostWeights {
  double lambda1 = 1.0;
  double lambda2 = 5.0;
  double lambda3 = 2.0;
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction index, target index), one per target
  double total_cost = 0.0;
  std::vector<int> unmatched_predictions;
};

// rows = predictions, cols = targets; cols may be zero
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;  // row-major
  double& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }
};

// cost[i][j] = l1 * (-log score_i) + l2 * l1_box(pred_i, gt_j) + l3 * (1 - giou(pred_i, gt_j))
CostMatrix build_cost_matrix(const std::vector<BoxCxCyWh>& pred_boxes,
                             const std::vector<double>& pred_scores,
                             const std::vector<BoxCxCyWh>& gt_boxes, const CostWeights& w);

// Minimum-cost injective assignment of every target to a distinct prediction.
// Requires rows >= cols; among equal-cost optima returns the one whose
// per-target prediction indices are lexicographically smallest.
Assignment hungarian(const CostMatrix& cost);

// Exhaustive minimum over all injections; cols <= 8. Same tie rule.
Assignment brute_force_match(const CostMatrix& cost);

}  // namespace vg
