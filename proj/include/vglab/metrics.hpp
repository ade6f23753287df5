#pragma once

// REC / generalized-REC evaluation: score-threshold filtering, Prec@0.5,
// per-sample F1 under greedy gt-major matching, and no-target accuracy.

#include <utility>
#include <vector>

#include "vglab/box.hpp"

namespace vg {

struct EvalConfig {
  double iou_threshold = 0.5;
  double score_threshold = 0.7;
};

struct ScoredBox {
  BoxCxCyWh box;
  double score = 0.0;  // sigmoid probability
};

// order-preserving; boundary scores are kept (>=)
std::vector<ScoredBox> filter_predictions(const std::vector<ScoredBox>& preds,
                                          const EvalConfig& cfg);

// single-target precision; correct iff IoU strictly exceeds 0.5
double prec_at_05(const std::vector<BoxCxCyWh>& predictions, const std::vector<BoxCxCyWh>& gts);

struct SampleF1 {
  double f1 = 0.0;
  int tp = 0, fp = 0, fn = 0;
  bool perfect() const { return fp == 0 && fn == 0; }
};

// Greedy gt-major matching: ground truths in order each claim the
// highest-IoU remaining prediction at or above the threshold (ties to the
// lowest prediction index). Unclaimed predictions are FP, unclaimed ground
// truths FN. A no-target sample scores 1 iff there are no predictions.
SampleF1 grec_f1_sample(const std::vector<ScoredBox>& preds, const std::vector<BoxCxCyWh>& gts,
                        double iou_threshold);

// fraction of samples with a perfect F1
double grec_precision(const std::vector<SampleF1>& results);

// fraction of no-target samples with zero post-filter predictions; the
// subset must be non-empty
double n_acc(const std::vector<int>& prediction_counts);

}  // namespace vg
