#include "vglab/metrics.hpp"

#include <stdexcept>

namespace vg {

std::vector<ScoredBox> filter_predictions(const std::vector<ScoredBox>& preds,
                                          const EvalConfig& cfg) {
  std::vector<ScoredBox> out;
  for (const ScoredBox& p : preds)
    if (p.score >= cfg.score_threshold) out.push_back(p);
  return out;
}

double prec_at_05(const std::vector<BoxCxCyWh>& predictions, const std::vector<BoxCxCyWh>& gts) {
  if (predictions.size() != gts.size())
    throw std::invalid_argument("prec_at_05: prediction/gt counts differ");
  if (predictions.empty()) throw std::invalid_argument("prec_at_05: empty sample set");
  int correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (iou(predictions[i].to_xyxy(), gts[i].to_xyxy()) > 0.5) ++correct;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

SampleF1 grec_f1_sample(const std::vector<ScoredBox>& preds, const std::vector<BoxCxCyWh>& gts,
                        double iou_threshold) {
  SampleF1 r;
  if (gts.empty()) {
    r.f1 = preds.empty() ? 1.0 : 0.0;
    r.fp = static_cast<int>(preds.size());
    return r;
  }
  std::vector<bool> claimed(preds.size(), false);
  for (const BoxCxCyWh& gt : gts) {
    const BoxXyXy g = gt.to_xyxy();
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (claimed[i]) continue;
      const double v = iou(preds[i].box.to_xyxy(), g);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(i);
      }
    }
    if (best >= 0) {
      claimed[best] = true;
      ++r.tp;
    } else {
      ++r.fn;
    }
  }
  for (bool c : claimed)
    if (!c) ++r.fp;
  r.f1 = 2.0 * r.tp / (2.0 * r.tp + r.fn + r.fp);
  return r;
}

double grec_precision(const std::vector<SampleF1>& results) {
  if (results.empty()) throw std::invalid_argument("grec_precision: empty result set");
  int perfect = 0;
  for (const SampleF1& r : results)
    if (r.perfect()) ++perfect;
  return static_cast<double>(perfect) / static_cast<double>(results.size());
}

double n_acc(const std::vector<int>& prediction_counts) {
  if (prediction_counts.empty())
    throw std::invalid_argument("n_acc: undefined on an empty no-target subset");
  int tp = 0;
  for (int c : prediction_counts)
    if (c == 0) ++tp;
  return static_cast<double>(tp) / static_cast<double>(prediction_counts.size());
}

}  // namespace vg
