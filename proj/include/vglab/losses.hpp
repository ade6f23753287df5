#pragma once

// Detection loss on matched pairs, the confidence-weighted distillation loss
// with its dynamic teacher/ground-truth balance, and the combined training
// objective. Matching runs outside the gradient graph; losses are then built
// on the graph from the matched pairs.

#include <optional>
#include <vector>

#include "vglab/matcher.hpp"
#include "vglab/model.hpp"
#include "vglab/tensor.hpp"

namespace vg {

struct LossWeights {
  double lambda1 = 1.0;  // classification
  double lambda2 = 5.0;  // L1
  double lambda3 = 2.0;  // GIoU
  double gamma1 = 2.0;   // teacher-guided distillation term
  double gamma2 = 1.0;   // ground-truth term
};

struct DistillRecord {
  long long step = 0;
  double w_dt = 0.0;
  double w_gt = 1.0;
  double loss_det = 0.0;
  double loss_dwbd = 0.0;
};

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int>& rows) {
  return embedding(a, rows);
}

// differentiable GIoU for row-aligned box pairs; both [M x 4] cxcywh,
// returns [M x 1]
template <typename T>
Tensor<T> giou_pairs(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape != target.shape || pred.cols() != 4)
    throw std::invalid_argument("giou_pairs: expects matching [M x 4] operands");
  const T eps = T(1e-9);
  auto corners = [](const Tensor<T>& b, Tensor<T>& x1, Tensor<T>& y1, Tensor<T>& x2, Tensor<T>& y2,
                    Tensor<T>& area) {
    Tensor<T> cx = slice_cols(b, 0, 1), cy = slice_cols(b, 1, 2);
    Tensor<T> w = slice_cols(b, 2, 3), h = slice_cols(b, 3, 4);
    Tensor<T> hw = scale(w, T(0.5)), hh = scale(h, T(0.5));
    x1 = sub(cx, hw);
    x2 = add(cx, hw);
    y1 = sub(cy, hh);
    y2 = add(cy, hh);
    area = mul(w, h);
  };
  Tensor<T> px1, py1, px2, py2, pa, tx1, ty1, tx2, ty2, ta;
  corners(pred, px1, py1, px2, py2, pa);
  corners(target, tx1, ty1, tx2, ty2, ta);
  Tensor<T> iw = relu(sub(minimum(px2, tx2), maximum(px1, tx1)));
  Tensor<T> ih = relu(sub(minimum(py2, ty2), maximum(py1, ty1)));
  Tensor<T> inter = mul(iw, ih);
  Tensor<T> uni = sub(add(pa, ta), inter);
  Tensor<T> iou_v = div(inter, add_const(uni, eps));
  Tensor<T> ew = sub(maximum(px2, tx2), minimum(px1, tx1));
  Tensor<T> eh = sub(maximum(py2, ty2), minimum(py1, ty1));
  Tensor<T> enclose = mul(ew, eh);
  return sub(iou_v, div(sub(enclose, uni), add_const(enclose, eps)));
}

namespace detail {

template <typename T>
Tensor<T> boxes_const(const std::vector<BoxCxCyWh>& boxes) {
  std::vector<T> v;
  v.reserve(boxes.size() * 4);
  for (const BoxCxCyWh& b : boxes) {
    v.push_back(static_cast<T>(b.cx));
    v.push_back(static_cast<T>(b.cy));
    v.push_back(static_cast<T>(b.w));
    v.push_back(static_cast<T>(b.h));
  }
  return Tensor<T>::from({static_cast<int>(boxes.size()), 4}, std::move(v));
}

// classification over every query plus L1/GIoU over row-paired boxes
template <typename T>
Tensor<T> det_loss_core(const BranchOutput<T>& pred, const Tensor<T>& labels,
                        const std::vector<int>& matched_pred_rows,
                        const Tensor<T>& matched_targets, const LossWeights& w) {
  Tensor<T> total = scale(mean(bce_with_logits(pred.score_logits, labels)),
                          static_cast<T>(w.lambda1));
  const int m = static_cast<int>(matched_pred_rows.size());
  if (m > 0) {
    Tensor<T> mp = gather_rows(pred.boxes, matched_pred_rows);
    Tensor<T> l1 = scale(sum(vg::abs(sub(mp, matched_targets))), static_cast<T>(w.lambda2 / m));
    Tensor<T> gv = giou_pairs(mp, matched_targets);
    Tensor<T> gl = scale(sum(add_const(scale(gv, T(-1)), T(1))), static_cast<T>(w.lambda3 / m));
    total = add(add(total, l1), gl);
  }
  return total;
}

}  // namespace detail

// validates the assignment against the prediction/target sets
template <typename T>
Tensor<T> det_loss(const BranchOutput<T>& pred, const std::vector<BoxCxCyWh>& targets,
                   const Assignment& assignment, const LossWeights& w) {
  const int nq = pred.num_queries();
  const int ngt = static_cast<int>(targets.size());
  if (static_cast<int>(assignment.pairs.size()) != ngt)
    throw std::invalid_argument("det_loss: assignment does not cover every target");
  std::vector<bool> t_seen(ngt, false), p_seen(nq, false);
  for (auto [pi, tj] : assignment.pairs) {
    if (pi < 0 || pi >= nq || tj < 0 || tj >= ngt || t_seen[tj] || p_seen[pi])
      throw std::invalid_argument("det_loss: assignment inconsistent with predictions/targets");
    t_seen[tj] = true;
    p_seen[pi] = true;
  }
  Tensor<T> labels = Tensor<T>::zeros({nq, 1});
  std::vector<int> matched_rows;
  std::vector<BoxCxCyWh> matched_targets;
  for (auto [pi, tj] : assignment.pairs) {
    (*labels.data)[pi] = T(1);
    matched_rows.push_back(pi);
    matched_targets.push_back(targets[tj]);
  }
  const Tensor<T> matched = matched_targets.empty() ? Tensor<T>{}
                                                    : detail::boxes_const<T>(matched_targets);
  return detail::det_loss_core(pred, labels, matched_rows, matched, w);
}

// Teacher-confidence weight: mean over ground truths of matched IoU times the
// matched foreground score, clamped to [0,1]. Plain scalar math, no graph.
template <typename T>
double compute_wdt(const BranchOutput<T>& decoder_pred, const std::vector<BoxCxCyWh>& gt,
                   const Assignment& assignment) {
  if (gt.empty()) throw std::invalid_argument("compute_wdt: needs at least one ground truth");
  double acc = 0.0;
  for (auto [pi, tj] : assignment.pairs)
    acc += iou(gt[tj].to_xyxy(), decoder_pred.box_at(pi).to_xyxy()) * decoder_pred.score_at(pi);
  const double w = acc / static_cast<double>(gt.size());
  return std::min(1.0, std::max(0.0, w));
}

// Distillation loss for the token branch. The decoder prediction is treated
// as a fixed pseudo-target set: its boxes become regression targets for the
// index-aligned token queries (its matched queries only) and its sigmoid
// scores become soft classification labels. The ground-truth term uses a
// fresh match of token predictions against gt. No gradient reaches the
// decoder branch through this loss.
template <typename T>
std::pair<Tensor<T>, DistillRecord> dwbd_loss(const BranchOutput<T>& token_pred,
                                              const BranchOutput<T>& decoder_pred,
                                              const std::vector<BoxCxCyWh>& gt,
                                              const LossWeights& w,
                                              bool dt_hungarian_pairing = false) {
  const int nq = token_pred.num_queries();
  DistillRecord rec;

  // decoder-vs-gt match drives both the confidence weight and the dt labels
  Assignment dec_assign;
  if (!gt.empty()) {
    std::vector<BoxCxCyWh> dboxes;
    std::vector<double> dscores;
    for (int i = 0; i < nq; ++i) {
      dboxes.push_back(decoder_pred.box_at(i));
      dscores.push_back(decoder_pred.score_at(i));
    }
    dec_assign = hungarian(build_cost_matrix(dboxes, dscores, gt, {w.lambda1, w.lambda2, w.lambda3}));
    rec.w_dt = compute_wdt(decoder_pred, gt, dec_assign);
  } else {
    rec.w_dt = 0.0;  // no ground truth: pure gt supervision (all-negative labels)
  }
  rec.w_gt = 1.0 - rec.w_dt;

  // gt term with a fresh match of the token predictions
  Assignment tok_assign;
  if (!gt.empty()) {
    std::vector<BoxCxCyWh> tboxes;
    std::vector<double> tscores;
    for (int i = 0; i < nq; ++i) {
      tboxes.push_back(token_pred.box_at(i));
      tscores.push_back(token_pred.score_at(i));
    }
    tok_assign = hungarian(build_cost_matrix(tboxes, tscores, gt, {w.lambda1, w.lambda2, w.lambda3}));
  }
  Tensor<T> gt_term = det_loss(token_pred, gt, tok_assign, w);

  Tensor<T> total = scale(gt_term, static_cast<T>(w.gamma2 * rec.w_gt));
  if (rec.w_dt > 0.0) {
    Tensor<T> dt_boxes = decoder_pred.boxes.detach();
    Tensor<T> dt_soft = sigmoid(decoder_pred.score_logits.detach());
    std::vector<int> token_rows, dt_rows;
    if (!dt_hungarian_pairing) {
      // token query i distills from decoder query i; both consume the same
      // generated queries
      for (auto [pi, tj] : dec_assign.pairs) {
        token_rows.push_back(pi);
        dt_rows.push_back(pi);
      }
    } else {
      std::vector<BoxCxCyWh> dt_matched;
      std::vector<int> dt_index;
      for (auto [pi, tj] : dec_assign.pairs) {
        dt_matched.push_back(decoder_pred.box_at(pi));
        dt_index.push_back(pi);
      }
      std::vector<BoxCxCyWh> tboxes;
      std::vector<double> tscores;
      for (int i = 0; i < nq; ++i) {
        tboxes.push_back(token_pred.box_at(i));
        tscores.push_back(token_pred.score_at(i));
      }
      Assignment pair_assign =
          hungarian(build_cost_matrix(tboxes, tscores, dt_matched, {w.lambda1, w.lambda2, w.lambda3}));
      for (auto [pi, tj] : pair_assign.pairs) {
        token_rows.push_back(pi);
        dt_rows.push_back(dt_index[tj]);
      }
    }
    Tensor<T> dt_targets = gather_rows(dt_boxes, dt_rows);
    Tensor<T> dt_term =
        detail::det_loss_core(token_pred, dt_soft, token_rows, dt_targets, w);
    total = add(total, scale(dt_term, static_cast<T>(w.gamma1 * rec.w_dt)));
    rec.loss_dwbd = static_cast<double>(total.item());
  } else {
    rec.loss_dwbd = static_cast<double>(total.item());
  }
  return {total, rec};
}

template <typename T>
struct TotalLossResult {
  Tensor<T> total;  // scalar on the graph
  DistillRecord record;
  Assignment decoder_assignment;
};

// decoder branch supervised by gt; token branch (when present) by the
// distillation loss
template <typename T>
TotalLossResult<T> total_loss(const BranchOutput<T>& decoder_pred,
                              const BranchOutput<T>* token_pred,
                              const std::vector<BoxCxCyWh>& gt, const LossWeights& w,
                              bool dt_hungarian_pairing = false) {
  TotalLossResult<T> out;
  const int nq = decoder_pred.num_queries();
  if (!gt.empty()) {
    std::vector<BoxCxCyWh> dboxes;
    std::vector<double> dscores;
    for (int i = 0; i < nq; ++i) {
      dboxes.push_back(decoder_pred.box_at(i));
      dscores.push_back(decoder_pred.score_at(i));
    }
    out.decoder_assignment =
        hungarian(build_cost_matrix(dboxes, dscores, gt, {w.lambda1, w.lambda2, w.lambda3}));
  }
  Tensor<T> det = det_loss(decoder_pred, gt, out.decoder_assignment, w);
  out.record.loss_det = static_cast<double>(det.item());
  out.total = det;
  if (token_pred) {
    auto [dwbd, rec] = dwbd_loss(*token_pred, decoder_pred, gt, w, dt_hungarian_pairing);
    out.record.w_dt = rec.w_dt;
    out.record.w_gt = rec.w_gt;
    out.record.loss_dwbd = rec.loss_dwbd;
    out.total = add(out.total, dwbd);
  }
  return out;
}

}  // namespace vg
