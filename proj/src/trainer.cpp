#include "vglab/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "vglab/rng.hpp"

namespace vg {

namespace {

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
    std::swap(idx[i], idx[rng.uniform_int(0, i)]);
}

}  // namespace

std::vector<PreparedSample> prepare_samples(const std::vector<GroundingSample>& samples,
                                            const ModelConfig& cfg, const std::string& data_dir) {
  const Vocab& vocab = Vocab::builtin();
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const GroundingSample& s : samples) {
    PreparedSample p;
    p.image = s.pixels_file.empty()
                  ? render<float>(s, cfg.image_size)
                  : load_pixels(data_dir + "/" + s.pixels_file, cfg.image_size);
    p.token_ids = tokenize(s.expression, vocab, cfg.max_text_len);
    p.targets = s.targets;
    p.no_target = s.no_target;
    p.id = s.id;
    p.expression = s.expression;
    out.push_back(std::move(p));
  }
  return out;
}

BranchEval evaluate_model(ModelParams<float>& params, const ModelConfig& cfg,
                          const std::vector<PreparedSample>& samples, const std::string& task,
                          const std::string& branch, const EvalConfig& eval_cfg) {
  BranchEval ev;
  ev.n_samples = static_cast<int>(samples.size());
  const ForwardMode mode =
      branch == "token" ? ForwardMode::kInferToken : ForwardMode::kInferDecoder;
  std::vector<BoxCxCyWh> rec_preds, rec_gts;
  std::vector<SampleF1> f1s;
  std::vector<int> no_target_pred_counts;
  for (const PreparedSample& s : samples) {
    ForwardResult<float> fr = forward(s.image, s.token_ids, params, cfg, mode);
    const BranchOutput<float>& out = branch == "token" ? *fr.token : *fr.decoder;
    if (task == "REC") {
      int best = 0;
      for (int i = 1; i < out.num_queries(); ++i)
        if (out.logit_at(i) > out.logit_at(best)) best = i;
      rec_preds.push_back(out.box_at(best));
      rec_gts.push_back(s.targets.at(0));
    } else {
      std::vector<ScoredBox> preds;
      for (int i = 0; i < out.num_queries(); ++i)
        preds.push_back({out.box_at(i), out.score_at(i)});
      preds = filter_predictions(preds, eval_cfg);
      f1s.push_back(grec_f1_sample(preds, s.targets, eval_cfg.iou_threshold));
      if (s.no_target) no_target_pred_counts.push_back(static_cast<int>(preds.size()));
    }
  }
  if (task == "REC") {
    ev.precision = prec_at_05(rec_preds, rec_gts);
  } else {
    ev.precision = grec_precision(f1s);
    ev.n_acc = no_target_pred_counts.empty() ? -1.0 : n_acc(no_target_pred_counts);
  }
  return ev;
}

TrainResult two_stage_train(const std::vector<PreparedSample>& train_set,
                            const std::vector<PreparedSample>& val_set, const ModelConfig& mcfg,
                            const TrainConfig& tcfg, const EvalConfig& eval_cfg,
                            const StepCallback& on_step, const EpochCallback& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("two_stage_train: empty dataset");
  mcfg.validate();

  TrainResult result;
  result.params = init_params<float>(mcfg, tcfg.seed);
  result.params.set_requires_grad();
  auto param_ptrs = result.params.all();

  AdamState<float> opt;
  opt.init_for(param_ptrs);

  Rng shuffle_rng(Rng::derive(tcfg.seed, 1));
  std::vector<int> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const std::vector<PreparedSample>& eval_set = val_set.empty() ? train_set : val_set;
  const int eval_n = std::min<int>(tcfg.eval_max, static_cast<int>(eval_set.size()));
  const std::vector<PreparedSample> eval_subset(eval_set.begin(), eval_set.begin() + eval_n);

  long long step = 0;
  const int total_epochs = tcfg.stage1_epochs + tcfg.stage2_epochs;
  try {
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
      const bool stage2 = epoch >= tcfg.stage1_epochs;
      if (stage2 && result.stage2_first_step < 0) result.stage2_first_step = step;
      shuffle_indices(order, shuffle_rng);
      double epoch_loss = 0.0;
      int epoch_steps = 0;
      for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
        const std::size_t stop = std::min(order.size(), start + tcfg.batch_size);
        const int bn = static_cast<int>(stop - start);
        result.params.zero_grad();
        DistillRecord batch_rec;
        batch_rec.step = step;
        batch_rec.w_dt = 0.0;
        double batch_loss = 0.0, batch_det = 0.0, batch_dwbd = 0.0, batch_wdt = 0.0;
        for (std::size_t bi = start; bi < stop; ++bi) {
          const PreparedSample& s = train_set[order[bi]];
          Tape<float> tape;
          TapeScope<float> scope(tape);
          ForwardResult<float> fr =
              forward(s.image, s.token_ids, result.params, mcfg,
                      stage2 ? ForwardMode::kTrain : ForwardMode::kInferDecoder);
          Tensor<float> loss;
          DistillRecord rec;
          if (!stage2) {
            TotalLossResult<float> tl =
                total_loss<float>(*fr.decoder, nullptr, s.targets, tcfg.loss);
            loss = tl.total;
            rec = tl.record;
          } else if (tcfg.distill_mode == "gt_only") {
            // ablation arm: token branch supervised by ground truth alone
            TotalLossResult<float> tl =
                total_loss<float>(*fr.decoder, nullptr, s.targets, tcfg.loss);
            Assignment tok_assign;
            if (!s.targets.empty()) {
              std::vector<BoxCxCyWh> boxes;
              std::vector<double> scores;
              for (int i = 0; i < fr.token->num_queries(); ++i) {
                boxes.push_back(fr.token->box_at(i));
                scores.push_back(fr.token->score_at(i));
              }
              tok_assign = hungarian(build_cost_matrix(
                  boxes, scores, s.targets,
                  {tcfg.loss.lambda1, tcfg.loss.lambda2, tcfg.loss.lambda3}));
            }
            Tensor<float> tok_term =
                scale(det_loss(*fr.token, s.targets, tok_assign, tcfg.loss),
                      static_cast<float>(tcfg.loss.gamma2));
            rec = tl.record;
            rec.loss_dwbd = static_cast<double>(tok_term.item());
            loss = add(tl.total, tok_term);
          } else {
            TotalLossResult<float> tl = total_loss<float>(
                *fr.decoder, &*fr.token, s.targets, tcfg.loss, tcfg.dt_hungarian_pairing);
            loss = tl.total;
            rec = tl.record;
          }
          batch_loss += static_cast<double>(loss.item());
          batch_det += rec.loss_det;
          batch_dwbd += rec.loss_dwbd;
          batch_wdt += rec.w_dt;
          Tensor<float> scaled = scale(loss, 1.0f / static_cast<float>(bn));
          tape.backward(scaled);
        }
        if (tcfg.grad_clip > 0.0) clip_grad_norm(param_ptrs, tcfg.grad_clip);
        adam_step(param_ptrs, opt, tcfg.learning_rate, tcfg.weight_decay);
        batch_rec.loss_det = batch_det / bn;
        batch_rec.loss_dwbd = batch_dwbd / bn;
        batch_rec.w_dt = batch_wdt / bn;
        batch_rec.w_gt = 1.0 - batch_rec.w_dt;
        result.records.push_back(batch_rec);
        if (on_step) on_step(batch_rec);
        epoch_loss += batch_loss;
        epoch_steps += bn;
        ++step;
      }
      EpochMetrics em;
      em.epoch = epoch;
      em.stage = stage2 ? 2 : 1;
      em.mean_loss = epoch_loss / epoch_steps;
      em.decoder_eval =
          evaluate_model(result.params, mcfg, eval_subset, tcfg.task, "decoder", eval_cfg);
      em.token_eval =
          evaluate_model(result.params, mcfg, eval_subset, tcfg.task, "token", eval_cfg);
      result.history.push_back(em);
      if (on_epoch) on_epoch(em, result.params);
    }
  } catch (const std::runtime_error& e) {
    // NaN/Inf production anywhere is treated as divergence
    if (std::string(e.what()).find("non-finite") != std::string::npos)
      throw DivergenceError(e.what());
    throw;
  }
  return result;
}

}  // namespace vg
