#pragma once

// Two-stage training: the decoder branch alone first, then synchronous
// learning of both branches with the distillation loss. One loop owns the
// parameters; per-step records capture the teacher/gt balance.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vglab/datagen.hpp"
#include "vglab/losses.hpp"
#include "vglab/metrics.hpp"
#include "vglab/model.hpp"
#include "vglab/optimizer.hpp"

namespace vg {

struct TrainConfig {
  int stage1_epochs = 30;
  int stage2_epochs = 20;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;  // global-norm clip, 0 disables
  std::uint64_t seed = 0;
  std::string task = "REC";           // REC | GREC
  std::string distill_mode = "dwbd";  // dwbd | gt_only
  bool dt_hungarian_pairing = false;
  int eval_max = 300;  // per-epoch eval subset cap
  LossWeights loss;
};

struct BranchEval {
  double precision = 0.0;  // Prec@0.5 (REC) or Prec@(F1=1) (GREC)
  double n_acc = -1.0;     // GREC only; -1 when the subset is empty / REC
  int n_samples = 0;
};

struct EpochMetrics {
  int epoch = 0;
  int stage = 1;
  double mean_loss = 0.0;
  BranchEval decoder_eval;
  BranchEval token_eval;
};

struct TrainResult {
  ModelParams<float> params;
  std::vector<DistillRecord> records;
  std::vector<EpochMetrics> history;
  long long stage2_first_step = -1;  // step index where stage 2 begins
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// cached model inputs for one sample
struct PreparedSample {
  Tensor<float> image;
  std::vector<int> token_ids;
  std::vector<BoxCxCyWh> targets;
  bool no_target = false;
  long long id = 0;
  std::string expression;
};

std::vector<PreparedSample> prepare_samples(const std::vector<GroundingSample>& samples,
                                            const ModelConfig& cfg, const std::string& data_dir);

BranchEval evaluate_model(ModelParams<float>& params, const ModelConfig& cfg,
                          const std::vector<PreparedSample>& samples, const std::string& task,
                          const std::string& branch, const EvalConfig& eval_cfg);

using StepCallback = std::function<void(const DistillRecord&)>;
using EpochCallback = std::function<void(const EpochMetrics&, ModelParams<float>&)>;

TrainResult two_stage_train(const std::vector<PreparedSample>& train_set,
                            const std::vector<PreparedSample>& val_set, const ModelConfig& mcfg,
                            const TrainConfig& tcfg, const EvalConfig& eval_cfg = {},
                            const StepCallback& on_step = nullptr,
                            const EpochCallback& on_epoch = nullptr);

}  // namespace vg
