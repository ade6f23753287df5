#include "vglab/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "vglab/checkpoint.hpp"

namespace vg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string dir_of(const std::string& path) {
  const fs::path p(path);
  return p.has_parent_path() ? p.parent_path().string() : std::string(".");
}

// task recorded in the dataset manifest when present, otherwise inferred
// from the samples
std::string dataset_task(const std::string& data_path,
                         const std::vector<GroundingSample>& samples) {
  const fs::path manifest = fs::path(dir_of(data_path)) / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream f(manifest);
    json j;
    f >> j;
    if (j.contains("task")) return j["task"].get<std::string>();
  }
  for (const GroundingSample& s : samples)
    if (s.targets.size() != 1) return "GREC";
  return "REC";
}

json branch_eval_json(const BranchEval& ev, const std::string& task) {
  json j;
  j["n_samples"] = ev.n_samples;
  if (task == "REC") {
    j["prec_at_0.5"] = ev.precision;
  } else {
    j["prec_f1"] = ev.precision;
    if (ev.n_acc >= 0.0) j["n_acc"] = ev.n_acc;
  }
  return j;
}

struct LoadedEval {
  Checkpoint ck;
  std::vector<GroundingSample> samples;
  std::vector<PreparedSample> prepared;
};

// shared by eval / predict / export-attn; throws with the intended exit code
// packed into a small struct
struct CommandError {
  int code;
  std::string message;
};

LoadedEval load_for_eval(const RunConfig& cfg) {
  LoadedEval le;
  le.ck = load_checkpoint(cfg.ckpt);
  le.samples = load_jsonl(cfg.data);
  const std::string dtask = dataset_task(cfg.data, le.samples);
  if (dtask != le.ck.task)
    throw CommandError{kExitConfigMismatch, "checkpoint task " + le.ck.task +
                                                " does not match dataset task " + dtask};
  le.prepared = prepare_samples(le.samples, le.ck.config, dir_of(cfg.data));
  return le;
}

std::vector<ScoredBox> predictions_for(const BranchOutput<float>& out, const std::string& task,
                                       const EvalConfig& eval_cfg) {
  std::vector<ScoredBox> preds;
  if (task == "REC") {
    int best = 0;
    for (int i = 1; i < out.num_queries(); ++i)
      if (out.logit_at(i) > out.logit_at(best)) best = i;
    preds.push_back({out.box_at(best), out.score_at(best)});
  } else {
    for (int i = 0; i < out.num_queries(); ++i) preds.push_back({out.box_at(i), out.score_at(i)});
    preds = filter_predictions(preds, eval_cfg);
  }
  return preds;
}

}  // namespace

int cmd_gen_data(const GenDataArgs& args) {
  try {
    fs::create_directories(args.out_dir);
    DatasetOptions opts;
    opts.task = args.task;
    opts.relation_frac = args.relation_frac;
    opts.multi_frac = args.multi_frac;
    opts.none_frac = args.none_frac;
    const int val_n = args.val_n >= 0 ? args.val_n : args.n / 5;
    auto train = generate_colorshapes(args.seed, args.n, opts, 0);
    auto val = val_n > 0 ? generate_colorshapes(args.seed, val_n, opts, args.n)
                         : std::vector<GroundingSample>{};
    save_jsonl(train, args.out_dir + "/train.jsonl");
    if (!val.empty()) save_jsonl(val, args.out_dir + "/val.jsonl");

    int no_target = 0, multi = 0;
    for (const auto& s : train) {
      if (s.no_target) ++no_target;
      if (s.targets.size() > 1) ++multi;
    }
    json manifest;
    manifest["task"] = args.task;
    manifest["seed"] = args.seed;
    manifest["n_train"] = args.n;
    manifest["n_val"] = val_n;
    manifest["no_target_count"] = no_target;
    manifest["multi_target_count"] = multi;
    manifest["pixel_format"] = "rgb8 interleaved, row-major";
    manifest["vocab"] = Vocab::builtin().words();
    std::ofstream mf(args.out_dir + "/manifest.json");
    if (!mf) throw std::runtime_error("cannot write manifest");
    mf << manifest.dump(2) << "\n";

    std::cout << "wrote " << train.size() << " train / " << val.size() << " val samples to "
              << args.out_dir << "\n";
    if (args.task == "GREC")
      std::cout << "train split: " << no_target << " no-target, " << multi
                << " multi-target samples\n";
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "gen-data: " << e.what() << "\n";
    return kExitIo;
  }
}

int cmd_train(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.finalize();
  std::vector<PreparedSample> train_set, val_set;
  std::ofstream steps_csv;
  try {
    auto train_samples = load_jsonl(cfg.train_data);
    train_set = prepare_samples(train_samples, cfg.model, dir_of(cfg.train_data));
    if (!cfg.val_data.empty()) {
      auto val_samples = load_jsonl(cfg.val_data);
      val_set = prepare_samples(val_samples, cfg.model, dir_of(cfg.val_data));
    }
    fs::create_directories(cfg.out_dir);
    steps_csv.open(cfg.out_dir + "/steps.csv");
    if (!steps_csv) throw std::runtime_error("cannot write " + cfg.out_dir + "/steps.csv");
  } catch (const std::exception& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitIo;
  }

  steps_csv << "step,w_dt,loss_det,loss_dwbd,lr\n" << std::setprecision(10);
  auto on_step = [&](const DistillRecord& r) {
    steps_csv << r.step << "," << r.w_dt << "," << r.loss_det << "," << r.loss_dwbd << ","
              << cfg.train.learning_rate << "\n";
  };
  json history = json::array();
  auto on_epoch = [&](const EpochMetrics& em, ModelParams<float>& params) {
    save_checkpoint(cfg.out_dir + "/ckpt_epoch" + std::to_string(em.epoch), params, cfg.model,
                    cfg.train.task);
    json j;
    j["epoch"] = em.epoch;
    j["stage"] = em.stage;
    j["mean_loss"] = em.mean_loss;
    j["decoder"] = branch_eval_json(em.decoder_eval, cfg.train.task);
    j["token"] = branch_eval_json(em.token_eval, cfg.train.task);
    history.push_back(j);
    std::cout << "epoch " << em.epoch << " stage " << em.stage << " loss " << std::fixed
              << std::setprecision(4) << em.mean_loss << " decoder " << em.decoder_eval.precision
              << " token " << em.token_eval.precision << "\n";
  };

  try {
    TrainResult result = two_stage_train(train_set, val_set, cfg.model, cfg.train, cfg.eval,
                                         on_step, on_epoch);
    save_checkpoint(cfg.out_dir + "/ckpt_final", result.params, cfg.model, cfg.train.task);
    json metrics;
    metrics["epochs"] = history;
    if (!result.history.empty()) {
      const EpochMetrics& last = result.history.back();
      metrics["final"] = {{"decoder", branch_eval_json(last.decoder_eval, cfg.train.task)},
                          {"token", branch_eval_json(last.token_eval, cfg.train.task)}};
    }
    std::ofstream mf(cfg.out_dir + "/metrics.json");
    mf << metrics.dump(2) << "\n";
    return kExitOk;
  } catch (const DivergenceError& e) {
    std::cerr << "train: diverged (" << e.what() << "); last epoch checkpoint retained in "
              << cfg.out_dir << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitIo;
  }
}

namespace {

// scores samples from a predictions JSONL (boxes already post-filter)
BranchEval eval_from_predictions(const RunConfig& cfg, const std::string& task,
                                 const std::vector<GroundingSample>& samples) {
  std::ifstream f(cfg.preds);
  if (!f) throw std::runtime_error("cannot open " + cfg.preds);
  std::map<long long, std::vector<ScoredBox>> by_id;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    std::vector<ScoredBox> preds;
    for (std::size_t i = 0; i < j["boxes"].size(); ++i) {
      const auto& b = j["boxes"][i];
      preds.push_back({{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                        b[3].get<double>()},
                       j["scores"][i].get<double>()});
    }
    by_id[j["id"].get<long long>()] = std::move(preds);
  }
  BranchEval ev;
  ev.n_samples = static_cast<int>(samples.size());
  std::vector<BoxCxCyWh> rec_preds, rec_gts;
  std::vector<SampleF1> f1s;
  std::vector<int> no_target_counts;
  for (const GroundingSample& s : samples) {
    auto it = by_id.find(s.id);
    if (it == by_id.end()) throw std::runtime_error("predictions missing sample id " +
                                                    std::to_string(s.id));
    if (task == "REC") {
      if (it->second.empty()) throw std::runtime_error("REC prediction line without a box");
      rec_preds.push_back(it->second[0].box);
      rec_gts.push_back(s.targets.at(0));
    } else {
      f1s.push_back(grec_f1_sample(it->second, s.targets, cfg.eval.iou_threshold));
      if (s.no_target) no_target_counts.push_back(static_cast<int>(it->second.size()));
    }
  }
  if (task == "REC") {
    ev.precision = prec_at_05(rec_preds, rec_gts);
  } else {
    ev.precision = grec_precision(f1s);
    ev.n_acc = no_target_counts.empty() ? -1.0 : n_acc(no_target_counts);
  }
  return ev;
}

}  // namespace

int cmd_eval(const RunConfig& cfg) {
  try {
    std::string task;
    BranchEval ev;
    if (!cfg.preds.empty()) {
      auto samples = load_jsonl(cfg.data);
      task = dataset_task(cfg.data, samples);
      ev = eval_from_predictions(cfg, task, samples);
    } else {
      LoadedEval le = load_for_eval(cfg);
      task = le.ck.task;
      ev = evaluate_model(le.ck.params, le.ck.config, le.prepared, task, cfg.branch, cfg.eval);
    }
    json out;
    out["branch"] = cfg.branch;
    out["task"] = task;
    out["metrics"] = branch_eval_json(ev, task);

    std::cout << "branch: " << cfg.branch << "  task: " << task << "  samples: " << ev.n_samples
              << "\n";
    if (task == "REC") {
      std::cout << "  Prec@0.5             " << std::fixed << std::setprecision(4)
                << ev.precision << "\n";
    } else {
      std::cout << "  Prec@(F1=1,IoU>=0.5) " << std::fixed << std::setprecision(4)
                << ev.precision << "\n";
      if (ev.n_acc >= 0) std::cout << "  N-acc                " << ev.n_acc << "\n";
    }
    fs::create_directories(cfg.out_dir);
    std::ofstream f(cfg.out_dir + "/eval_" + cfg.branch + ".json");
    f << out.dump(2) << "\n";
    return kExitOk;
  } catch (const CommandError& e) {
    std::cerr << "eval: " << e.message << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "eval: " << e.what() << "\n";
    return kExitIo;
  }
}

int cmd_predict(const RunConfig& cfg, const std::string& out_path) {
  try {
    LoadedEval le = load_for_eval(cfg);
    const ForwardMode mode =
        cfg.branch == "token" ? ForwardMode::kInferToken : ForwardMode::kInferDecoder;
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot write " + out_path);
    for (const PreparedSample& s : le.prepared) {
      ForwardResult<float> fr = forward(s.image, s.token_ids, le.ck.params, le.ck.config, mode);
      const BranchOutput<float>& out = cfg.branch == "token" ? *fr.token : *fr.decoder;
      const std::vector<ScoredBox> preds = predictions_for(out, le.ck.task, cfg.eval);
      json j;
      j["id"] = s.id;
      json boxes = json::array(), scores = json::array();
      for (const ScoredBox& p : preds) {
        boxes.push_back({p.box.cx, p.box.cy, p.box.w, p.box.h});
        scores.push_back(p.score);
      }
      j["boxes"] = std::move(boxes);
      j["scores"] = std::move(scores);
      f << j.dump() << "\n";
    }
    return kExitOk;
  } catch (const CommandError& e) {
    std::cerr << "predict: " << e.message << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "predict: " << e.what() << "\n";
    return kExitIo;
  }
}

int cmd_export_attn(const RunConfig& cfg, const std::string& out_dir) {
  try {
    LoadedEval le = load_for_eval(cfg);
    if (cfg.sample_index < 0 || cfg.sample_index >= static_cast<int>(le.prepared.size())) {
      std::cerr << "export-attn: sample index " << cfg.sample_index << " out of range (0.."
                << le.prepared.size() - 1 << ")\n";
      return kExitBadIndex;
    }
    const PreparedSample& s = le.prepared[cfg.sample_index];
    AttnTrace<float> trace;
    forward(s.image, s.token_ids, le.ck.params, le.ck.config, ForwardMode::kInferDecoder, &trace);
    fs::create_directories(out_dir);
    const int g = le.ck.config.grid();
    for (int l = 0; l < trace.layers; ++l) {
      for (int h = 0; h < trace.heads; ++h) {
        const Tensor<float>& p = trace.probs[static_cast<std::size_t>(l) * trace.heads + h];
        for (int q = 0; q < p.rows(); ++q) {
          std::ostringstream name;
          name << out_dir << "/attn_l" << l << "_h" << h << "_q" << q << ".csv";
          std::ofstream f(name.str());
          f << std::setprecision(9);
          for (int y = 0; y < g; ++y) {
            for (int x = 0; x < g; ++x) f << (x ? "," : "") << p.at(q, y * g + x);
            f << "\n";
          }
        }
      }
    }
    save_pixels(out_dir + "/image.rgb", s.image);
    json meta;
    meta["grid"] = g;
    meta["layers"] = trace.layers;
    meta["heads"] = trace.heads;
    meta["queries"] = le.ck.config.num_queries;
    meta["sample_id"] = s.id;
    meta["expression"] = s.expression;
    meta["image_format"] = "rgb8 interleaved, row-major, " +
                           std::to_string(le.ck.config.image_size) + "x" +
                           std::to_string(le.ck.config.image_size);
    std::ofstream mf(out_dir + "/meta.json");
    mf << meta.dump(2) << "\n";
    return kExitOk;
  } catch (const CommandError& e) {
    std::cerr << "export-attn: " << e.message << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "export-attn: " << e.what() << "\n";
    return kExitIo;
  }
}

}  // namespace vg
