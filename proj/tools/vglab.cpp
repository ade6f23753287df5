// vglab: generate synthetic grounding data, train the dual-branch model,
// evaluate, dump predictions, and export decoder attention maps.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vglab/commands.hpp"

namespace {

// collects explicit --set style overrides plus dedicated flags, applied on
// top of config-file values
struct FlagOverrides {
  std::vector<std::pair<std::string, std::string>> kv;
  void add(const std::string& key, const std::string& value) { kv.emplace_back(key, value); }
};

void apply_overrides(vg::RunConfig& cfg, const FlagOverrides& flags) {
  for (const auto& [k, v] : flags.kv) cfg.set(k, v);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic visual grounding lab"};
  app.require_subcommand(1);

  // gen-data ---------------------------------------------------------------
  vg::GenDataArgs gen;
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "generate a ColorShapes dataset");
  cmd_gen->add_option("--task", gen.task, "REC or GREC")->check(CLI::IsMember({"REC", "GREC"}));
  cmd_gen->add_option("--n", gen.n, "training samples");
  cmd_gen->add_option("--val-n", gen.val_n, "validation samples (default n/5)");
  cmd_gen->add_option("--seed", gen.seed, "generator seed");
  cmd_gen->add_option("--out", gen.out_dir, "output directory")->required();
  cmd_gen->add_option("--relation-frac", gen.relation_frac, "REC spatial-relation fraction");
  cmd_gen->add_option("--multi-frac", gen.multi_frac, "GREC multi-target fraction");
  cmd_gen->add_option("--none-frac", gen.none_frac, "GREC no-target fraction");

  // shared config handling ---------------------------------------------------
  std::string config_path;
  FlagOverrides flags;
  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file ([model]/[train]/[eval]/[run])");
    cmd->add_option_function<std::vector<std::string>>(
        "--set",
        [&](const std::vector<std::string>& kvs) {
          for (const std::string& kv : kvs) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
              throw CLI::ValidationError("--set expects section.key=value");
            flags.add(kv.substr(0, eq), kv.substr(eq + 1));
          }
        },
        "section.key=value override (repeatable)");
  };
  auto add_flag_opt = [&](CLI::App* cmd, const std::string& flag, const std::string& key,
                          const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [&flags, key](const std::string& v) { flags.add(key, v); }, help);
  };

  // train --------------------------------------------------------------------
  CLI::App* cmd_tr = app.add_subcommand("train", "two-stage training run");
  add_config_opts(cmd_tr);
  add_flag_opt(cmd_tr, "--data", "run.train_data", "training JSONL");
  add_flag_opt(cmd_tr, "--val", "run.val_data", "validation JSONL");
  add_flag_opt(cmd_tr, "--out", "run.out_dir", "output directory");
  add_flag_opt(cmd_tr, "--task", "train.task", "REC or GREC");
  add_flag_opt(cmd_tr, "--seed", "train.seed", "training seed");
  add_flag_opt(cmd_tr, "--stage1-epochs", "train.stage1_epochs", "decoder-only epochs");
  add_flag_opt(cmd_tr, "--stage2-epochs", "train.stage2_epochs", "distillation epochs");

  // eval ----------------------------------------------------------------------
  CLI::App* cmd_ev = app.add_subcommand("eval", "evaluate a checkpoint or predictions file");
  add_config_opts(cmd_ev);
  add_flag_opt(cmd_ev, "--ckpt", "run.ckpt", "checkpoint stem");
  add_flag_opt(cmd_ev, "--data", "run.data", "dataset JSONL");
  add_flag_opt(cmd_ev, "--preds", "run.preds", "predictions JSONL (instead of --ckpt)");
  add_flag_opt(cmd_ev, "--branch", "run.branch", "token or decoder");
  add_flag_opt(cmd_ev, "--out", "run.out_dir", "output directory");

  // predict ---------------------------------------------------------------------
  std::string predict_out = "predictions.jsonl";
  CLI::App* cmd_pr = app.add_subcommand("predict", "write per-sample predictions");
  add_config_opts(cmd_pr);
  add_flag_opt(cmd_pr, "--ckpt", "run.ckpt", "checkpoint stem");
  add_flag_opt(cmd_pr, "--data", "run.data", "dataset JSONL");
  add_flag_opt(cmd_pr, "--branch", "run.branch", "token or decoder");
  cmd_pr->add_option("--out", predict_out, "predictions output path");

  // export-attn -------------------------------------------------------------------
  std::string attn_out = "attn";
  CLI::App* cmd_at = app.add_subcommand("export-attn", "dump decoder cross-attention grids");
  add_config_opts(cmd_at);
  add_flag_opt(cmd_at, "--ckpt", "run.ckpt", "checkpoint stem");
  add_flag_opt(cmd_at, "--data", "run.data", "dataset JSONL");
  add_flag_opt(cmd_at, "--sample", "run.sample_index", "sample index");
  cmd_at->add_option("--out", attn_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_gen->parsed()) return vg::cmd_gen_data(gen);

    vg::RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    apply_overrides(cfg, flags);

    if (cmd_tr->parsed()) return vg::cmd_train(cfg);
    if (cmd_ev->parsed()) return vg::cmd_eval(cfg);
    if (cmd_pr->parsed()) return vg::cmd_predict(cfg, predict_out);
    if (cmd_at->parsed()) return vg::cmd_export_attn(cfg, attn_out);
  } catch (const std::exception& e) {
    std::cerr << "vglab: " << e.what() << "\n";
    return vg::kExitIo;
  }
  return 0;
}
