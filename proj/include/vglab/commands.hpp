#pragma once

// Command implementations behind the CLI. Each returns a process exit code:
// 0 ok, 2 I/O failure, 3 training divergence, 4 checkpoint/data config
// mismatch, 5 bad sample index.

#include <string>

#include "vglab/runconfig.hpp"

namespace vg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitConfigMismatch = 4;
inline constexpr int kExitBadIndex = 5;

struct GenDataArgs {
  std::string task = "REC";
  int n = 1000;
  int val_n = -1;  // default n / 5
  std::uint64_t seed = 0;
  std::string out_dir;
  double relation_frac = 0.5;
  double multi_frac = 0.2;
  double none_frac = 0.15;
};

int cmd_gen_data(const GenDataArgs& args);
int cmd_train(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_predict(const RunConfig& cfg, const std::string& out_path);
int cmd_export_attn(const RunConfig& cfg, const std::string& out_dir);

}  // namespace vg
