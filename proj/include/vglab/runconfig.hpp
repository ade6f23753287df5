#pragma once

// Flat key-value run configuration with [model]/[train]/[eval]/[run]
// sections. Assignment precedence is defaults < file < command-line flags;
// each setter simply overwrites, so later sources win.

#include <set>
#include <string>

#include "vglab/metrics.hpp"
#include "vglab/model.hpp"
#include "vglab/trainer.hpp"

namespace vg {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  // [run]
  std::string train_data;
  std::string val_data;
  std::string out_dir = "out";
  std::string branch = "decoder";  // token | decoder
  std::string ckpt;
  std::string data;
  std::string preds;  // eval from a predictions file instead of a checkpoint
  int sample_index = 0;

  std::set<std::string> assigned;  // dotted keys that were explicitly set

  // applies "section.key" = value; throws on unknown keys or bad values
  void set(const std::string& dotted_key, const std::string& value);
  bool was_set(const std::string& dotted_key) const { return assigned.count(dotted_key) > 0; }

  void load_file(const std::string& path);

  // GREC defaults to 10 object queries unless explicitly configured
  void finalize();

  std::string to_string() const;
};

}  // namespace vg
