#pragma once

// Checkpoint format: a text manifest (format version, config echo, task, one
// line per array with name/shape/byte offset) next to a single raw blob of
// little-endian 32-bit floats. Loading validates every shape against the
// config rebuilt from the manifest.

#include <string>

#include "vglab/model.hpp"

namespace vg {

struct Checkpoint {
  ModelConfig config;
  std::string task;  // "REC" or "GREC"
  ModelParams<float> params;
};

// writes <stem>.manifest and <stem>.bin
void save_checkpoint(const std::string& stem, ModelParams<float>& params,
                     const ModelConfig& cfg, const std::string& task);

Checkpoint load_checkpoint(const std::string& stem);

}  // namespace vg
