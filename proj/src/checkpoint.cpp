#include "vglab/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace vg {

namespace {

constexpr const char* kFormatVersion = "1";

std::map<std::string, std::string> config_kv(const ModelConfig& c, const std::string& task) {
  return {
      {"image_size", std::to_string(c.image_size)},
      {"patch_size", std::to_string(c.patch_size)},
      {"embed_dim", std::to_string(c.embed_dim)},
      {"mme_layers", std::to_string(c.mme_layers)},
      {"mme_heads", std::to_string(c.mme_heads)},
      {"decoder_layers", std::to_string(c.decoder_layers)},
      {"tqg_layers", std::to_string(c.tqg_layers)},
      {"token_mlp_layers", std::to_string(c.token_mlp_layers)},
      {"num_queries", std::to_string(c.num_queries)},
      {"max_text_len", std::to_string(c.max_text_len)},
      {"vocab_size", std::to_string(c.vocab_size)},
      {"ffn_mult", std::to_string(c.ffn_mult)},
      {"use_tqg", c.use_tqg ? "1" : "0"},
      {"object_token_dedicated_ffn", c.object_token_dedicated_ffn ? "1" : "0"},
      {"task", task},
  };
}

int kv_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw std::runtime_error("checkpoint: manifest missing key " + key);
  return std::stoi(it->second);
}

}  // namespace

void save_checkpoint(const std::string& stem, ModelParams<float>& params, const ModelConfig& cfg,
                     const std::string& task) {
  std::ofstream blob(stem + ".bin", std::ios::binary);
  if (!blob) throw std::runtime_error("checkpoint: cannot write " + stem + ".bin");
  std::ostringstream manifest;
  manifest << "format " << kFormatVersion << "\n";
  for (const auto& [k, v] : config_kv(cfg, task)) manifest << "config " << k << " " << v << "\n";
  std::uint64_t offset = 0;
  for (auto& [name, t] : params.named()) {
    manifest << "array " << name << " ";
    for (std::size_t i = 0; i < t->shape.size(); ++i) manifest << (i ? "x" : "") << t->shape[i];
    manifest << " " << offset << "\n";
    blob.write(reinterpret_cast<const char*>(t->data->data()),
               static_cast<std::streamsize>(t->numel() * sizeof(float)));
    offset += static_cast<std::uint64_t>(t->numel()) * sizeof(float);
  }
  if (!blob) throw std::runtime_error("checkpoint: write failed for " + stem + ".bin");
  std::ofstream mf(stem + ".manifest");
  if (!mf) throw std::runtime_error("checkpoint: cannot write " + stem + ".manifest");
  mf << manifest.str();
}

Checkpoint load_checkpoint(const std::string& stem) {
  std::ifstream mf(stem + ".manifest");
  if (!mf) throw std::runtime_error("checkpoint: cannot open " + stem + ".manifest");
  std::map<std::string, std::string> kv;
  struct ArrayEntry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<ArrayEntry> arrays;
  std::string line;
  bool versioned = false;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "format") {
      std::string v;
      ss >> v;
      if (v != kFormatVersion)
        throw std::runtime_error("checkpoint: unsupported format version " + v);
      versioned = true;
    } else if (tag == "config") {
      std::string k, v;
      ss >> k >> v;
      kv[k] = v;
    } else if (tag == "array") {
      ArrayEntry e;
      std::string shape_s;
      ss >> e.name >> shape_s >> e.offset;
      std::istringstream sh(shape_s);
      std::string dim;
      while (std::getline(sh, dim, 'x')) e.shape.push_back(std::stoi(dim));
      arrays.push_back(std::move(e));
    } else {
      throw std::runtime_error("checkpoint: unknown manifest tag " + tag);
    }
  }
  if (!versioned) throw std::runtime_error("checkpoint: manifest missing format line");

  Checkpoint ck;
  ck.config.image_size = kv_int(kv, "image_size");
  ck.config.patch_size = kv_int(kv, "patch_size");
  ck.config.embed_dim = kv_int(kv, "embed_dim");
  ck.config.mme_layers = kv_int(kv, "mme_layers");
  ck.config.mme_heads = kv_int(kv, "mme_heads");
  ck.config.decoder_layers = kv_int(kv, "decoder_layers");
  ck.config.tqg_layers = kv_int(kv, "tqg_layers");
  ck.config.token_mlp_layers = kv_int(kv, "token_mlp_layers");
  ck.config.num_queries = kv_int(kv, "num_queries");
  ck.config.max_text_len = kv_int(kv, "max_text_len");
  ck.config.vocab_size = kv_int(kv, "vocab_size");
  ck.config.ffn_mult = kv_int(kv, "ffn_mult");
  ck.config.use_tqg = kv_int(kv, "use_tqg") != 0;
  ck.config.object_token_dedicated_ffn = kv_int(kv, "object_token_dedicated_ffn") != 0;
  auto it = kv.find("task");
  if (it == kv.end()) throw std::runtime_error("checkpoint: manifest missing task");
  ck.task = it->second;
  ck.config.validate();

  // arrays must match the parameter registry of the echoed config exactly
  ck.params = init_params<float>(ck.config, 0);
  auto named = ck.params.named();
  if (named.size() != arrays.size())
    throw std::runtime_error("checkpoint: array count does not match config");
  std::ifstream blob(stem + ".bin", std::ios::binary);
  if (!blob) throw std::runtime_error("checkpoint: cannot open " + stem + ".bin");
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    const ArrayEntry& e = arrays[i];
    if (e.name != name)
      throw std::runtime_error("checkpoint: array order mismatch, expected " + name + " got " +
                               e.name);
    if (e.shape != t->shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": manifest " +
                               shape_str(e.shape) + " vs config " + shape_str(t->shape));
    blob.seekg(static_cast<std::streamoff>(e.offset));
    blob.read(reinterpret_cast<char*>(t->data->data()),
              static_cast<std::streamsize>(t->numel() * sizeof(float)));
    if (!blob) throw std::runtime_error("checkpoint: blob truncated at array " + name);
  }
  return ck;
}

}  // namespace vg
