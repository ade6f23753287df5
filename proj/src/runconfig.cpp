#include "vglab/runconfig.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vg {

namespace {

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw std::invalid_argument("config: bad boolean value '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_double = [&] { return std::stod(value); };

  if (key == "model.image_size") model.image_size = as_int();
  else if (key == "model.patch_size") model.patch_size = as_int();
  else if (key == "model.embed_dim") model.embed_dim = as_int();
  else if (key == "model.mme_layers") model.mme_layers = as_int();
  else if (key == "model.mme_heads") model.mme_heads = as_int();
  else if (key == "model.decoder_layers") model.decoder_layers = as_int();
  else if (key == "model.tqg_layers") model.tqg_layers = as_int();
  else if (key == "model.token_mlp_layers") model.token_mlp_layers = as_int();
  else if (key == "model.num_queries") model.num_queries = as_int();
  else if (key == "model.max_text_len") model.max_text_len = as_int();
  else if (key == "model.ffn_mult") model.ffn_mult = as_int();
  else if (key == "model.use_tqg") model.use_tqg = parse_bool(value);
  else if (key == "model.object_token_dedicated_ffn")
    model.object_token_dedicated_ffn = parse_bool(value);
  else if (key == "train.stage1_epochs") train.stage1_epochs = as_int();
  else if (key == "train.stage2_epochs") train.stage2_epochs = as_int();
  else if (key == "train.batch_size") train.batch_size = as_int();
  else if (key == "train.learning_rate") train.learning_rate = as_double();
  else if (key == "train.weight_decay") train.weight_decay = as_double();
  else if (key == "train.grad_clip") train.grad_clip = as_double();
  else if (key == "train.seed") train.seed = static_cast<std::uint64_t>(std::stoull(value));
  else if (key == "train.task") train.task = value;
  else if (key == "train.distill_mode") train.distill_mode = value;
  else if (key == "train.dt_hungarian_pairing") train.dt_hungarian_pairing = parse_bool(value);
  else if (key == "train.eval_max") train.eval_max = as_int();
  else if (key == "train.lambda1") train.loss.lambda1 = as_double();
  else if (key == "train.lambda2") train.loss.lambda2 = as_double();
  else if (key == "train.lambda3") train.loss.lambda3 = as_double();
  else if (key == "train.gamma1") train.loss.gamma1 = as_double();
  else if (key == "train.gamma2") train.loss.gamma2 = as_double();
  else if (key == "eval.iou_threshold") eval.iou_threshold = as_double();
  else if (key == "eval.score_threshold") eval.score_threshold = as_double();
  else if (key == "run.train_data") train_data = value;
  else if (key == "run.val_data") val_data = value;
  else if (key == "run.out_dir") out_dir = value;
  else if (key == "run.branch") branch = value;
  else if (key == "run.ckpt") ckpt = value;
  else if (key == "run.data") data = value;
  else if (key == "run.preds") preds = value;
  else if (key == "run.sample_index") sample_index = as_int();
  else throw std::invalid_argument("config: unknown key '" + key + "'");
  assigned.insert(key);
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::string line, section;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected key = value at " + path + ":" +
                               std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty())
      throw std::runtime_error("config: key outside a section at " + path + ":" +
                               std::to_string(line_no));
    try {
      set(section + "." + key, value);
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string(e.what()) + " at " + path + ":" +
                               std::to_string(line_no));
    }
  }
}

void RunConfig::finalize() {
  if (train.task == "GREC" && !was_set("model.num_queries")) model.num_queries = 10;
  model.vocab_size = Vocab::builtin().size();
}

std::string RunConfig::to_string() const {
  std::ostringstream os;
  os << "[model]\n"
     << "image_size = " << model.image_size << "\npatch_size = " << model.patch_size
     << "\nembed_dim = " << model.embed_dim << "\nmme_layers = " << model.mme_layers
     << "\nmme_heads = " << model.mme_heads << "\ndecoder_layers = " << model.decoder_layers
     << "\ntqg_layers = " << model.tqg_layers
     << "\ntoken_mlp_layers = " << model.token_mlp_layers
     << "\nnum_queries = " << model.num_queries << "\nmax_text_len = " << model.max_text_len
     << "\nffn_mult = " << model.ffn_mult << "\nuse_tqg = " << (model.use_tqg ? 1 : 0)
     << "\nobject_token_dedicated_ffn = " << (model.object_token_dedicated_ffn ? 1 : 0) << "\n";
  os << "[train]\n"
     << "stage1_epochs = " << train.stage1_epochs << "\nstage2_epochs = " << train.stage2_epochs
     << "\nbatch_size = " << train.batch_size << "\nlearning_rate = " << train.learning_rate
     << "\nweight_decay = " << train.weight_decay << "\ngrad_clip = " << train.grad_clip
     << "\nseed = " << train.seed << "\ntask = " << train.task
     << "\ndistill_mode = " << train.distill_mode
     << "\ndt_hungarian_pairing = " << (train.dt_hungarian_pairing ? 1 : 0)
     << "\neval_max = " << train.eval_max << "\n";
  os << "[eval]\n"
     << "iou_threshold = " << eval.iou_threshold
     << "\nscore_threshold = " << eval.score_threshold << "\n";
  os << "[run]\n"
     << "train_data = " << train_data << "\nval_data = " << val_data << "\nout_dir = " << out_dir
     << "\nbranch = " << branch << "\n";
  return os.str();
}

}  // namespace vg
