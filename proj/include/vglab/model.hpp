#pragma once

// The grounding network: patch/text embedding plus a learnable object token
// run through a multi-modality encoder (shared self-attention, per-modality
// FFN experts), text-guided query generation, and two prediction branches.
// The decoder branch is a DETR-style cross-attention stack; the token branch
// is a lightweight MLP on the encoded object token. Everything is templated
// on the scalar type; float is the training default, double is used by the
// finite-difference checks.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vglab/box.hpp"
#include "vglab/rng.hpp"
#include "vglab/tensor.hpp"

namespace vg {

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 128;
  int mme_layers = 4;
  int mme_heads = 4;
  int decoder_layers = 3;
  int tqg_layers = 2;
  int token_mlp_layers = 1;
  int num_queries = 1;  // 10 for multi-target grounding
  int max_text_len = 20;
  int vocab_size = 64;
  int ffn_mult = 4;
  bool use_tqg = true;
  bool object_token_dedicated_ffn = false;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return 3 * patch_size * patch_size; }
  int seq_len() const { return 1 + num_patches() + max_text_len; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw std::invalid_argument("config: image_size must be a positive multiple of patch_size");
    if (embed_dim <= 0 || mme_heads <= 0 || embed_dim % mme_heads != 0)
      throw std::invalid_argument("config: embed_dim must be divisible by mme_heads");
    if (embed_dim % 4 != 0)
      throw std::invalid_argument("config: embed_dim must be divisible by 4 for 2D sine encoding");
    if (num_queries < 1) throw std::invalid_argument("config: num_queries must be >= 1");
    if (max_text_len < 1) throw std::invalid_argument("config: max_text_len must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("config: vocab_size must cover PAD and UNK");
    if (mme_layers < 1 || decoder_layers < 1 || tqg_layers < 1 || token_mlp_layers < 1)
      throw std::invalid_argument("config: layer counts must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// parameter blocks

template <typename T>
struct Linear {
  Tensor<T> w, b;
};

template <typename T>
struct AttnWeights {
  Linear<T> q, k, v, o;
};

template <typename T>
struct LayerNormW {
  Tensor<T> gain, bias;
};

// pre-norm 2-layer FFN with residual
template <typename T>
struct FfnBlock {
  LayerNormW<T> ln;
  Linear<T> w1, w2;
};

template <typename T>
struct MmeBlock {
  LayerNormW<T> ln_attn;
  AttnWeights<T> attn;
  FfnBlock<T> ffn_img;
  FfnBlock<T> ffn_text;
  std::optional<FfnBlock<T>> ffn_obj;  // only with a dedicated object expert
};

// bare cross-attention block; the query-generation residual is applied once
// at the end of the stack
template <typename T>
struct TqgBlock {
  AttnWeights<T> attn;
};

template <typename T>
struct DecoderBlock {
  LayerNormW<T> ln_self;
  AttnWeights<T> self_attn;
  LayerNormW<T> ln_cross;
  AttnWeights<T> cross_attn;
  FfnBlock<T> ffn;
};

// box regressor (3-layer MLP, sigmoid output) and foreground-score logit
template <typename T>
struct PredictionHeads {
  Linear<T> box1, box2, box3;
  Linear<T> score;
};

template <typename T>
struct ModelParams {
  Linear<T> patch_proj;
  Tensor<T> text_embedding;          // [V x C]
  Tensor<T> object_token;            // [1 x C]
  Tensor<T> pos_embed;               // [1+N+K x C], learned encoder positions
  std::vector<MmeBlock<T>> mme;
  LayerNormW<T> encoder_final_ln;
  Linear<T> image_proj;              // IP
  Linear<T> text_proj;               // TP
  Linear<T> object_proj;             // OP
  Tensor<T> init_queries;            // [N_oq x C]
  std::vector<TqgBlock<T>> tqg;
  std::vector<DecoderBlock<T>> decoder;
  std::vector<FfnBlock<T>> token_mlp;
  PredictionHeads<T> decoder_heads;
  PredictionHeads<T> token_heads;

  // stable name -> tensor registry; checkpoint order
  std::vector<std::pair<std::string, Tensor<T>*>> named();
  std::vector<Tensor<T>*> all() {
    std::vector<Tensor<T>*> out;
    for (auto& [n, t] : named()) out.push_back(t);
    return out;
  }
  void set_requires_grad() {
    for (Tensor<T>* t : all()) t->ensure_grad();
  }
  void zero_grad() {
    for (Tensor<T>* t : all()) t->zero_grad();
  }
  long long count() {
    long long n = 0;
    for (Tensor<T>* t : all()) n += t->numel();
    return n;
  }
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

// parameters exclusive to each branch (shared encoder/TQG excluded)
template <typename T>
long long decoder_branch_param_count(ModelParams<T>& p);
template <typename T>
long long token_branch_param_count(ModelParams<T>& p);

// ---------------------------------------------------------------------------
// forward types

template <typename T>
struct EncodedBatch {
  Tensor<T> image_tokens;        // [N x C]
  Tensor<T> text_tokens;         // [K x C]
  Tensor<T> object_token_out;    // [1 x C]
  std::vector<std::uint8_t> text_mask;  // 1 = padding
};

template <typename T>
struct BranchOutput {
  Tensor<T> boxes;         // [N_oq x 4] cxcywh, sigmoid-squashed
  Tensor<T> score_logits;  // [N_oq x 1]

  int num_queries() const { return boxes.shape[0]; }
  BoxCxCyWh box_at(int i) const {
    return {static_cast<double>(boxes.at(i, 0)), static_cast<double>(boxes.at(i, 1)),
            static_cast<double>(boxes.at(i, 2)), static_cast<double>(boxes.at(i, 3))};
  }
  double logit_at(int i) const { return static_cast<double>(score_logits.at(i, 0)); }
  double score_at(int i) const { return sigmoid_scalar(logit_at(i)); }
};

enum class ForwardMode { kTrain, kInferToken, kInferDecoder };

template <typename T>
struct ForwardResult {
  std::optional<BranchOutput<T>> decoder;
  std::optional<BranchOutput<T>> token;
};

// decoder cross-attention probabilities: probs[layer * heads + head] is
// [N_oq x N], rows summing to 1
template <typename T>
struct AttnTrace {
  int layers = 0;
  int heads = 0;
  std::vector<Tensor<T>> probs;
};

// ---------------------------------------------------------------------------
// encodings and submodule forwards

// standard interleaved sin/cos over positions 0..len-1; dim must be even
template <typename T>
Tensor<T> sine_pos_1d(int len, int dim);

// per-axis sin/cos halves over an n x n grid, row-major cells; dim % 4 == 0
template <typename T>
Tensor<T> sine_pos_2d(int n, int dim);

// non-overlapping patch flattening + linear projection; image is [3 x H x W]
template <typename T>
Tensor<T> visual_embed(const Tensor<T>& image, const ModelParams<T>& p, const ModelConfig& cfg);

template <typename T>
struct TextEmbedding {
  Tensor<T> tokens;                     // [K x C]
  std::vector<std::uint8_t> mask;       // [K], 1 = padding
};

// right-pads with PAD (id 0) to max_text_len, truncating longer inputs
template <typename T>
TextEmbedding<T> text_embed(const std::vector<int>& token_ids, const ModelParams<T>& p,
                            const ModelConfig& cfg);

template <typename T>
EncodedBatch<T> mme_forward(const Tensor<T>& image, const std::vector<int>& token_ids,
                            const ModelParams<T>& p, const ModelConfig& cfg);

// per-channel max over text rows after zeroing padded rows
template <typename T>
Tensor<T> mmp(const Tensor<T>& f_text, const std::vector<std::uint8_t>& mask) {
  return masked_max_pool(f_text, mask);
}

// Q = blocks(Q_init <- text) + MMP(f_text) + Q_init; f_text is the projected
// text stream, 1D sine positions are added on the key/value side
template <typename T>
Tensor<T> tqg_forward(const Tensor<T>& f_text, const std::vector<std::uint8_t>& mask,
                      const ModelParams<T>& p, const ModelConfig& cfg);

template <typename T>
BranchOutput<T> decoder_branch_forward(const EncodedBatch<T>& enc, const ModelParams<T>& p,
                                       const ModelConfig& cfg, AttnTrace<T>* trace = nullptr,
                                       const Tensor<T>* precomputed_queries = nullptr);

template <typename T>
BranchOutput<T> token_branch_forward(const EncodedBatch<T>& enc, const ModelParams<T>& p,
                                     const ModelConfig& cfg,
                                     const Tensor<T>* precomputed_queries = nullptr);

template <typename T>
ForwardResult<T> forward(const Tensor<T>& image, const std::vector<int>& token_ids,
                         const ModelParams<T>& p, const ModelConfig& cfg, ForwardMode mode,
                         AttnTrace<T>* trace = nullptr);

// MACs spent inside branch-exclusive computation during the enclosing scope
inline unsigned long long& decoder_branch_macs();
inline unsigned long long& token_branch_macs();

}  // namespace vg

#include "vglab/model_impl.hpp"
