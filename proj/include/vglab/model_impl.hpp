#pragma once

// implementation of model.hpp

#include <cmath>
#include <stdexcept>

namespace vg {

// ---------------------------------------------------------------------------
// parameters

namespace detail {

// fan-in scaled truncated normal; plain 0.02 would starve narrow toy widths
template <typename T>
Linear<T> init_linear(int in, int out, Rng& rng) {
  Linear<T> l;
  l.w = randn<T>({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  l.b = Tensor<T>::zeros({out});
  return l;
}

template <typename T>
LayerNormW<T> init_ln(int dim) {
  LayerNormW<T> ln;
  ln.gain = Tensor<T>::full({dim}, T(1));
  ln.bias = Tensor<T>::zeros({dim});
  return ln;
}

template <typename T>
AttnWeights<T> init_attn(int dim, Rng& rng) {
  AttnWeights<T> a;
  a.q = init_linear<T>(dim, dim, rng);
  a.k = init_linear<T>(dim, dim, rng);
  a.v = init_linear<T>(dim, dim, rng);
  a.o = init_linear<T>(dim, dim, rng);
  return a;
}

template <typename T>
FfnBlock<T> init_ffn(int dim, int mult, Rng& rng) {
  FfnBlock<T> f;
  f.ln = init_ln<T>(dim);
  f.w1 = init_linear<T>(dim, dim * mult, rng);
  f.w2 = init_linear<T>(dim * mult, dim, rng);
  return f;
}

template <typename T>
PredictionHeads<T> init_heads(int dim, Rng& rng) {
  PredictionHeads<T> h;
  h.box1 = init_linear<T>(dim, dim, rng);
  h.box2 = init_linear<T>(dim, dim, rng);
  h.box3 = init_linear<T>(dim, 4, rng);
  h.score = init_linear<T>(dim, 1, rng);
  return h;
}

template <typename T>
void reg_linear(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& name,
                Linear<T>& l) {
  out.emplace_back(name + ".w", &l.w);
  out.emplace_back(name + ".b", &l.b);
}

template <typename T>
void reg_ln(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& name,
            LayerNormW<T>& ln) {
  out.emplace_back(name + ".gain", &ln.gain);
  out.emplace_back(name + ".bias", &ln.bias);
}

template <typename T>
void reg_attn(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& name,
              AttnWeights<T>& a) {
  reg_linear(out, name + ".q", a.q);
  reg_linear(out, name + ".k", a.k);
  reg_linear(out, name + ".v", a.v);
  reg_linear(out, name + ".o", a.o);
}

template <typename T>
void reg_ffn(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& name,
             FfnBlock<T>& f) {
  reg_ln(out, name + ".ln", f.ln);
  reg_linear(out, name + ".w1", f.w1);
  reg_linear(out, name + ".w2", f.w2);
}

template <typename T>
void reg_heads(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& name,
               PredictionHeads<T>& h) {
  reg_linear(out, name + ".box1", h.box1);
  reg_linear(out, name + ".box2", h.box2);
  reg_linear(out, name + ".box3", h.box3);
  reg_linear(out, name + ".score", h.score);
}

}  // namespace detail

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelParams<T>::named() {
  using namespace detail;
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  reg_linear(out, "patch_proj", patch_proj);
  out.emplace_back("text_embedding", &text_embedding);
  out.emplace_back("object_token", &object_token);
  out.emplace_back("pos_embed", &pos_embed);
  for (std::size_t i = 0; i < mme.size(); ++i) {
    const std::string base = "mme." + std::to_string(i);
    reg_ln(out, base + ".ln_attn", mme[i].ln_attn);
    reg_attn(out, base + ".attn", mme[i].attn);
    reg_ffn(out, base + ".ffn_img", mme[i].ffn_img);
    reg_ffn(out, base + ".ffn_text", mme[i].ffn_text);
    if (mme[i].ffn_obj) reg_ffn(out, base + ".ffn_obj", *mme[i].ffn_obj);
  }
  reg_ln(out, "encoder_final_ln", encoder_final_ln);
  reg_linear(out, "image_proj", image_proj);
  reg_linear(out, "text_proj", text_proj);
  reg_linear(out, "object_proj", object_proj);
  out.emplace_back("init_queries", &init_queries);
  for (std::size_t i = 0; i < tqg.size(); ++i)
    reg_attn(out, "tqg." + std::to_string(i) + ".attn", tqg[i].attn);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const std::string base = "decoder." + std::to_string(i);
    reg_ln(out, base + ".ln_self", decoder[i].ln_self);
    reg_attn(out, base + ".self_attn", decoder[i].self_attn);
    reg_ln(out, base + ".ln_cross", decoder[i].ln_cross);
    reg_attn(out, base + ".cross_attn", decoder[i].cross_attn);
    reg_ffn(out, base + ".ffn", decoder[i].ffn);
  }
  for (std::size_t i = 0; i < token_mlp.size(); ++i)
    reg_ffn(out, "token_mlp." + std::to_string(i), token_mlp[i]);
  reg_heads(out, "decoder_heads", decoder_heads);
  reg_heads(out, "token_heads", token_heads);
  return out;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  using namespace detail;
  cfg.validate();
  Rng rng(seed);
  const int c = cfg.embed_dim;
  ModelParams<T> p;
  p.patch_proj = init_linear<T>(cfg.patch_dim(), c, rng);
  p.text_embedding = randn<T>({cfg.vocab_size, c}, rng, 0.02);
  p.object_token = randn<T>({1, c}, rng, 0.02);
  p.pos_embed = randn<T>({cfg.seq_len(), c}, rng, 0.02);
  for (int i = 0; i < cfg.mme_layers; ++i) {
    MmeBlock<T> b;
    b.ln_attn = init_ln<T>(c);
    b.attn = init_attn<T>(c, rng);
    b.ffn_img = init_ffn<T>(c, cfg.ffn_mult, rng);
    b.ffn_text = init_ffn<T>(c, cfg.ffn_mult, rng);
    if (cfg.object_token_dedicated_ffn) b.ffn_obj = init_ffn<T>(c, cfg.ffn_mult, rng);
    p.mme.push_back(std::move(b));
  }
  p.encoder_final_ln = init_ln<T>(c);
  p.image_proj = init_linear<T>(c, c, rng);
  p.text_proj = init_linear<T>(c, c, rng);
  p.object_proj = init_linear<T>(c, c, rng);
  p.init_queries = randn<T>({cfg.num_queries, c}, rng, 0.02);
  for (int i = 0; i < cfg.tqg_layers; ++i) p.tqg.push_back(TqgBlock<T>{init_attn<T>(c, rng)});
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    DecoderBlock<T> b;
    b.ln_self = init_ln<T>(c);
    b.self_attn = init_attn<T>(c, rng);
    b.ln_cross = init_ln<T>(c);
    b.cross_attn = init_attn<T>(c, rng);
    b.ffn = init_ffn<T>(c, cfg.ffn_mult, rng);
    p.decoder.push_back(std::move(b));
  }
  for (int i = 0; i < cfg.token_mlp_layers; ++i)
    p.token_mlp.push_back(init_ffn<T>(c, cfg.ffn_mult, rng));
  p.decoder_heads = init_heads<T>(c, rng);
  p.token_heads = init_heads<T>(c, rng);
  return p;
}

namespace detail {

template <typename T>
long long count_linear(const Linear<T>& l) {
  return l.w.numel() + l.b.numel();
}
template <typename T>
long long count_attn(const AttnWeights<T>& a) {
  return count_linear(a.q) + count_linear(a.k) + count_linear(a.v) + count_linear(a.o);
}
template <typename T>
long long count_ffn(const FfnBlock<T>& f) {
  return f.ln.gain.numel() + f.ln.bias.numel() + count_linear(f.w1) + count_linear(f.w2);
}
template <typename T>
long long count_heads(const PredictionHeads<T>& h) {
  return count_linear(h.box1) + count_linear(h.box2) + count_linear(h.box3) +
         count_linear(h.score);
}

}  // namespace detail

template <typename T>
long long decoder_branch_param_count(ModelParams<T>& p) {
  long long n = detail::count_linear(p.image_proj) + detail::count_heads(p.decoder_heads);
  for (auto& b : p.decoder) {
    n += b.ln_self.gain.numel() + b.ln_self.bias.numel() + detail::count_attn(b.self_attn);
    n += b.ln_cross.gain.numel() + b.ln_cross.bias.numel() + detail::count_attn(b.cross_attn);
    n += detail::count_ffn(b.ffn);
  }
  return n;
}

template <typename T>
long long token_branch_param_count(ModelParams<T>& p) {
  long long n = detail::count_linear(p.object_proj) + detail::count_heads(p.token_heads);
  for (auto& b : p.token_mlp) n += detail::count_ffn(b);
  return n;
}

// ---------------------------------------------------------------------------
// encodings

template <typename T>
Tensor<T> sine_pos_1d(int len, int dim) {
  if (dim % 2 != 0) throw std::invalid_argument("sine_pos_1d: dim must be even");
  Tensor<T> out = Tensor<T>::zeros({len, dim});
  for (int pos = 0; pos < len; ++pos) {
    for (int i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, static_cast<double>(i) / dim);
      out.at(pos, i) = static_cast<T>(std::sin(pos / freq));
      out.at(pos, i + 1) = static_cast<T>(std::cos(pos / freq));
    }
  }
  return out;
}

template <typename T>
Tensor<T> sine_pos_2d(int n, int dim) {
  if (dim % 4 != 0) throw std::invalid_argument("sine_pos_2d: dim must be divisible by 4");
  const int half = dim / 2;
  Tensor<T> out = Tensor<T>::zeros({n * n, dim});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const int row = y * n + x;
      for (int j = 0; j < half; ++j) {
        const double freq = std::pow(10000.0, 2.0 * (j / 2) / half);
        const double vy = y / freq, vx = x / freq;
        out.at(row, j) = static_cast<T>(j % 2 == 0 ? std::sin(vy) : std::cos(vy));
        out.at(row, half + j) = static_cast<T>(j % 2 == 0 ? std::sin(vx) : std::cos(vx));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// shared building blocks

namespace detail {

template <typename T>
Tensor<T> linear_fwd(const Tensor<T>& x, const Linear<T>& l) {
  return add_rowvec(matmul(x, l.w), l.b);
}

// multi-head attention; key positions with mask==1 are unreachable
template <typename T>
Tensor<T> mha(const Tensor<T>& q_in, const Tensor<T>& kv_in,
              const std::vector<std::uint8_t>& key_mask, const AttnWeights<T>& w, int heads,
              std::vector<Tensor<T>>* prob_sink = nullptr) {
  const int c = q_in.cols();
  const int d = c / heads;
  Tensor<T> q = linear_fwd(q_in, w.q);
  Tensor<T> k = linear_fwd(kv_in, w.k);
  Tensor<T> v = linear_fwd(kv_in, w.v);
  std::vector<Tensor<T>> outs;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  for (int h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_cols(q, h * d, (h + 1) * d);
    Tensor<T> kh = slice_cols(k, h * d, (h + 1) * d);
    Tensor<T> vh = slice_cols(v, h * d, (h + 1) * d);
    Tensor<T> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
    Tensor<T> probs = masked_softmax(scores, key_mask);
    if (prob_sink) prob_sink->push_back(probs.detach());
    outs.push_back(matmul(probs, vh));
  }
  return linear_fwd(concat_cols(outs), w.o);
}

template <typename T>
Tensor<T> ffn_fwd(const Tensor<T>& x, const FfnBlock<T>& f, T eps = T(1e-5)) {
  Tensor<T> h = layer_norm(x, f.ln.gain, f.ln.bias, eps);
  h = linear_fwd(h, f.w1);
  h = gelu(h);
  h = linear_fwd(h, f.w2);
  return add(x, h);
}

template <typename T>
Tensor<T> box_head_fwd(const Tensor<T>& x, const PredictionHeads<T>& h) {
  Tensor<T> y = relu(linear_fwd(x, h.box1));
  y = relu(linear_fwd(y, h.box2));
  return sigmoid(linear_fwd(y, h.box3));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// embedding ops

template <typename T>
Tensor<T> visual_embed(const Tensor<T>& image, const ModelParams<T>& p, const ModelConfig& cfg) {
  const Shape want{3, cfg.image_size, cfg.image_size};
  if (image.shape != want)
    throw std::invalid_argument("visual_embed: expected image " + shape_str(want) + ", got " +
                                shape_str(image.shape));
  const int g = cfg.grid(), ps = cfg.patch_size, hw = cfg.image_size;
  Tensor<T> patches = Tensor<T>::zeros({g * g, cfg.patch_dim()});
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      T* row = patches.data->data() + static_cast<std::size_t>(gy * g + gx) * cfg.patch_dim();
      int idx = 0;
      for (int ch = 0; ch < 3; ++ch)
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px)
            row[idx++] = (*image.data)[(static_cast<std::size_t>(ch) * hw + gy * ps + py) * hw +
                                       gx * ps + px];
    }
  }
  return detail::linear_fwd(patches, p.patch_proj);
}

template <typename T>
TextEmbedding<T> text_embed(const std::vector<int>& token_ids, const ModelParams<T>& p,
                            const ModelConfig& cfg) {
  const int k = cfg.max_text_len;
  std::vector<int> ids(token_ids.begin(),
                       token_ids.begin() + std::min<std::size_t>(token_ids.size(), k));
  TextEmbedding<T> out;
  out.mask.assign(k, 0);
  for (int i = static_cast<int>(ids.size()); i < k; ++i) out.mask[i] = 1;
  ids.resize(k, 0);  // PAD id
  out.tokens = embedding(p.text_embedding, ids);
  return out;
}

// ---------------------------------------------------------------------------
// encoder

template <typename T>
EncodedBatch<T> mme_forward(const Tensor<T>& image, const std::vector<int>& token_ids,
                            const ModelParams<T>& p, const ModelConfig& cfg) {
  const int n = cfg.num_patches(), k = cfg.max_text_len;
  Tensor<T> img = visual_embed(image, p, cfg);
  TextEmbedding<T> txt = text_embed(token_ids, p, cfg);

  std::vector<std::uint8_t> seq_mask(cfg.seq_len(), 0);
  std::copy(txt.mask.begin(), txt.mask.end(), seq_mask.begin() + 1 + n);

  Tensor<T> seq = concat_rows<T>({p.object_token, img, txt.tokens});
  seq = add(seq, p.pos_embed);

  for (const MmeBlock<T>& blk : p.mme) {
    Tensor<T> h = layer_norm(seq, blk.ln_attn.gain, blk.ln_attn.bias, T(1e-5));
    seq = add(seq, detail::mha(h, h, seq_mask, blk.attn, cfg.mme_heads));
    // modality-expert FFNs: the object token shares the image expert unless
    // a dedicated one is configured
    Tensor<T> obj_rows = slice_rows(seq, 0, 1);
    Tensor<T> img_rows = slice_rows(seq, 1, 1 + n);
    Tensor<T> txt_rows = slice_rows(seq, 1 + n, 1 + n + k);
    obj_rows = detail::ffn_fwd(obj_rows, blk.ffn_obj ? *blk.ffn_obj : blk.ffn_img);
    img_rows = detail::ffn_fwd(img_rows, blk.ffn_img);
    txt_rows = detail::ffn_fwd(txt_rows, blk.ffn_text);
    seq = concat_rows<T>({obj_rows, img_rows, txt_rows});
  }
  seq = layer_norm(seq, p.encoder_final_ln.gain, p.encoder_final_ln.bias, T(1e-5));

  EncodedBatch<T> enc;
  enc.object_token_out = slice_rows(seq, 0, 1);
  enc.image_tokens = slice_rows(seq, 1, 1 + n);
  enc.text_tokens = slice_rows(seq, 1 + n, 1 + n + k);
  enc.text_mask = txt.mask;
  return enc;
}

// ---------------------------------------------------------------------------
// query generation and branches

template <typename T>
Tensor<T> tqg_forward(const Tensor<T>& f_text, const std::vector<std::uint8_t>& mask,
                      const ModelParams<T>& p, const ModelConfig& cfg) {
  Tensor<T> kv = add(f_text, sine_pos_1d<T>(cfg.max_text_len, cfg.embed_dim));
  Tensor<T> cur = p.init_queries;
  for (const TqgBlock<T>& blk : p.tqg)
    cur = detail::mha(cur, kv, mask, blk.attn, cfg.mme_heads);
  cur = add_rowvec(cur, mmp(f_text, mask));
  return add(cur, p.init_queries);
}

inline unsigned long long& decoder_branch_macs() {
  static thread_local unsigned long long v = 0;
  return v;
}

inline unsigned long long& token_branch_macs() {
  static thread_local unsigned long long v = 0;
  return v;
}

namespace detail {

// queries come from TQG when enabled, otherwise the raw learned queries
template <typename T>
Tensor<T> make_queries(const EncodedBatch<T>& enc, const ModelParams<T>& p,
                       const ModelConfig& cfg) {
  if (!cfg.use_tqg) return p.init_queries;
  Tensor<T> tp = linear_fwd(enc.text_tokens, p.text_proj);
  return tqg_forward(tp, enc.text_mask, p, cfg);
}

}  // namespace detail

template <typename T>
BranchOutput<T> decoder_branch_forward(const EncodedBatch<T>& enc, const ModelParams<T>& p,
                                       const ModelConfig& cfg, AttnTrace<T>* trace,
                                       const Tensor<T>* precomputed_queries) {
  Tensor<T> queries =
      precomputed_queries ? *precomputed_queries : detail::make_queries(enc, p, cfg);
  MacScope mac_scope(&decoder_branch_macs());
  Tensor<T> kv =
      add(detail::linear_fwd(enc.image_tokens, p.image_proj), sine_pos_2d<T>(cfg.grid(), cfg.embed_dim));
  const std::vector<std::uint8_t> no_mask_img(cfg.num_patches(), 0);
  const std::vector<std::uint8_t> no_mask_q(cfg.num_queries, 0);
  if (trace) {
    trace->layers = cfg.decoder_layers;
    trace->heads = cfg.mme_heads;
    trace->probs.clear();
  }
  Tensor<T> cur = queries;
  for (const DecoderBlock<T>& blk : p.decoder) {
    Tensor<T> h = layer_norm(cur, blk.ln_self.gain, blk.ln_self.bias, T(1e-5));
    cur = add(cur, detail::mha(h, h, no_mask_q, blk.self_attn, cfg.mme_heads));
    h = layer_norm(cur, blk.ln_cross.gain, blk.ln_cross.bias, T(1e-5));
    cur = add(cur, detail::mha(h, kv, no_mask_img, blk.cross_attn, cfg.mme_heads,
                               trace ? &trace->probs : nullptr));
    cur = detail::ffn_fwd(cur, blk.ffn);
  }
  BranchOutput<T> out;
  out.boxes = detail::box_head_fwd(cur, p.decoder_heads);
  out.score_logits = detail::linear_fwd(cur, p.decoder_heads.score);
  return out;
}

template <typename T>
BranchOutput<T> token_branch_forward(const EncodedBatch<T>& enc, const ModelParams<T>& p,
                                     const ModelConfig& cfg,
                                     const Tensor<T>* precomputed_queries) {
  Tensor<T> queries =
      precomputed_queries ? *precomputed_queries : detail::make_queries(enc, p, cfg);
  MacScope mac_scope(&token_branch_macs());
  Tensor<T> obj = detail::linear_fwd(enc.object_token_out, p.object_proj);  // [1 x C]
  Tensor<T> cur = add_rowvec(queries, obj);
  for (const FfnBlock<T>& blk : p.token_mlp) cur = detail::ffn_fwd(cur, blk);
  BranchOutput<T> out;
  out.boxes = detail::box_head_fwd(cur, p.token_heads);
  out.score_logits = detail::linear_fwd(cur, p.token_heads.score);
  return out;
}

template <typename T>
ForwardResult<T> forward(const Tensor<T>& image, const std::vector<int>& token_ids,
                         const ModelParams<T>& p, const ModelConfig& cfg, ForwardMode mode,
                         AttnTrace<T>* trace) {
  EncodedBatch<T> enc = mme_forward(image, token_ids, p, cfg);
  Tensor<T> queries = detail::make_queries(enc, p, cfg);
  ForwardResult<T> out;
  if (mode != ForwardMode::kInferToken)
    out.decoder = decoder_branch_forward(enc, p, cfg, trace, &queries);
  if (mode != ForwardMode::kInferDecoder)
    out.token = token_branch_forward(enc, p, cfg, &queries);
  return out;
}

}  // namespace vg
