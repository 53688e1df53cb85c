#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/common.hpp"
#include "salsa/eval.hpp"
#include "salsa/synth_data.hpp"
#include "salsa/tensor.hpp"
#include "salsa/tokenizer.hpp"

namespace salsa {

struct ModelConfig {
  int n_layers = 2;
  int model_dim = 64;
  int n_heads = 4;
  int ffn_dim = 128;
  int vocab_size = 258;
  int max_positions = 64;

  void validate() const {
    require(n_layers >= 1 && model_dim >= 1 && n_heads >= 1 && ffn_dim >= 1 && vocab_size >= 1 && max_positions >= 1,
            "model config: all fields must be positive");
    require(model_dim % n_heads == 0, "model config: model_dim must be divisible by n_heads");
  }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers},   {"model_dim", model_dim},   {"n_heads", n_heads},
            {"ffn_dim", ffn_dim},     {"vocab_size", vocab_size}, {"max_positions", max_positions}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.validate();
    return c;
  }
};

// Pre-norm block: x += Attn(LN(x)); [x += CrossAttn(LN(x), memory);] x += FFN(LN(x)).
template <typename S>
struct TransformerLayer {
  Tensor<S> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  bool has_cross = false;
  Tensor<S> lnx_g, lnx_b, xwq, xbq, xwk, xbk, xwv, xbv, xwo, xbo;
  Tensor<S> ln2_g, ln2_b, w1, b1, w2, b2;

  /// Fan-in scaled init; residual output projections are further damped by
  /// 1/sqrt(2*n_layers) so deep stacks start near-linear.
  static TransformerLayer init(int dim, int ffn_dim, bool cross, std::mt19937_64& rng, int n_layers_total = 1) {
    TransformerLayer l;
    const S resid = S(1) / std::sqrt(S(2 * std::max(1, n_layers_total)));
    auto w = [&](int r, int c, S extra = S(1)) { return Tensor<S>::randn({r, c}, rng, extra / std::sqrt(S(r))); };
    l.ln1_g = Tensor<S>::full({dim}, S(1));
    l.ln1_b = Tensor<S>::zeros({dim});
    l.wq = w(dim, dim);
    l.bq = Tensor<S>::zeros({dim});
    l.wk = w(dim, dim);
    l.bk = Tensor<S>::zeros({dim});
    l.wv = w(dim, dim);
    l.bv = Tensor<S>::zeros({dim});
    l.wo = w(dim, dim, resid);
    l.bo = Tensor<S>::zeros({dim});
    l.has_cross = cross;
    if (cross) {
      l.lnx_g = Tensor<S>::full({dim}, S(1));
      l.lnx_b = Tensor<S>::zeros({dim});
      l.xwq = w(dim, dim);
      l.xbq = Tensor<S>::zeros({dim});
      l.xwk = w(dim, dim);
      l.xbk = Tensor<S>::zeros({dim});
      l.xwv = w(dim, dim);
      l.xbv = Tensor<S>::zeros({dim});
      l.xwo = w(dim, dim, resid);
      l.xbo = Tensor<S>::zeros({dim});
    }
    l.ln2_g = Tensor<S>::full({dim}, S(1));
    l.ln2_b = Tensor<S>::zeros({dim});
    l.w1 = w(dim, ffn_dim);
    l.b1 = Tensor<S>::zeros({ffn_dim});
    l.w2 = w(ffn_dim, dim, resid);
    l.b2 = Tensor<S>::zeros({dim});
    return l;
  }

  void register_params(const std::string& prefix, std::vector<std::pair<std::string, Tensor<S>>>& out) const {
    auto add = [&](const char* n, const Tensor<S>& t) { out.emplace_back(prefix + n, t); };
    add("ln1.g", ln1_g);
    add("ln1.b", ln1_b);
    add("attn.wq", wq);
    add("attn.bq", bq);
    add("attn.wk", wk);
    add("attn.bk", bk);
    add("attn.wv", wv);
    add("attn.bv", bv);
    add("attn.wo", wo);
    add("attn.bo", bo);
    if (has_cross) {
      add("lnx.g", lnx_g);
      add("lnx.b", lnx_b);
      add("cross.wq", xwq);
      add("cross.bq", xbq);
      add("cross.wk", xwk);
      add("cross.bk", xbk);
      add("cross.wv", xwv);
      add("cross.bv", xbv);
      add("cross.wo", xwo);
      add("cross.bo", xbo);
    }
    add("ln2.g", ln2_g);
    add("ln2.b", ln2_b);
    add("ffn.w1", w1);
    add("ffn.b1", b1);
    add("ffn.w2", w2);
    add("ffn.b2", b2);
  }
};

/// Shared batched forward over packed segments. Per-layer residual-stream
/// outputs can be captured, and per-layer additive injections applied after
/// each block (before the next layer consumes the stream).
template <typename S>
Tensor<S> transformer_stack(const std::vector<TransformerLayer<S>>& layers, Tensor<S> x,
                            const std::vector<AttnSegment>& self_segs, int n_heads, bool causal,
                            const Tensor<S>* memory = nullptr, const std::vector<AttnSegment>* cross_segs = nullptr,
                            const std::map<int, Tensor<S>>* injections = nullptr,
                            std::vector<Tensor<S>>* capture_layer_outputs = nullptr) {
  const int dim = x.dim(1);
  const S att_scale = S(1) / std::sqrt(S(dim / n_heads));
  int layer_no = 0;
  for (const auto& l : layers) {
    ++layer_no;
    {
      auto a = layer_norm(x, l.ln1_g, l.ln1_b);
      auto q = add_bias(matmul(a, l.wq), l.bq);
      auto k = add_bias(matmul(a, l.wk), l.bk);
      auto v = add_bias(matmul(a, l.wv), l.bv);
      auto attn = segmented_attention(q, k, v, self_segs, n_heads, causal, att_scale);
      x = add(x, add_bias(matmul(attn, l.wo), l.bo));
    }
    if (l.has_cross) {
      require(memory != nullptr && cross_segs != nullptr, "transformer_stack: cross-attention needs memory");
      auto a = layer_norm(x, l.lnx_g, l.lnx_b);
      auto q = add_bias(matmul(a, l.xwq), l.xbq);
      auto k = add_bias(matmul(*memory, l.xwk), l.xbk);
      auto v = add_bias(matmul(*memory, l.xwv), l.xbv);
      auto attn = segmented_attention(q, k, v, *cross_segs, n_heads, false, att_scale);
      x = add(x, add_bias(matmul(attn, l.xwo), l.xbo));
    }
    {
      auto f = layer_norm(x, l.ln2_g, l.ln2_b);
      x = add(x, add_bias(matmul(silu(add_bias(matmul(f, l.w1), l.b1)), l.w2), l.b2));
    }
    if (injections) {
      auto it = injections->find(layer_no);
      if (it != injections->end()) x = add(x, it->second);
    }
    if (capture_layer_outputs) capture_layer_outputs->push_back(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Raw (graph-free) per-vector kernels for the incremental sessions.
// ---------------------------------------------------------------------------

namespace rawops {

template <typename S>
using VecMapT = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstVecMapT = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

/// y = x * W + b with W: [in, out] row-major.
template <typename S>
void linear(const Tensor<S>& w, const Tensor<S>& b, const S* x, S* y) {
  const int in = w.dim(0), out = w.dim(1);
  ConstMatMap<S> W(w.data(), in, out);
  ConstVecMapT<S> xv(x, in);
  VecMapT<S> yv(y, out);
  yv.noalias() = W.transpose() * xv;
  ConstVecMapT<S> bv(b.data(), out);
  yv += bv;
}

template <typename S>
void layer_norm_vec(const Tensor<S>& gain, const Tensor<S>& bias, const S* x, S* y, S eps = S(1e-5)) {
  const int d = gain.dim(0);
  S mean = 0;
  for (int j = 0; j < d; ++j) mean += x[j];
  mean /= S(d);
  S var = 0;
  for (int j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= S(d);
  const S r = S(1) / std::sqrt(var + eps);
  for (int j = 0; j < d; ++j) y[j] = gain.data()[j] * ((x[j] - mean) * r) + bias.data()[j];
}

/// Multi-head attention of one query vector against a [rows x dim] cache.
/// Appends the result of out-projection-free attention into `out` (size dim).
template <typename S>
void attend(const S* q, const std::vector<S>& k_cache, const std::vector<S>& v_cache, int rows, int dim, int n_heads,
            std::vector<S>& out, std::vector<S>& scores_scratch) {
  const int hd = dim / n_heads;
  const S att_scale = S(1) / std::sqrt(S(hd));
  out.assign(size_t(dim), S(0));
  scores_scratch.resize(size_t(rows));
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * hd;
    for (int r = 0; r < rows; ++r) {
      const S* kr = k_cache.data() + size_t(r) * size_t(dim) + size_t(off);
      S dot = 0;
      for (int j = 0; j < hd; ++j) dot += q[off + j] * kr[j];
      scores_scratch[size_t(r)] = dot * att_scale;
    }
    softmax_rows(scores_scratch.data(), 1, rows);
    for (int r = 0; r < rows; ++r) {
      const S p = scores_scratch[size_t(r)];
      const S* vr = v_cache.data() + size_t(r) * size_t(dim) + size_t(off);
      for (int j = 0; j < hd; ++j) out[size_t(off + j)] += p * vr[j];
    }
  }
}

}  // namespace rawops

// ---------------------------------------------------------------------------
// Decoder-only LM
// ---------------------------------------------------------------------------

template <typename S>
class LmModel {
 public:
  ModelConfig cfg;
  Tensor<S> tok_emb, pos_emb;  // [V, d], [P, d]
  std::vector<TransformerLayer<S>> layers;
  Tensor<S> lnf_g, lnf_b;
  Tensor<S> w_out;  // [d, V]

  static LmModel init(const ModelConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    LmModel m;
    m.cfg = cfg;
    m.tok_emb = Tensor<S>::randn({cfg.vocab_size, cfg.model_dim}, rng, S(0.02));
    m.pos_emb = Tensor<S>::randn({cfg.max_positions, cfg.model_dim}, rng, S(0.1));
    for (int i = 0; i < cfg.n_layers; ++i)
      m.layers.push_back(TransformerLayer<S>::init(cfg.model_dim, cfg.ffn_dim, false, rng, cfg.n_layers));
    m.lnf_g = Tensor<S>::full({cfg.model_dim}, S(1));
    m.lnf_b = Tensor<S>::zeros({cfg.model_dim});
    m.w_out = Tensor<S>::randn({cfg.model_dim, cfg.vocab_size}, rng, S(1) / std::sqrt(S(cfg.model_dim)));
    m.set_requires_grad(true);
    return m;
  }

  std::vector<std::pair<std::string, Tensor<S>>> params() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i) layers[i].register_params("layers." + std::to_string(i) + ".", out);
    out.emplace_back("lnf.g", lnf_g);
    out.emplace_back("lnf.b", lnf_b);
    out.emplace_back("w_out", w_out);
    return out;
  }

  void set_requires_grad(bool b) {
    for (auto& [name, t] : params()) const_cast<Tensor<S>&>(t).set_requires_grad(b);
  }

  /// Teacher-forced logits over packed segments; injections (1-based layer ->
  /// [N, d]) are added to the residual stream after the named block.
  Tensor<S> forward_concat(const std::vector<int>& tokens, const std::vector<int>& positions,
                           const std::vector<AttnSegment>& segs,
                           const std::map<int, Tensor<S>>* injections = nullptr) const {
    require(tokens.size() == positions.size(), "lm forward: tokens/positions mismatch");
    auto x = add(embedding(tok_emb, tokens), embedding(pos_emb, positions));
    x = transformer_stack<S>(layers, x, segs, cfg.n_heads, true, nullptr, nullptr, injections, nullptr);
    return matmul(layer_norm(x, lnf_g, lnf_b), w_out);
  }
};

/// Incremental decoding state for the LM: per-layer KV caches, the consumed
/// token ids, and each layer's residual-stream output at the newest position.
template <typename S>
class LmSession {
 public:
  explicit LmSession(const LmModel<S>& m) : model_(&m) {
    k_cache_.resize(size_t(m.cfg.n_layers));
    v_cache_.resize(size_t(m.cfg.n_layers));
    last_outputs_.assign(size_t(m.cfg.n_layers), std::vector<S>(size_t(m.cfg.model_dim), S(0)));
  }

  /// One autoregressive step. Injections map 1-based layer -> residual vector
  /// added after that block (and so seen by every later layer and by this
  /// position's cached keys/values at those layers).
  std::vector<S> step(int token, const std::map<int, std::vector<S>>& injections = {}) {
    const auto& m = *model_;
    const int d = m.cfg.model_dim, heads = m.cfg.n_heads;
    const int pos = int(consumed_.size());
    require(pos < m.cfg.max_positions, "lm session: max_positions exceeded");
    require(token >= 0 && token < m.cfg.vocab_size, "lm session: token id out of range");
    for (const auto& [layer, vec] : injections) {
      require(layer >= 1 && layer <= m.cfg.n_layers, "lm session: injection layer out of range");
      require(int(vec.size()) == d, "lm session: injection dim mismatch");
    }

    std::vector<S> x(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
      x[size_t(j)] = m.tok_emb.data()[size_t(token) * size_t(d) + size_t(j)] +
                     m.pos_emb.data()[size_t(pos) * size_t(d) + size_t(j)];

    std::vector<S> a(static_cast<size_t>(d)), q(static_cast<size_t>(d)), kn(static_cast<size_t>(d)),
        vn(static_cast<size_t>(d)), attn, proj(static_cast<size_t>(d)), scores;
    std::vector<S> f(static_cast<size_t>(d)), h1(static_cast<size_t>(m.cfg.ffn_dim));
    for (int li = 0; li < m.cfg.n_layers; ++li) {
      const auto& l = m.layers[size_t(li)];
      rawops::layer_norm_vec(l.ln1_g, l.ln1_b, x.data(), a.data());
      rawops::linear(l.wq, l.bq, a.data(), q.data());
      rawops::linear(l.wk, l.bk, a.data(), kn.data());
      rawops::linear(l.wv, l.bv, a.data(), vn.data());
      k_cache_[size_t(li)].insert(k_cache_[size_t(li)].end(), kn.begin(), kn.end());
      v_cache_[size_t(li)].insert(v_cache_[size_t(li)].end(), vn.begin(), vn.end());
      rawops::attend(q.data(), k_cache_[size_t(li)], v_cache_[size_t(li)], pos + 1, d, heads, attn, scores);
      rawops::linear(l.wo, l.bo, attn.data(), proj.data());
      for (int j = 0; j < d; ++j) x[size_t(j)] += proj[size_t(j)];

      rawops::layer_norm_vec(l.ln2_g, l.ln2_b, x.data(), f.data());
      rawops::linear(l.w1, l.b1, f.data(), h1.data());
      for (auto& h : h1) h = h * (S(1) / (S(1) + std::exp(-h)));
      rawops::linear(l.w2, l.b2, h1.data(), proj.data());
      for (int j = 0; j < d; ++j) x[size_t(j)] += proj[size_t(j)];

      auto it = injections.find(li + 1);
      if (it != injections.end())
        for (int j = 0; j < d; ++j) x[size_t(j)] += it->second[size_t(j)];
      last_outputs_[size_t(li)] = x;
    }
    consumed_.push_back(token);

    std::vector<S> logits(static_cast<size_t>(m.cfg.vocab_size));
    rawops::layer_norm_vec(m.lnf_g, m.lnf_b, x.data(), f.data());
    ConstMatMap<S> W(m.w_out.data(), d, m.cfg.vocab_size);
    rawops::ConstVecMapT<S> fv(f.data(), d);
    rawops::VecMapT<S> lv(logits.data(), m.cfg.vocab_size);
    lv.noalias() = W.transpose() * fv;
    return logits;
  }

  const std::vector<std::vector<S>>& last_layer_outputs() const { return last_outputs_; }
  const std::vector<int>& consumed() const { return consumed_; }
  int consumed_count() const { return int(consumed_.size()); }
  const std::vector<S>& k_cache(int layer_idx) const { return k_cache_[size_t(layer_idx)]; }
  const std::vector<S>& v_cache(int layer_idx) const { return v_cache_[size_t(layer_idx)]; }
  const LmModel<S>& model() const { return *model_; }

 private:
  const LmModel<S>* model_;
  std::vector<std::vector<S>> k_cache_, v_cache_;  // per layer, rows of [pos, d]
  std::vector<int> consumed_;
  std::vector<std::vector<S>> last_outputs_;
};

// ---------------------------------------------------------------------------
// Encoder-decoder ASR
// ---------------------------------------------------------------------------

struct AsrConfig {
  ModelConfig encoder;  // vocab_size unused on the encoder side
  ModelConfig decoder;
  int feat_dim = 16;

  void validate() const {
    encoder.validate();
    decoder.validate();
    require(feat_dim >= 1, "asr config: feat_dim must be positive");
    require(encoder.model_dim == decoder.model_dim, "asr config: encoder/decoder widths must match");
  }
  nlohmann::json to_json() const {
    return {{"encoder", encoder.to_json()}, {"decoder", decoder.to_json()}, {"feat_dim", feat_dim}};
  }
  static AsrConfig from_json(const nlohmann::json& j) {
    AsrConfig c;
    c.encoder = ModelConfig::from_json(j.at("encoder"));
    c.decoder = ModelConfig::from_json(j.at("decoder"));
    c.feat_dim = j.at("feat_dim").get<int>();
    c.validate();
    return c;
  }
};

template <typename S>
struct EncoderStates {
  int t = 0;
  int dim = 0;
  std::vector<S> h;  // t x dim
};

template <typename S>
class AsrModel {
 public:
  AsrConfig cfg;
  Tensor<S> in_proj_w, in_proj_b;  // [feat, d], [d]
  Tensor<S> enc_pos;               // [P_enc, d]
  std::vector<TransformerLayer<S>> enc_layers;
  Tensor<S> enc_lnf_g, enc_lnf_b;
  Tensor<S> tok_emb, dec_pos;  // [V, d], [P_dec, d]
  std::vector<TransformerLayer<S>> dec_layers;
  Tensor<S> dec_lnf_g, dec_lnf_b;
  Tensor<S> w_out;  // [d, V]

  static AsrModel init(const AsrConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    AsrModel m;
    m.cfg = cfg;
    const int d = cfg.encoder.model_dim;
    m.in_proj_w = Tensor<S>::randn({cfg.feat_dim, d}, rng, S(1) / std::sqrt(S(cfg.feat_dim)));
    m.in_proj_b = Tensor<S>::zeros({d});
    m.enc_pos = Tensor<S>::randn({cfg.encoder.max_positions, d}, rng, S(0.1));
    for (int i = 0; i < cfg.encoder.n_layers; ++i)
      m.enc_layers.push_back(TransformerLayer<S>::init(d, cfg.encoder.ffn_dim, false, rng, cfg.encoder.n_layers));
    m.enc_lnf_g = Tensor<S>::full({d}, S(1));
    m.enc_lnf_b = Tensor<S>::zeros({d});
    m.tok_emb = Tensor<S>::randn({cfg.decoder.vocab_size, d}, rng, S(0.02));
    m.dec_pos = Tensor<S>::randn({cfg.decoder.max_positions, d}, rng, S(0.1));
    for (int i = 0; i < cfg.decoder.n_layers; ++i)
      m.dec_layers.push_back(TransformerLayer<S>::init(d, cfg.decoder.ffn_dim, true, rng, cfg.decoder.n_layers));
    m.dec_lnf_g = Tensor<S>::full({d}, S(1));
    m.dec_lnf_b = Tensor<S>::zeros({d});
    m.w_out = Tensor<S>::randn({d, cfg.decoder.vocab_size}, rng, S(1) / std::sqrt(S(d)));
    m.set_requires_grad(true);
    return m;
  }

  std::vector<std::pair<std::string, Tensor<S>>> params() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("enc.in_proj.w", in_proj_w);
    out.emplace_back("enc.in_proj.b", in_proj_b);
    out.emplace_back("enc.pos_emb", enc_pos);
    for (size_t i = 0; i < enc_layers.size(); ++i) enc_layers[i].register_params("enc.layers." + std::to_string(i) + ".", out);
    out.emplace_back("enc.lnf.g", enc_lnf_g);
    out.emplace_back("enc.lnf.b", enc_lnf_b);
    out.emplace_back("dec.tok_emb", tok_emb);
    out.emplace_back("dec.pos_emb", dec_pos);
    for (size_t i = 0; i < dec_layers.size(); ++i) dec_layers[i].register_params("dec.layers." + std::to_string(i) + ".", out);
    out.emplace_back("dec.lnf.g", dec_lnf_g);
    out.emplace_back("dec.lnf.b", dec_lnf_b);
    out.emplace_back("dec.w_out", w_out);
    return out;
  }

  void set_requires_grad(bool b) {
    for (auto& [name, t] : params()) const_cast<Tensor<S>&>(t).set_requires_grad(b);
  }

  /// Batched bidirectional encoder over packed frame segments.
  Tensor<S> encode_concat(const Tensor<S>& frames, const std::vector<int>& positions,
                          const std::vector<AttnSegment>& segs) const {
    auto x = add(add_bias(matmul(frames, in_proj_w), in_proj_b), embedding(enc_pos, positions));
    x = transformer_stack<S>(enc_layers, x, segs, cfg.encoder.n_heads, false, nullptr, nullptr, nullptr, nullptr);
    return layer_norm(x, enc_lnf_g, enc_lnf_b);
  }

  /// Batched causal decoder with cross-attention over encoder memory.
  /// `capture_layer_outputs` receives each layer's residual-stream output.
  Tensor<S> decode_concat(const std::vector<int>& tokens, const std::vector<int>& positions,
                          const std::vector<AttnSegment>& self_segs, const Tensor<S>& memory,
                          const std::vector<AttnSegment>& cross_segs,
                          std::vector<Tensor<S>>* capture_layer_outputs = nullptr) const {
    require(tokens.size() == positions.size(), "asr decode: tokens/positions mismatch");
    auto x = add(embedding(tok_emb, tokens), embedding(dec_pos, positions));
    x = transformer_stack<S>(dec_layers, x, self_segs, cfg.decoder.n_heads, true, &memory, &cross_segs, nullptr,
                             capture_layer_outputs);
    return matmul(layer_norm(x, dec_lnf_g, dec_lnf_b), w_out);
  }

  /// Single-utterance encoder forward (detached values).
  EncoderStates<S> encode(const AudioFeatures& audio) const {
    require(audio.t >= 1, "asr encode: empty audio");
    require(audio.t <= cfg.encoder.max_positions, "asr encode: audio longer than max_positions");
    require(audio.dim == cfg.feat_dim, "asr encode: feature dim mismatch");
    NoGradGuard ng;
    std::vector<S> vals(audio.frames.begin(), audio.frames.end());
    auto frames = Tensor<S>::from({audio.t, audio.dim}, std::move(vals));
    std::vector<int> positions(static_cast<size_t>(audio.t));
    for (int i = 0; i < audio.t; ++i) positions[size_t(i)] = i;
    auto h = encode_concat(frames, positions, {{0, audio.t, 0, audio.t}});
    EncoderStates<S> out;
    out.t = audio.t;
    out.dim = cfg.encoder.model_dim;
    out.h = h.values();
    return out;
  }
};

/// Incremental ASR decoder session over fixed encoder states. Cross-attention
/// keys/values are precomputed once per session.
template <typename S>
class AsrSession {
 public:
  AsrSession(const AsrModel<S>& m, const EncoderStates<S>& enc) : model_(&m), enc_t_(enc.t) {
    require(enc.dim == m.cfg.encoder.model_dim, "asr session: encoder state dim mismatch");
    const int d = m.cfg.decoder.model_dim;
    const int L = m.cfg.decoder.n_layers;
    k_cache_.resize(size_t(L));
    v_cache_.resize(size_t(L));
    last_outputs_.assign(size_t(L), std::vector<S>(size_t(d), S(0)));
    xk_.resize(size_t(L));
    xv_.resize(size_t(L));
    ConstMatMap<S> H(enc.h.data(), enc.t, d);
    for (int li = 0; li < L; ++li) {
      const auto& l = m.dec_layers[size_t(li)];
      xk_[size_t(li)].resize(size_t(enc.t) * size_t(d));
      xv_[size_t(li)].resize(size_t(enc.t) * size_t(d));
      MatMap<S> K(xk_[size_t(li)].data(), enc.t, d);
      MatMap<S> V(xv_[size_t(li)].data(), enc.t, d);
      ConstMatMap<S> Wk(l.xwk.data(), d, d), Wv(l.xwv.data(), d, d);
      K.noalias() = H * Wk;
      V.noalias() = H * Wv;
      rawops::ConstVecMapT<S> bk(l.xbk.data(), d), bv(l.xbv.data(), d);
      K.rowwise() += bk.transpose();
      V.rowwise() += bv.transpose();
    }
  }

  /// Advances the decoder by new_tokens (autoregressively, one position per
  /// token). An empty list is a no-op.
  void advance(const std::vector<int>& new_tokens) {
    for (int t : new_tokens) step_one(t);
  }

  /// Next-token logits from the newest position's state.
  std::vector<S> logits() const {
    require(!consumed_.empty(), "asr session: no tokens consumed yet");
    const auto& m = *model_;
    const int d = m.cfg.decoder.model_dim;
    std::vector<S> f(static_cast<size_t>(d)), out(static_cast<size_t>(m.cfg.decoder.vocab_size));
    rawops::layer_norm_vec(m.dec_lnf_g, m.dec_lnf_b, last_outputs_.back().data(), f.data());
    ConstMatMap<S> W(m.w_out.data(), d, m.cfg.decoder.vocab_size);
    rawops::ConstVecMapT<S> fv(f.data(), d);
    rawops::VecMapT<S> lv(out.data(), m.cfg.decoder.vocab_size);
    lv.noalias() = W.transpose() * fv;
    return out;
  }

  const std::vector<std::vector<S>>& last_layer_outputs() const { return last_outputs_; }
  const std::vector<int>& consumed() const { return consumed_; }
  int consumed_count() const { return int(consumed_.size()); }
  const std::vector<S>& k_cache(int layer_idx) const { return k_cache_[size_t(layer_idx)]; }
  const LmModel<S>& lm_model() const = delete;
  const AsrModel<S>& model() const { return *model_; }

 private:
  void step_one(int token) {
    const auto& m = *model_;
    const int d = m.cfg.decoder.model_dim, heads = m.cfg.decoder.n_heads;
    const int pos = int(consumed_.size());
    require(pos < m.cfg.decoder.max_positions, "asr session: max_positions exceeded");
    require(token >= 0 && token < m.cfg.decoder.vocab_size, "asr session: token id out of range");

    std::vector<S> x(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
      x[size_t(j)] = m.tok_emb.data()[size_t(token) * size_t(d) + size_t(j)] +
                     m.dec_pos.data()[size_t(pos) * size_t(d) + size_t(j)];

    std::vector<S> a(static_cast<size_t>(d)), q(static_cast<size_t>(d)), kn(static_cast<size_t>(d)),
        vn(static_cast<size_t>(d)), attn, proj(static_cast<size_t>(d)), scores;
    std::vector<S> f(static_cast<size_t>(d)), h1(static_cast<size_t>(m.cfg.decoder.ffn_dim));
    for (int li = 0; li < m.cfg.decoder.n_layers; ++li) {
      const auto& l = m.dec_layers[size_t(li)];
      rawops::layer_norm_vec(l.ln1_g, l.ln1_b, x.data(), a.data());
      rawops::linear(l.wq, l.bq, a.data(), q.data());
      rawops::linear(l.wk, l.bk, a.data(), kn.data());
      rawops::linear(l.wv, l.bv, a.data(), vn.data());
      k_cache_[size_t(li)].insert(k_cache_[size_t(li)].end(), kn.begin(), kn.end());
      v_cache_[size_t(li)].insert(v_cache_[size_t(li)].end(), vn.begin(), vn.end());
      rawops::attend(q.data(), k_cache_[size_t(li)], v_cache_[size_t(li)], pos + 1, d, heads, attn, scores);
      rawops::linear(l.wo, l.bo, attn.data(), proj.data());
      for (int j = 0; j < d; ++j) x[size_t(j)] += proj[size_t(j)];

      rawops::layer_norm_vec(l.lnx_g, l.lnx_b, x.data(), a.data());
      rawops::linear(l.xwq, l.xbq, a.data(), q.data());
      rawops::attend(q.data(), xk_[size_t(li)], xv_[size_t(li)], enc_t_, d, heads, attn, scores);
      rawops::linear(l.xwo, l.xbo, attn.data(), proj.data());
      for (int j = 0; j < d; ++j) x[size_t(j)] += proj[size_t(j)];

      rawops::layer_norm_vec(l.ln2_g, l.ln2_b, x.data(), f.data());
      rawops::linear(l.w1, l.b1, f.data(), h1.data());
      for (auto& h : h1) h = h * (S(1) / (S(1) + std::exp(-h)));
      rawops::linear(l.w2, l.b2, h1.data(), proj.data());
      for (int j = 0; j < d; ++j) x[size_t(j)] += proj[size_t(j)];

      last_outputs_[size_t(li)] = x;
    }
    consumed_.push_back(token);
  }

  const AsrModel<S>* model_;
  int enc_t_;
  std::vector<std::vector<S>> xk_, xv_;  // per layer, [enc_t, d]
  std::vector<std::vector<S>> k_cache_, v_cache_;
  std::vector<int> consumed_;
  std::vector<std::vector<S>> last_outputs_;
};

// ---------------------------------------------------------------------------
// Batch packing helpers
// ---------------------------------------------------------------------------

struct PackedSeqs {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<AttnSegment> segs;
  std::vector<int> starts;  // row offset of each sequence
};

inline PackedSeqs pack_sequences(const std::vector<std::vector<int>>& seqs) {
  PackedSeqs p;
  int off = 0;
  for (const auto& s : seqs) {
    require(!s.empty(), "pack_sequences: empty sequence");
    p.starts.push_back(off);
    p.segs.push_back({off, int(s.size()), off, int(s.size())});
    for (size_t i = 0; i < s.size(); ++i) {
      p.tokens.push_back(s[i]);
      p.positions.push_back(int(i));
    }
    off += int(s.size());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainOptions {
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int max_steps = 800;
  uint64_t seed = 1;
  int dev_cap = 64;  // dev utterances scored for CER reporting
  // Probability of replacing a teacher-forced decoder input token with a
  // random byte id. Corrupted prefixes cannot be continued from memory, so
  // the decoder is pushed to read the audio; also softens exposure bias.
  double input_token_dropout = 0.0;
};

struct PretrainReport {
  std::vector<std::pair<int, double>> loss_curve;  // (step, train loss)
  double init_dev_loss = 0;
  double final_dev_loss = 0;
  double dev_ppl = 0;   // LM only
  double dev_cer = -1;  // ASR only
  double wall_s = 0;
};

namespace detail {

template <typename S>
double lm_dataset_loss(const LmModel<S>& model, const std::vector<std::vector<int>>& seqs) {
  NoGradGuard ng;
  double total = 0;
  long count = 0;
  const size_t chunk = 64;
  for (size_t beg = 0; beg < seqs.size(); beg += chunk) {
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    for (size_t i = beg; i < std::min(seqs.size(), beg + chunk); ++i) {
      const auto& s = seqs[i];
      inputs.push_back(std::vector<int>(s.begin(), s.end() - 1));
      targets.insert(targets.end(), s.begin() + 1, s.end());
    }
    auto packed = pack_sequences(inputs);
    auto logits = model.forward_concat(packed.tokens, packed.positions, packed.segs);
    std::vector<S> w(targets.size(), S(1));
    auto loss = weighted_cross_entropy(logits, targets, w);
    total += double(loss.item());
    count += long(targets.size());
  }
  return total / double(count);
}

}  // namespace detail

/// Next-token pretraining of the LM on a text corpus. Sequences are
/// BOS + tokens + EOS, truncated to the positional budget.
template <typename S>
PretrainReport pretrain_lm(LmModel<S>& model, const Tokenizer& tok, const std::vector<std::string>& corpus,
                           const std::vector<std::string>& dev_texts, const PretrainOptions& opt) {
  require(model.cfg.vocab_size == tok.vocab_size(), "pretrain_lm: model vocab != tokenizer vocab");
  require(!corpus.empty(), "pretrain_lm: empty corpus");
  const auto t0 = std::chrono::steady_clock::now();

  auto to_seq = [&](const std::string& text) {
    std::vector<int> s{tok.bos_id()};
    for (int id : tok.encode(text).ids) s.push_back(id);
    s.push_back(tok.eos_id());
    if (int(s.size()) > model.cfg.max_positions + 1) s.resize(size_t(model.cfg.max_positions) + 1);
    return s;
  };
  std::vector<std::vector<int>> seqs, dev_seqs;
  for (const auto& line : corpus) seqs.push_back(to_seq(line));
  for (const auto& line : dev_texts) dev_seqs.push_back(to_seq(line));

  PretrainReport report;
  if (!dev_seqs.empty()) report.init_dev_loss = detail::lm_dataset_loss(model, dev_seqs);

  std::vector<Tensor<S>> train_params;
  for (auto& [name, t] : model.params()) train_params.push_back(t);
  typename AdamW<S>::Options aopt;
  aopt.lr = S(opt.lr);
  aopt.weight_decay = S(opt.weight_decay);
  AdamW<S> adam(train_params, aopt);

  auto rng = component_rng(opt.seed, "pretrain-lm");
  std::vector<size_t> order(seqs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();

  for (int step = 1; step <= opt.max_steps; ++step) {
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    for (int b = 0; b < opt.batch_size; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& s = seqs[order[cursor++]];
      inputs.push_back(std::vector<int>(s.begin(), s.end() - 1));
      targets.insert(targets.end(), s.begin() + 1, s.end());
    }
    auto packed = pack_sequences(inputs);
    auto logits = model.forward_concat(packed.tokens, packed.positions, packed.segs);
    std::vector<S> w(targets.size(), S(1) / S(targets.size()));
    auto loss = weighted_cross_entropy(logits, targets, w);
    if (!std::isfinite(double(loss.item()))) throw NumericError("pretrain_lm: non-finite loss at step " + std::to_string(step));
    adam.zero_grad();
    backward(loss);
    clip_grad_norm(train_params, S(opt.grad_clip));
    adam.step();
    if (step == 1 || step % 25 == 0 || step == opt.max_steps)
      report.loss_curve.emplace_back(step, double(loss.item()));
  }

  if (!dev_seqs.empty()) {
    report.final_dev_loss = detail::lm_dataset_loss(model, dev_seqs);
    report.dev_ppl = std::exp(report.final_dev_loss);
  }
  report.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

namespace detail {

/// Greedy decode from the ASR's own softmax; baseline-quality reporting.
template <typename S>
std::string asr_greedy_transcript(const AsrModel<S>& model, const Tokenizer& tok, const AudioFeatures& audio,
                                  int max_tokens) {
  auto enc = model.encode(audio);
  AsrSession<S> sess(model, enc);
  sess.advance({tok.bos_id()});
  std::vector<int> out;
  for (int i = 0; i < max_tokens; ++i) {
    auto logits = sess.logits();
    int best = 0;
    for (int j = 1; j < int(logits.size()); ++j)
      if (logits[size_t(j)] > logits[size_t(best)]) best = j;
    if (best == tok.eos_id()) break;
    out.push_back(best);
    sess.advance({best});
  }
  return utf8::sanitize(tok.decode_bytes(out));
}

struct AsrPacked {
  Tensor<float> unused;  // keep template independence simple
};

}  // namespace detail

/// Sequence cross-entropy pretraining of the full encoder-decoder ASR with
/// teacher forcing; reports greedy dev CER.
template <typename S>
PretrainReport pretrain_asr(AsrModel<S>& model, const Tokenizer& tok, const std::vector<Utterance>& train,
                            const std::vector<Utterance>& dev, const PretrainOptions& opt) {
  require(model.cfg.decoder.vocab_size == tok.vocab_size(), "pretrain_asr: model vocab != tokenizer vocab");
  require(!train.empty(), "pretrain_asr: no training utterances");
  const auto t0 = std::chrono::steady_clock::now();

  struct Item {
    std::vector<int> dec_in;
    std::vector<int> targets;
    const Utterance* utt;
  };
  auto to_item = [&](const Utterance& u) {
    Item it;
    auto ids = tok.encode(u.transcript).ids;
    it.dec_in.push_back(tok.bos_id());
    it.dec_in.insert(it.dec_in.end(), ids.begin(), ids.end());
    it.targets = ids;
    it.targets.push_back(tok.eos_id());
    require(int(it.dec_in.size()) <= model.cfg.decoder.max_positions, "pretrain_asr: transcript too long");
    require(u.audio.t <= model.cfg.encoder.max_positions, "pretrain_asr: audio too long");
    it.utt = &u;
    return it;
  };
  std::vector<Item> items;
  for (const auto& u : train) items.push_back(to_item(u));

  auto batch_loss = [&](const std::vector<const Item*>& batch) {
    std::vector<std::vector<int>> dec_seqs;
    std::vector<int> targets;
    std::vector<AttnSegment> cross_segs;
    std::vector<int> enc_positions;
    std::vector<AttnSegment> enc_segs;
    int frames_total = 0;
    for (const auto* it : batch) frames_total += it->utt->audio.t;
    std::vector<S> frame_vals;
    frame_vals.reserve(size_t(frames_total) * size_t(model.cfg.feat_dim));
    int enc_off = 0, dec_off = 0;
    for (const auto* it : batch) {
      const auto& au = it->utt->audio;
      for (float f : au.frames) frame_vals.push_back(S(f));
      enc_segs.push_back({enc_off, au.t, enc_off, au.t});
      for (int i = 0; i < au.t; ++i) enc_positions.push_back(i);
      cross_segs.push_back({dec_off, int(it->dec_in.size()), enc_off, au.t});
      enc_off += au.t;
      dec_off += int(it->dec_in.size());
      dec_seqs.push_back(it->dec_in);
      targets.insert(targets.end(), it->targets.begin(), it->targets.end());
    }
    auto frames = Tensor<S>::from({frames_total, model.cfg.feat_dim}, std::move(frame_vals));
    auto memory = model.encode_concat(frames, enc_positions, enc_segs);
    auto packed = pack_sequences(dec_seqs);
    auto logits = model.decode_concat(packed.tokens, packed.positions, packed.segs, memory, cross_segs);
    std::vector<S> w(targets.size(), S(1) / S(targets.size()));
    return weighted_cross_entropy(logits, targets, w);
  };

  PretrainReport report;
  std::vector<Tensor<S>> train_params;
  for (auto& [name, t] : model.params()) train_params.push_back(t);
  typename AdamW<S>::Options aopt;
  aopt.lr = S(opt.lr);
  aopt.weight_decay = S(opt.weight_decay);
  AdamW<S> adam(train_params, aopt);

  auto rng = component_rng(opt.seed, "pretrain-asr");
  auto drop_rng = component_rng(opt.seed, "pretrain-asr-dropout");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> random_byte(0, 255);
  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();

  std::vector<Item> corrupted(static_cast<size_t>(opt.batch_size));
  for (int step = 1; step <= opt.max_steps; ++step) {
    std::vector<const Item*> batch;
    for (int b = 0; b < opt.batch_size; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Item& picked = items[order[cursor++]];
      if (opt.input_token_dropout > 0.0) {
        Item& c = corrupted[size_t(b)];
        c = picked;
        for (size_t k = 1; k < c.dec_in.size(); ++k)  // never corrupt BOS
          if (unit(drop_rng) < opt.input_token_dropout) c.dec_in[k] = random_byte(drop_rng);
        batch.push_back(&c);
      } else {
        batch.push_back(&picked);
      }
    }
    auto loss = batch_loss(batch);
    if (!std::isfinite(double(loss.item()))) throw NumericError("pretrain_asr: non-finite loss at step " + std::to_string(step));
    adam.zero_grad();
    backward(loss);
    clip_grad_norm(train_params, S(opt.grad_clip));
    adam.step();
    if (step == 1 || step % 25 == 0 || step == opt.max_steps)
      report.loss_curve.emplace_back(step, double(loss.item()));
  }

  if (!dev.empty()) {
    long dist = 0, ref_len = 0;
    const int n = std::min<int>(int(dev.size()), opt.dev_cap);
    for (int i = 0; i < n; ++i) {
      auto hyp = detail::asr_greedy_transcript(model, tok, dev[size_t(i)].audio, model.cfg.decoder.max_positions - 1);
      auto counts = cer_counts(dev[size_t(i)].transcript, hyp);
      dist += counts.distance;
      ref_len += counts.ref_len;
    }
    report.dev_cer = ref_len > 0 ? double(dist) / double(ref_len) : 0.0;
  }
  report.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace salsa
