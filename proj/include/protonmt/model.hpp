// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "protonmt/optimizer.hpp"
#include "protonmt/rng.hpp"
#include "protonmt/serialize.hpp"
#include "protonmt/tensor.hpp"

namespace protonmt {

enum class PrototypeMode { off, clustered_frozen, random_trainable };

inline std::string to_string(PrototypeMode m) {
  switch (m) {
    case PrototypeMode::off: return "off";
    case PrototypeMode::clustered_frozen: return "clustered-frozen";
    case PrototypeMode::random_trainable: return "random-trainable";
  }
  return "off";
}

inline PrototypeMode prototype_mode_from_string(const std::string& s) {
  if (s == "off") return PrototypeMode::off;
  if (s == "clustered-frozen") return PrototypeMode::clustered_frozen;
  if (s == "random-trainable") return PrototypeMode::random_trainable;
  throw UsageError("unknown prototype mode: " + s);
}

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_encoder_layers = 2;
  int n_decoder_layers = 2;
  int d_ff = 128;
  int src_vocab = 0;
  int tgt_vocab = 0;
  int max_len = 64;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  int num_prototypes = 3;
  PrototypeMode prototype_mode = PrototypeMode::off;

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw UsageError("d_model (" + std::to_string(d_model) +
                       ") must be a positive multiple of n_heads (" +
                       std::to_string(n_heads) + ")");
    if (prototype_mode != PrototypeMode::off && num_prototypes < 1)
      throw UsageError("num_prototypes must be >= 1 when prototypes are enabled");
    if (src_vocab <= 0 || tgt_vocab <= 0)
      throw UsageError("vocabulary sizes must be positive");
  }

  KvMap to_kv() const {
    KvMap kv;
    kv["d_model"] = std::to_string(d_model);
    kv["n_heads"] = std::to_string(n_heads);
    kv["n_encoder_layers"] = std::to_string(n_encoder_layers);
    kv["n_decoder_layers"] = std::to_string(n_decoder_layers);
    kv["d_ff"] = std::to_string(d_ff);
    kv["src_vocab"] = std::to_string(src_vocab);
    kv["tgt_vocab"] = std::to_string(tgt_vocab);
    kv["max_len"] = std::to_string(max_len);
    kv["dropout"] = std::to_string(dropout);
    kv["label_smoothing"] = std::to_string(label_smoothing);
    kv["num_prototypes"] = std::to_string(num_prototypes);
    kv["prototype_mode"] = to_string(prototype_mode);
    return kv;
  }

  static ModelConfig from_kv(const KvMap& kv) {
    ModelConfig c;
    c.d_model = std::stoi(kv_require(kv, "d_model"));
    c.n_heads = std::stoi(kv_require(kv, "n_heads"));
    c.n_encoder_layers = std::stoi(kv_require(kv, "n_encoder_layers"));
    c.n_decoder_layers = std::stoi(kv_require(kv, "n_decoder_layers"));
    c.d_ff = std::stoi(kv_require(kv, "d_ff"));
    c.src_vocab = std::stoi(kv_require(kv, "src_vocab"));
    c.tgt_vocab = std::stoi(kv_require(kv, "tgt_vocab"));
    c.max_len = std::stoi(kv_require(kv, "max_len"));
    c.dropout = std::stod(kv_require(kv, "dropout"));
    c.label_smoothing = std::stod(kv_require(kv, "label_smoothing"));
    c.num_prototypes = std::stoi(kv_require(kv, "num_prototypes"));
    c.prototype_mode = prototype_mode_from_string(kv_require(kv, "prototype_mode"));
    return c;
  }
};

/// Per-pass context threaded through forward functions: the tape (nullptr for
/// inference), the dropout stream and whether dropout is live.
template <typename Real>
struct ForwardCtx {
  Tape<Real>* tape = nullptr;
  Rng* rng = nullptr;
  bool training = false;
  double dropout_rate = 0.0;

  Tensor<Real> maybe_dropout(const Tensor<Real>& x) {
    if (!training || dropout_rate <= 0.0) return x;
    return dropout(tape, x, dropout_rate, *rng);
  }
};

template <typename Real>
struct AttentionParams {
  Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename Real>
struct FeedForwardParams {
  Tensor<Real> w1, b1, w2, b2;
};

template <typename Real>
struct LayerNormParams {
  Tensor<Real> gain, bias;
};

template <typename Real>
struct EncoderLayerParams {
  AttentionParams<Real> self_attn;
  LayerNormParams<Real> ln_self;
  bool has_proto = false;
  AttentionParams<Real> proto_attn;
  FeedForwardParams<Real> ffn;
  LayerNormParams<Real> ln_ffn;
};

template <typename Real>
struct DecoderLayerParams {
  AttentionParams<Real> self_attn;
  LayerNormParams<Real> ln_self;
  AttentionParams<Real> cross_attn;
  LayerNormParams<Real> ln_cross;
  FeedForwardParams<Real> ffn;
  LayerNormParams<Real> ln_ffn;
};

// ---------------------------------------------------------------------------
// Attention building blocks.
// ---------------------------------------------------------------------------

/// Softmax(Q K^T / sqrt(d_key)) V over unmasked keys. A query row whose keys
/// are all masked yields an all-zero output row.
template <typename Real>
Tensor<Real> scaled_dot_attention(Tape<Real>* tape, const Tensor<Real>& q,
                                  const Tensor<Real>& k, const Tensor<Real>& v,
                                  const AttentionMask* mask = nullptr,
                                  double attn_dropout = 0.0, Rng* rng = nullptr) {
  if (q.cols() != k.cols())
    throw std::invalid_argument("attention: query dim " + q.shape_str() +
                                " does not match key dim " + k.shape_str());
  if (k.rows() != v.rows())
    throw std::invalid_argument("attention: key count " + k.shape_str() +
                                " does not match value count " + v.shape_str());
  if (mask && (mask->rows != q.rows() || mask->cols != k.rows()))
    throw std::invalid_argument("attention: mask shape mismatch");
  Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(q.cols()));
  auto scores = scale(tape, matmul_nt(tape, q, k), inv_sqrt);
  auto probs = softmax_rows(tape, scores, mask);
  if (attn_dropout > 0.0 && rng) probs = dropout(tape, probs, attn_dropout, *rng);
  return matmul(tape, probs, v);
}

/// Multi-head attention: per-head projected attention, concatenated and
/// output-projected. Output shape equals the query-sequence shape.
template <typename Real>
Tensor<Real> multi_head_attention(ForwardCtx<Real>& ctx, const Tensor<Real>& q_seq,
                                  const Tensor<Real>& k_seq,
                                  const Tensor<Real>& v_seq,
                                  const AttentionMask* mask,
                                  const AttentionParams<Real>& p, int n_heads) {
  auto* tape = ctx.tape;
  auto q = affine(tape, q_seq, p.wq, p.bq);
  auto k = affine(tape, k_seq, p.wk, p.bk);
  auto v = affine(tape, v_seq, p.wv, p.bv);
  double attn_drop = ctx.training ? ctx.dropout_rate : 0.0;
  auto mixed = mha_core(tape, q, k, v, n_heads, mask, attn_drop, ctx.rng);
  return affine(tape, mixed, p.wo, p.bo);
}

/// Prototype attention: each position attends only to its own token's k
/// prototype rows (kv row t*k+j belongs to position t), so the score work is
/// O(k*T). Positions whose token has no prototypes contribute exactly zero.
template <typename Real>
Tensor<Real> prototype_attention(ForwardCtx<Real>& ctx, const Tensor<Real>& h_a,
                                 const Tensor<Real>& proto_kv,
                                 const std::vector<uint8_t>& present, int k,
                                 const AttentionParams<Real>& p, int n_heads) {
  auto* tape = ctx.tape;
  auto q = affine(tape, h_a, p.wq, p.bq);
  auto key = affine(tape, proto_kv, p.wk, p.bk);
  auto val = affine(tape, proto_kv, p.wv, p.bv);
  double attn_drop = ctx.training ? ctx.dropout_rate : 0.0;
  auto mixed = proto_mha_core(tape, q, key, val, n_heads, k, present, attn_drop,
                              ctx.rng);
  // Output projection applied with the bias gated on presence, keeping absent
  // positions at exactly zero so the residual passes H_a through untouched.
  return add_row_bias(tape, matmul(tape, mixed, p.wo), p.bo, &present);
}

// ---------------------------------------------------------------------------
// The encoder-decoder model.
// ---------------------------------------------------------------------------

enum class ParamPartition { base, prototype_attention, all };

/// Incremental decoding state: per-layer cached self-attention keys/values and
/// the precomputed cross-attention projections of the encoder output.
template <typename Real>
struct DecodeState {
  std::vector<Real> enc_out;  // [src_len x d]
  int src_len = 0;
  std::vector<std::vector<Real>> self_k, self_v;    // per layer, t*d
  std::vector<std::vector<Real>> cross_k, cross_v;  // per layer, src_len*d
  int steps = 0;
};

template <typename Real>
class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::derive(seed, 101));
    src_emb_ = add_embedding("src_emb", cfg_.src_vocab, rng);
    tgt_emb_ = add_embedding("tgt_emb", cfg_.tgt_vocab, rng);
    for (int l = 0; l < cfg_.n_encoder_layers; ++l) {
      EncoderLayerParams<Real> layer;
      std::string base = "enc." + std::to_string(l) + ".";
      layer.self_attn = add_attention(base + "self.", rng, false);
      layer.ln_self = add_layer_norm(base + "ln_self.");
      if (cfg_.prototype_mode != PrototypeMode::off) {
        layer.has_proto = true;
        layer.proto_attn = add_attention(base + "proto.", rng, true);
      }
      layer.ffn = add_ffn(base + "ffn.", rng);
      layer.ln_ffn = add_layer_norm(base + "ln_ffn.");
      enc_layers_.push_back(layer);
    }
    for (int l = 0; l < cfg_.n_decoder_layers; ++l) {
      DecoderLayerParams<Real> layer;
      std::string base = "dec." + std::to_string(l) + ".";
      layer.self_attn = add_attention(base + "self.", rng, false);
      layer.ln_self = add_layer_norm(base + "ln_self.");
      layer.cross_attn = add_attention(base + "cross.", rng, false);
      layer.ln_cross = add_layer_norm(base + "ln_cross.");
      layer.ffn = add_ffn(base + "ffn.", rng);
      layer.ln_ffn = add_layer_norm(base + "ln_ffn.");
      dec_layers_.push_back(layer);
    }
    build_positional_table();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<Real>& params() { return params_; }
  const ParamStore<Real>& params() const { return params_; }
  KvMap& extra_meta() { return extra_meta_; }
  const KvMap& extra_meta() const { return extra_meta_; }
  std::vector<EncoderLayerParams<Real>>& encoder_layers() { return enc_layers_; }

  uint64_t checksum() const { return params_.checksum(); }

  /// Adds the prototype-attention modules to a base model: query/key/value
  /// projections get fan-in uniform init, the output projection and its bias
  /// start at zero, so the extended forward pass reproduces the base model.
  void attach_prototype_attention(PrototypeMode mode, uint64_t seed) {
    if (cfg_.prototype_mode != PrototypeMode::off)
      throw UsageError("model already has prototype-attention modules");
    if (mode == PrototypeMode::off)
      throw UsageError("attach requires a prototype mode other than 'off'");
    cfg_.prototype_mode = mode;
    cfg_.validate();
    Rng rng(Rng::derive(seed, 202));
    for (int l = 0; l < cfg_.n_encoder_layers; ++l) {
      std::string base = "enc." + std::to_string(l) + ".";
      enc_layers_[l].proto_attn = add_attention(base + "proto.", rng, true);
      enc_layers_[l].has_proto = true;
    }
  }

  /// Registers per-token prototype matrices (k x d each) under "ptable.<id>".
  /// Frozen tables ride along as buffers; in random-trainable mode they are
  /// ordinary parameters.
  void set_prototype_entries(const std::map<int, std::vector<float>>& rows,
                             int k, int d) {
    if (cfg_.prototype_mode == PrototypeMode::off)
      throw UsageError("cannot set prototypes on a prototype-free model");
    if (k != cfg_.num_prototypes || d != cfg_.d_model)
      throw IncompatibleError(
          "prototype table k/d (" + std::to_string(k) + "," + std::to_string(d) +
          ") does not match model (" + std::to_string(cfg_.num_prototypes) +
          "," + std::to_string(cfg_.d_model) + ")");
    bool trainable = cfg_.prototype_mode == PrototypeMode::random_trainable;
    proto_entries_.assign(cfg_.src_vocab, Tensor<Real>());
    for (const auto& [token, flat] : rows) {
      if (token < 0 || token >= cfg_.src_vocab)
        throw IncompatibleError("prototype token id " + std::to_string(token) +
                                " outside the source vocabulary");
      std::vector<Real> vals(flat.begin(), flat.end());
      auto t = Tensor<Real>::from(std::move(vals), {k, d});
      proto_entries_[token] =
          params_.add("ptable." + std::to_string(token), t, trainable);
    }
  }

  bool has_prototype_entries() const { return !proto_entries_.empty(); }

  /// Extracts the current prototype entries (used to checksum/persist the
  /// table after training in random-trainable mode).
  std::map<int, std::vector<float>> prototype_entries() const {
    std::map<int, std::vector<float>> out;
    for (int id = 0; id < static_cast<int>(proto_entries_.size()); ++id) {
      if (!proto_entries_[id].defined()) continue;
      const auto& v = proto_entries_[id].value();
      out[id] = std::vector<float>(v.begin(), v.end());
    }
    return out;
  }

  /// The per-sequence prototype key/value block: k rows per position, plus the
  /// per-position presence flags. Built once per sentence and shared by all
  /// encoder layers.
  std::pair<Tensor<Real>, std::vector<uint8_t>> build_prototype_context(
      Tape<Real>* tape, const std::vector<int>& ids) {
    int k = cfg_.num_prototypes, d = cfg_.d_model;
    std::vector<uint8_t> present(ids.size(), 0);
    std::vector<Tensor<Real>> parts;
    parts.reserve(ids.size());
    auto zero_block = Tensor<Real>::zeros({k, d});
    for (size_t t = 0; t < ids.size(); ++t) {
      int id = ids[t];
      if (id >= 0 && id < static_cast<int>(proto_entries_.size()) &&
          proto_entries_[id].defined()) {
        present[t] = 1;
        parts.push_back(proto_entries_[id]);
      } else {
        parts.push_back(zero_block);
      }
    }
    return {concat_rows(tape, parts), present};
  }

  /// One encoder layer: self-attention, optional prototype-attention, then
  /// the feed-forward block; self-attention and feed-forward are post-norm
  /// residual sublayers, prototype-attention is a plain residual branch.
  Tensor<Real> encoder_layer_forward(ForwardCtx<Real>& ctx, const Tensor<Real>& x,
                                     EncoderLayerParams<Real>& layer,
                                     const Tensor<Real>* proto_kv,
                                     const std::vector<uint8_t>* present) {
    auto* tape = ctx.tape;
    auto attn = multi_head_attention(ctx, x, x, x, nullptr, layer.self_attn,
                                     cfg_.n_heads);
    auto h_a = layer_norm(tape, add(tape, x, ctx.maybe_dropout(attn)),
                          layer.ln_self.gain, layer.ln_self.bias);
    auto h_p = h_a;
    if (layer.has_proto) {
      if (proto_kv == nullptr || present == nullptr)
        throw std::invalid_argument(
            "encoder layer has prototype-attention but no prototype context "
            "was supplied");
      auto branch = prototype_attention(ctx, h_a, *proto_kv, *present,
                                        cfg_.num_prototypes, layer.proto_attn,
                                        cfg_.n_heads);
      h_p = add(tape, h_a, ctx.maybe_dropout(branch));
    }
    auto ff1 = relu(tape, affine(tape, h_p, layer.ffn.w1, layer.ffn.b1));
    auto ff2 = affine(tape, ff1, layer.ffn.w2, layer.ffn.b2);
    return layer_norm(tape, add(tape, h_p, ctx.maybe_dropout(ff2)),
                      layer.ln_ffn.gain, layer.ln_ffn.bias);
  }

  /// Full encoder: scaled embeddings + sinusoidal positions, then all layers.
  Tensor<Real> encode(ForwardCtx<Real>& ctx, const std::vector<int>& ids) {
    check_length(ids);
    auto* tape = ctx.tape;
    auto x = embed(ctx, src_emb_, ids);
    Tensor<Real> proto_kv;
    std::vector<uint8_t> present;
    bool protos_on =
        cfg_.prototype_mode != PrototypeMode::off && has_prototype_entries();
    if (cfg_.prototype_mode != PrototypeMode::off && !has_prototype_entries())
      throw UsageError("prototype mode is enabled but no prototype table is set");
    if (protos_on) {
      auto built = build_prototype_context(tape, ids);
      proto_kv = built.first;
      present = std::move(built.second);
    }
    for (auto& layer : enc_layers_)
      x = encoder_layer_forward(ctx, x, layer, protos_on ? &proto_kv : nullptr,
                                protos_on ? &present : nullptr);
    return x;
  }

  /// Full decoder over a (BOS-led) target prefix; returns next-token logits
  /// per position, projected through the tied target embedding.
  Tensor<Real> decode(ForwardCtx<Real>& ctx, const std::vector<int>& tgt_ids,
                      const Tensor<Real>& enc_out) {
    check_length(tgt_ids);
    auto* tape = ctx.tape;
    auto x = embed(ctx, tgt_emb_, tgt_ids);
    auto causal = AttentionMask::causal(static_cast<int>(tgt_ids.size()));
    for (auto& layer : dec_layers_) {
      auto self = multi_head_attention(ctx, x, x, x, &causal, layer.self_attn,
                                       cfg_.n_heads);
      x = layer_norm(tape, add(tape, x, ctx.maybe_dropout(self)),
                     layer.ln_self.gain, layer.ln_self.bias);
      auto cross = multi_head_attention(ctx, x, enc_out, enc_out, nullptr,
                                        layer.cross_attn, cfg_.n_heads);
      x = layer_norm(tape, add(tape, x, ctx.maybe_dropout(cross)),
                     layer.ln_cross.gain, layer.ln_cross.bias);
      auto ff1 = relu(tape, affine(tape, x, layer.ffn.w1, layer.ffn.b1));
      auto ff2 = affine(tape, ff1, layer.ffn.w2, layer.ffn.b2);
      x = layer_norm(tape, add(tape, x, ctx.maybe_dropout(ff2)),
                     layer.ln_ffn.gain, layer.ln_ffn.bias);
    }
    return matmul_nt(tape, x, tgt_emb_);  // tied output projection
  }

  /// Summed label-smoothed cross entropy of one sentence pair. The decoder
  /// consumes BOS + target and predicts target + EOS.
  Tensor<Real> forward_loss(ForwardCtx<Real>& ctx, const std::vector<int>& src,
                            const std::vector<int>& tgt, int bos_id, int eos_id) {
    auto enc = encode(ctx, src);
    std::vector<int> dec_in;
    dec_in.reserve(tgt.size() + 1);
    dec_in.push_back(bos_id);
    dec_in.insert(dec_in.end(), tgt.begin(), tgt.end());
    std::vector<int> labels(tgt);
    labels.push_back(eos_id);
    auto logits = decode(ctx, dec_in, enc);
    return cross_entropy_label_smoothed(ctx.tape, logits, labels,
                                        cfg_.label_smoothing);
  }

  /// Exact scalar-parameter count of a partition (trainable entries only).
  /// with_biases=false restricts to weight matrices (rank >= 2).
  size_t count_parameters(ParamPartition part, bool with_biases = true) const {
    return params_.count_scalars([&](const std::string& name) {
      bool is_proto = name.find(".proto.") != std::string::npos;
      bool is_table = name.rfind("ptable.", 0) == 0;
      bool in_part = part == ParamPartition::all
                         ? true
                         : (part == ParamPartition::prototype_attention
                                ? is_proto
                                : !is_proto && !is_table);
      if (!in_part) return false;
      if (!with_biases) {
        const auto& t = params_.get(name);
        if (t.rank() < 2) return false;
      }
      return true;
    });
  }

  // -------------------------------------------------------------------------
  // Incremental decoding (inference only).
  // -------------------------------------------------------------------------

  DecodeState<Real> begin_decode(const Tensor<Real>& enc_out) const {
    DecodeState<Real> st;
    st.src_len = enc_out.rows();
    int d = cfg_.d_model;
    st.enc_out = enc_out.value();
    st.self_k.assign(dec_layers_.size(), {});
    st.self_v.assign(dec_layers_.size(), {});
    for (const auto& layer : dec_layers_) {
      std::vector<Real> ck(static_cast<size_t>(st.src_len) * d);
      std::vector<Real> cv(static_cast<size_t>(st.src_len) * d);
      affine_rows(st.enc_out.data(), st.src_len, layer.cross_attn.wk,
                  layer.cross_attn.bk, ck.data());
      affine_rows(st.enc_out.data(), st.src_len, layer.cross_attn.wv,
                  layer.cross_attn.bv, cv.data());
      st.cross_k.push_back(std::move(ck));
      st.cross_v.push_back(std::move(cv));
    }
    return st;
  }

  /// Feeds one target token and returns the next-token logits.
  std::vector<Real> decode_step(DecodeState<Real>& st, int token) const {
    int d = cfg_.d_model, h = cfg_.n_heads, dh = d / h;
    if (st.steps + 1 > cfg_.max_len)
      throw UsageError("decode_step: exceeded max length");
    std::vector<Real> x(d);
    Real sd = std::sqrt(static_cast<Real>(d));
    for (int j = 0; j < d; ++j)
      x[j] = tgt_emb_.at(token, j) * sd + pos_table_[static_cast<size_t>(st.steps) * d + j];
    std::vector<Real> q(d), kr(d), vr(d), attn(d), tmp(cfg_.d_ff);
    for (size_t l = 0; l < dec_layers_.size(); ++l) {
      const auto& layer = dec_layers_[l];
      // self attention over cached rows
      affine_rows(x.data(), 1, layer.self_attn.wq, layer.self_attn.bq, q.data());
      affine_rows(x.data(), 1, layer.self_attn.wk, layer.self_attn.bk, kr.data());
      affine_rows(x.data(), 1, layer.self_attn.wv, layer.self_attn.bv, vr.data());
      st.self_k[l].insert(st.self_k[l].end(), kr.begin(), kr.end());
      st.self_v[l].insert(st.self_v[l].end(), vr.begin(), vr.end());
      int t_cached = st.steps + 1;
      mix_heads(q.data(), st.self_k[l].data(), st.self_v[l].data(), t_cached, h,
                dh, attn.data());
      project_residual_norm(attn, layer.self_attn, layer.ln_self, x);
      // cross attention over the encoder output
      affine_rows(x.data(), 1, layer.cross_attn.wq, layer.cross_attn.bq, q.data());
      mix_heads(q.data(), st.cross_k[l].data(), st.cross_v[l].data(), st.src_len,
                h, dh, attn.data());
      project_residual_norm(attn, layer.cross_attn, layer.ln_cross, x);
      // feed forward
      affine_rows(x.data(), 1, layer.ffn.w1, layer.ffn.b1, tmp.data());
      for (auto& v : tmp) v = v > Real(0) ? v : Real(0);
      std::vector<Real> ff(d);
      mm_nn(tmp.data(), layer.ffn.w2.value().data(), ff.data(), 1, cfg_.d_ff, d,
            false);
      for (int j = 0; j < d; ++j) ff[j] += layer.ffn.b2.at(j);
      for (int j = 0; j < d; ++j) ff[j] += x[j];
      norm_row(ff.data(), layer.ln_ffn, x.data());
    }
    std::vector<Real> logits(cfg_.tgt_vocab);
    mm_nt(x.data(), tgt_emb_.value().data(), logits.data(), 1, d, cfg_.tgt_vocab,
          false);
    st.steps += 1;
    return logits;
  }

  // -------------------------------------------------------------------------
  // Checkpoints: "PTNMT1", u32 entry count, per entry {u16 name len, name,
  // u8 rank, u32 dims..., f32 values row-major}, then a u32-length-prefixed
  // key=value config block.
  // -------------------------------------------------------------------------

  void save_checkpoint(const std::string& path) const {
    atomic_write_file(path, [&](std::ostream& os) {
      write_exact(os, "PTNMT1");
      write_u32_le(os, static_cast<uint32_t>(params_.items().size()));
      for (const auto& item : params_.items()) {
        write_u16_le(os, static_cast<uint16_t>(item.name.size()));
        write_exact(os, item.name);
        write_u8(os, static_cast<uint8_t>(item.tensor.rank()));
        for (int s : item.tensor.shape()) write_u32_le(os, static_cast<uint32_t>(s));
        for (Real v : item.tensor.value())
          write_f32_le(os, static_cast<float>(v));
      }
      KvMap kv = cfg_.to_kv();
      for (const auto& [k, v] : extra_meta_) kv["meta." + k] = v;
      std::string block = kv_to_string(kv);
      write_u32_le(os, static_cast<uint32_t>(block.size()));
      write_exact(os, block);
    });
  }

  static Model load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("cannot open checkpoint: " + path);
    if (read_exact(is, 6) != "PTNMT1")
      throw IncompatibleError("bad checkpoint magic in " + path);
    uint32_t count = read_u32_le(is);
    std::vector<std::pair<std::string, Tensor<Real>>> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
      uint16_t name_len = read_u16_le(is);
      std::string name = read_exact(is, name_len);
      uint8_t rank = read_u8(is);
      std::vector<int> shape(rank);
      size_t numel = 1;
      for (auto& s : shape) {
        s = static_cast<int>(read_u32_le(is));
        numel *= static_cast<size_t>(s);
      }
      std::vector<Real> vals(numel);
      for (auto& v : vals) v = static_cast<Real>(read_f32_le(is));
      entries.emplace_back(name, Tensor<Real>::from(std::move(vals), std::move(shape)));
    }
    uint32_t block_len = read_u32_le(is);
    KvMap kv = kv_from_string(read_exact(is, block_len));
    if (is.peek() != EOF)
      throw IncompatibleError("trailing bytes after checkpoint config block");

    KvMap cfg_kv, meta;
    for (const auto& [k, v] : kv) {
      if (k.rfind("meta.", 0) == 0)
        meta[k.substr(5)] = v;
      else
        cfg_kv[k] = v;
    }
    ModelConfig cfg = ModelConfig::from_kv(cfg_kv);
    Model m(cfg, /*seed=*/0);
    m.extra_meta_ = meta;
    size_t expected = m.params_.items().size();
    std::map<int, std::vector<float>> table_rows;
    for (auto& [name, tensor] : entries) {
      if (name.rfind("ptable.", 0) == 0) {
        std::vector<float> flat(tensor.value().begin(), tensor.value().end());
        table_rows[std::stoi(name.substr(7))] = std::move(flat);
        continue;
      }
      auto& dst = m.params_.get(name);
      if (dst.shape() != tensor.shape())
        throw IncompatibleError("checkpoint shape mismatch for " + name);
      dst.value() = tensor.value();
    }
    if (!table_rows.empty())
      m.set_prototype_entries(table_rows, cfg.num_prototypes, cfg.d_model);
    size_t loaded = entries.size() - table_rows.size();
    if (loaded != expected)
      throw IncompatibleError("checkpoint parameter set does not match model");
    return m;
  }

 private:
  Tensor<Real> add_embedding(const std::string& name, int vocab, Rng& rng) {
    auto t = Tensor<Real>::zeros({vocab, cfg_.d_model});
    double std_dev = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    for (auto& v : t.value()) v = static_cast<Real>(rng.normal() * std_dev);
    return params_.add(name, t);
  }

  Tensor<Real> add_linear(const std::string& name, int in, int out, Rng& rng,
                          bool zero_init) {
    auto t = Tensor<Real>::zeros({in, out});
    if (!zero_init) {
      double bound = std::sqrt(3.0 / in);  // fan-in scaled uniform
      for (auto& v : t.value()) v = static_cast<Real>(rng.uniform(-bound, bound));
    }
    return params_.add(name, t);
  }

  AttentionParams<Real> add_attention(const std::string& prefix, Rng& rng,
                                      bool zero_out_proj) {
    AttentionParams<Real> p;
    int d = cfg_.d_model;
    p.wq = add_linear(prefix + "wq", d, d, rng, false);
    p.bq = params_.add(prefix + "bq", Tensor<Real>::zeros({d}));
    p.wk = add_linear(prefix + "wk", d, d, rng, false);
    p.bk = params_.add(prefix + "bk", Tensor<Real>::zeros({d}));
    p.wv = add_linear(prefix + "wv", d, d, rng, false);
    p.bv = params_.add(prefix + "bv", Tensor<Real>::zeros({d}));
    p.wo = add_linear(prefix + "wo", d, d, rng, zero_out_proj);
    p.bo = params_.add(prefix + "bo", Tensor<Real>::zeros({d}));
    return p;
  }

  FeedForwardParams<Real> add_ffn(const std::string& prefix, Rng& rng) {
    FeedForwardParams<Real> p;
    p.w1 = add_linear(prefix + "w1", cfg_.d_model, cfg_.d_ff, rng, false);
    p.b1 = params_.add(prefix + "b1", Tensor<Real>::zeros({cfg_.d_ff}));
    p.w2 = add_linear(prefix + "w2", cfg_.d_ff, cfg_.d_model, rng, false);
    p.b2 = params_.add(prefix + "b2", Tensor<Real>::zeros({cfg_.d_model}));
    return p;
  }

  LayerNormParams<Real> add_layer_norm(const std::string& prefix) {
    LayerNormParams<Real> p;
    auto gain = Tensor<Real>::zeros({cfg_.d_model});
    for (auto& v : gain.value()) v = Real(1);
    p.gain = params_.add(prefix + "g", gain);
    p.bias = params_.add(prefix + "b", Tensor<Real>::zeros({cfg_.d_model}));
    return p;
  }

  void build_positional_table() {
    int d = cfg_.d_model;
    pos_table_.assign(static_cast<size_t>(cfg_.max_len) * d, Real(0));
    for (int pos = 0; pos < cfg_.max_len; ++pos) {
      for (int i = 0; i < d; i += 2) {
        double freq = std::pow(10000.0, -static_cast<double>(i) / d);
        double angle = pos * freq;
        pos_table_[static_cast<size_t>(pos) * d + i] = static_cast<Real>(std::sin(angle));
        if (i + 1 < d)
          pos_table_[static_cast<size_t>(pos) * d + i + 1] =
              static_cast<Real>(std::cos(angle));
      }
    }
  }

  void check_length(const std::vector<int>& ids) const {
    if (ids.empty()) throw UsageError("empty token sequence");
    if (static_cast<int>(ids.size()) > cfg_.max_len)
      throw UsageError("sequence of length " + std::to_string(ids.size()) +
                       " exceeds max length " + std::to_string(cfg_.max_len));
  }

  Tensor<Real> embed(ForwardCtx<Real>& ctx, const Tensor<Real>& table,
                     const std::vector<int>& ids) {
    auto* tape = ctx.tape;
    auto x = scale(tape, embedding_rows(tape, table, ids),
                   static_cast<Real>(std::sqrt(static_cast<double>(cfg_.d_model))));
    auto pe = Tensor<Real>::zeros({static_cast<int>(ids.size()), cfg_.d_model});
    std::copy(pos_table_.begin(),
              pos_table_.begin() + ids.size() * static_cast<size_t>(cfg_.d_model),
              pe.value().begin());
    return ctx.maybe_dropout(add(tape, x, pe));
  }

  // --- incremental-decode helpers (raw rows, no tape) ---

  void affine_rows(const Real* x, int rows, const Tensor<Real>& w,
                   const Tensor<Real>& b, Real* out) const {
    mm_nn(x, w.value().data(), out, rows, w.rows(), w.cols(), false);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w.cols(); ++j) out[static_cast<size_t>(i) * w.cols() + j] += b.at(j);
  }

  /// Single-query multi-head attention over cached keys/values ([t_keys x d]).
  void mix_heads(const Real* q, const Real* keys, const Real* vals, int t_keys,
                 int h, int dh, Real* out) const {
    std::vector<Real> probs(t_keys);
    Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
    int d = h * dh;
    for (int head = 0; head < h; ++head) {
      int off = head * dh;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int t = 0; t < t_keys; ++t) {
        Real acc = Real(0);
        const Real* kt = keys + static_cast<size_t>(t) * d + off;
        for (int c = 0; c < dh; ++c) acc += q[off + c] * kt[c];
        probs[t] = acc * inv_sqrt;
        mx = std::max(mx, probs[t]);
      }
      Real denom = Real(0);
      for (int t = 0; t < t_keys; ++t) {
        probs[t] = std::exp(probs[t] - mx);
        denom += probs[t];
      }
      for (int c = 0; c < dh; ++c) out[off + c] = Real(0);
      for (int t = 0; t < t_keys; ++t) {
        Real p = probs[t] / denom;
        const Real* vt = vals + static_cast<size_t>(t) * d + off;
        for (int c = 0; c < dh; ++c) out[off + c] += p * vt[c];
      }
    }
  }

  /// out-projection + residual + layer norm, updating x in place.
  void project_residual_norm(const std::vector<Real>& attn,
                             const AttentionParams<Real>& p,
                             const LayerNormParams<Real>& ln,
                             std::vector<Real>& x) const {
    int d = cfg_.d_model;
    std::vector<Real> proj(d);
    mm_nn(attn.data(), p.wo.value().data(), proj.data(), 1, d, d, false);
    for (int j = 0; j < d; ++j) proj[j] += p.bo.at(j) + x[j];
    norm_row(proj.data(), ln, x.data());
  }

  void norm_row(const Real* row, const LayerNormParams<Real>& ln, Real* out) const {
    int d = cfg_.d_model;
    Real mean = Real(0);
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= Real(d);
    Real var = Real(0);
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= Real(d);
    Real inv = Real(1) / std::sqrt(var + Real(1e-5));
    for (int j = 0; j < d; ++j)
      out[j] = ln.gain.at(j) * ((row[j] - mean) * inv) + ln.bias.at(j);
  }

  ModelConfig cfg_;
  ParamStore<Real> params_;
  Tensor<Real> src_emb_, tgt_emb_;
  std::vector<EncoderLayerParams<Real>> enc_layers_;
  std::vector<DecoderLayerParams<Real>> dec_layers_;
  std::vector<Tensor<Real>> proto_entries_;  // indexed by source token id
  std::vector<Real> pos_table_;
  KvMap extra_meta_;
};

}  // namespace protonmt
