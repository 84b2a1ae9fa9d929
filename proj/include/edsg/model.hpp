#pragma once

// Transformer forward passes on the tape: a causal decoder-only stack and an
// encoder-decoder stack with cross-attention, both in the same block style:
//   h += post_norm(self_attention(pre_norm(h)))        RoPE on q and k
//   h += cross_attention(unit_norm(h), encoder_out)    encoder-decoder only
//   h += post_norm(gated_ffn(pre_norm(h)))
// RMSNorm everywhere (eps 1e-6), embeddings scaled by sqrt(d_model) on input
// and tied to the output projection. The cross-attention sublayer has no
// learned norms (the canonical tensor set is total without them); its input
// is normalized with a fixed unit gain so copied or scratch-initialized
// projections see unit-scale activations, and its output joins the residual
// stream directly so a zero output projection makes the sublayer a no-op.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "edsg/checkpoint.hpp"
#include "edsg/common.hpp"
#include "edsg/config.hpp"
#include "edsg/tape.hpp"
#include "edsg/tensor.hpp"

namespace edsg {

constexpr double kRmsEps = 1e-6;
// Additive mask value for forbidden attention pairs; large enough that the
// row max ignores it and exp underflows to exactly zero.
constexpr double kMaskOff = -1e9;

// A checkpoint's tensors registered as tape leaves. `trainable_filter`
// narrows which tensors get gradients (the warmup-freeze schedule passes a
// cross-attention-only filter); by default all or none are trainable.
template <typename T>
struct Bound {
  Metadata meta;
  std::map<std::string, typename Tape<T>::Val> p;

  typename Tape<T>::Val at(const std::string& name) const {
    auto it = p.find(name);
    if (it == p.end()) throw ValidationError(cat("bound model: missing tensor '", name, "'"));
    return it->second;
  }
};

template <typename T>
Bound<T> bind(Tape<T>& tape, const NamedCheckpoint& ckpt, bool trainable,
              const std::function<bool(const std::string&)>& trainable_filter = {}) {
  Bound<T> b;
  b.meta = ckpt.meta;
  for (const auto& [name, t] : ckpt.tensors) {
    const bool rg = trainable && (!trainable_filter || trainable_filter(name));
    if constexpr (std::is_same_v<T, float>)
      b.p.emplace(name, tape.leaf(t, rg));
    else
      b.p.emplace(name, tape.leaf(t.template cast<T>(), rg));
  }
  return b;
}

template <typename T>
struct AttnProj {
  typename Tape<T>::Val q, k, v, o;
};

// Scaled dot-product attention with GQA head grouping. x_q: [Lq, d_q_model],
// x_kv: [Lkv, d_kv_model]; the projection shapes decide the widths. RoPE is
// applied to q and k for self-attention only; cross-attention runs without
// positions and with a Bidirectional mask over the full kv sequence.
template <typename T>
typename Tape<T>::Val attention(Tape<T>& tp, typename Tape<T>::Val x_q,
                                typename Tape<T>::Val x_kv, MaskKind mask,
                                const ModelConfig& cfg, const AttnProj<T>& w, bool with_rope,
                                const std::vector<int32_t>& pos_q,
                                const std::vector<int32_t>& pos_kv) {
  const int64_t lq = tp.value(x_q).shape[0];
  const int64_t lkv = tp.value(x_kv).shape[0];
  if (lq < 1 || lkv < 1) throw ContractError("attention: empty query or kv sequence");

  auto q = tp.matmul(x_q, w.q);    // [Lq, q_heads * d_head]
  auto k = tp.matmul(x_kv, w.k);   // [Lkv, kv_heads * d_head]
  auto v = tp.matmul(x_kv, w.v);
  if (with_rope) {
    q = tp.rope(q, pos_q, cfg.q_heads, cfg.d_head, cfg.rope_base);
    k = tp.rope(k, pos_kv, cfg.kv_heads, cfg.d_head, cfg.rope_base);
  }

  std::optional<typename Tape<T>::Val> maskv;
  if (mask == MaskKind::Causal) {
    if (static_cast<int64_t>(pos_q.size()) != lq || static_cast<int64_t>(pos_kv.size()) != lkv)
      throw ContractError("attention: causal mask needs positions for every row");
    Tensor<T> m = Tensor<T>::zeros({lq, lkv});
    for (int64_t i = 0; i < lq; ++i)
      for (int64_t j = 0; j < lkv; ++j)
        if (pos_kv[static_cast<size_t>(j)] > pos_q[static_cast<size_t>(i)])
          m.at(i, j) = static_cast<T>(kMaskOff);
    maskv = tp.constant(std::move(m));
  }

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  const int64_t group = cfg.group_size();
  std::vector<typename Tape<T>::Val> heads;
  heads.reserve(static_cast<size_t>(cfg.q_heads));
  for (int64_t h = 0; h < cfg.q_heads; ++h) {
    auto qh = tp.slice_cols(q, h * cfg.d_head, cfg.d_head);
    auto kh = tp.slice_cols(k, (h / group) * cfg.d_head, cfg.d_head);
    auto vh = tp.slice_cols(v, (h / group) * cfg.d_head, cfg.d_head);
    auto scores = tp.scale(tp.matmul(qh, tp.transpose(kh)), inv_scale);
    if (maskv) scores = tp.add(scores, *maskv);
    heads.push_back(tp.matmul(tp.row_softmax(scores), vh));
  }
  return tp.matmul(tp.concat_cols(heads), w.o);
}

namespace detail {

template <typename T>
typename Tape<T>::Val embed(Tape<T>& tp, const Bound<T>& b, const std::string& table,
                            const std::vector<int32_t>& tokens, const ModelConfig& cfg) {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (static_cast<int64_t>(tokens.size()) > cfg.max_seq)
    throw InputError(cat("forward: sequence length ", tokens.size(), " exceeds max_seq ",
                         cfg.max_seq));
  for (int32_t t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw InputError(cat("forward: token ", t, " outside vocabulary of ", cfg.vocab_size));
  auto h = tp.gather_rows(b.at(table), tokens);
  return tp.scale(h, std::sqrt(static_cast<double>(cfg.d_model)));
}

template <typename T>
AttnProj<T> proj(const Bound<T>& b, const std::string& prefix) {
  return {b.at(prefix + ".q"), b.at(prefix + ".k"), b.at(prefix + ".v"), b.at(prefix + ".o")};
}

// One full stack over embedded input h [L, d_model]. `cross`, when present,
// is the final encoder output attended to by every layer.
template <typename T>
typename Tape<T>::Val run_stack(Tape<T>& tp, const Bound<T>& b, const std::string& side,
                                const ModelConfig& cfg, typename Tape<T>::Val h,
                                MaskKind self_mask,
                                std::optional<typename Tape<T>::Val> cross) {
  const int64_t len = tp.value(h).shape[0];
  std::vector<int32_t> pos(static_cast<size_t>(len));
  std::iota(pos.begin(), pos.end(), 0);

  std::optional<typename Tape<T>::Val> unit_gain;
  if (cross) unit_gain = tp.constant(Tensor<T>::full({cfg.d_model}, T(1)));

  for (int64_t i = 0; i < cfg.num_layers; ++i) {
    const std::string pfx = cat(side, ".", i, ".");
    auto a_in = tp.rms_norm(h, b.at(pfx + "norm.pre_attn"), kRmsEps);
    auto a = attention(tp, a_in, a_in, self_mask, cfg, proj(b, pfx + "attn"), true, pos, pos);
    h = tp.add(h, tp.rms_norm(a, b.at(pfx + "norm.post_attn"), kRmsEps));

    if (cross) {
      auto x_in = tp.rms_norm(h, *unit_gain, kRmsEps);
      auto x = attention(tp, x_in, *cross, MaskKind::Bidirectional, cfg,
                         proj(b, pfx + "xattn"), false, pos, {});
      h = tp.add(h, x);
    }

    auto f_in = tp.rms_norm(h, b.at(pfx + "norm.pre_ffn"), kRmsEps);
    auto gate = tp.gelu(tp.matmul(f_in, b.at(pfx + "ffn.gate")));
    auto up = tp.matmul(f_in, b.at(pfx + "ffn.up"));
    auto f = tp.matmul(tp.mul(gate, up), b.at(pfx + "ffn.down"));
    h = tp.add(h, tp.rms_norm(f, b.at(pfx + "norm.post_ffn"), kRmsEps));
  }
  return tp.rms_norm(h, b.at(side + ".final_norm"), kRmsEps);
}

}  // namespace detail

// Final-norm hidden states of a decoder-only model: [len(tokens), d_model].
template <typename T>
typename Tape<T>::Val decoder_only_hidden(Tape<T>& tp, const Bound<T>& b,
                                          const std::vector<int32_t>& tokens) {
  auto h = detail::embed(tp, b, "emb.tok", tokens, b.meta.decoder);
  return detail::run_stack(tp, b, "dec", b.meta.decoder, h, MaskKind::Causal, std::nullopt);
}

template <typename T>
typename Tape<T>::Val tied_logits(Tape<T>& tp, const Bound<T>& b, typename Tape<T>::Val hidden) {
  return tp.matmul(hidden, tp.transpose(b.at("emb.tok")));
}

// Next-token logits at every position: row i conditions on tokens[0..i].
template <typename T>
typename Tape<T>::Val decoder_only_forward(Tape<T>& tp, const Bound<T>& b,
                                           const std::vector<int32_t>& tokens) {
  return tied_logits(tp, b, decoder_only_hidden(tp, b, tokens));
}

// Final-norm encoder output [len(input), enc d_model]. The self-attention
// mask is Bidirectional unless the checkpoint's causal-encoder ablation flag
// is set.
template <typename T>
typename Tape<T>::Val encoder_hidden(Tape<T>& tp, const Bound<T>& b,
                                     const std::vector<int32_t>& input_tokens) {
  if (b.meta.arch != Arch::EncoderDecoder)
    throw ContractError("encoder_hidden: checkpoint is not encoder-decoder");
  const std::string table = b.meta.shared_embedding ? "emb.tok" : "emb.enc_tok";
  auto h = detail::embed(tp, b, table, input_tokens, b.meta.encoder);
  const MaskKind mask = b.meta.encoder_causal ? MaskKind::Causal : MaskKind::Bidirectional;
  return detail::run_stack(tp, b, "enc", b.meta.encoder, h, mask, std::nullopt);
}

// Decoder hidden states given precomputed encoder output.
template <typename T>
typename Tape<T>::Val encdec_decoder_hidden(Tape<T>& tp, const Bound<T>& b,
                                            typename Tape<T>::Val encoder_out,
                                            const std::vector<int32_t>& target_tokens) {
  auto h = detail::embed(tp, b, "emb.tok", target_tokens, b.meta.decoder);
  return detail::run_stack(tp, b, "dec", b.meta.decoder, h, MaskKind::Causal, encoder_out);
}

// Encoder-decoder forward. Row t of the result is the next-token
// distribution after the decoder has consumed target_tokens[0..t]; training
// and decoding feed BOS-shifted targets, so row t predicts the t-th target
// token. Decoder positions restart at zero independently of the encoder.
template <typename T>
typename Tape<T>::Val encdec_forward(Tape<T>& tp, const Bound<T>& b,
                                     const std::vector<int32_t>& input_tokens,
                                     const std::vector<int32_t>& target_tokens) {
  if (input_tokens.empty()) throw InputError("encdec_forward: empty input sequence");
  auto enc = encoder_hidden(tp, b, input_tokens);
  return tied_logits(tp, b, encdec_decoder_hidden(tp, b, enc, target_tokens));
}

// Tape-free conveniences for inference and tests.
inline Tensor<float> decoder_only_forward(const NamedCheckpoint& ckpt,
                                          const std::vector<int32_t>& tokens) {
  Tape<float> tp;
  Bound<float> b = bind(tp, ckpt, false);
  return tp.value(decoder_only_forward(tp, b, tokens));
}

inline Tensor<float> encdec_forward(const NamedCheckpoint& ckpt,
                                    const std::vector<int32_t>& input_tokens,
                                    const std::vector<int32_t>& target_tokens) {
  Tape<float> tp;
  Bound<float> b = bind(tp, ckpt, false);
  return tp.value(encdec_forward(tp, b, input_tokens, target_tokens));
}

// ---------------------------------------------------------------------------
// Closed-form parameter accounting.

enum class CountConvention {
  ExcludeEmbeddings,
  IncludeEmbeddings,
  ExcludeEmbeddingsAndCrossAttention,
};

struct ParamCounts {
  int64_t encoder = 0;     // encoder self-attention + ffn + norms
  int64_t decoder = 0;     // decoder self-attention + ffn + norms
  int64_t cross_attn = 0;
  int64_t embedding = 0;

  int64_t total(CountConvention c) const {
    switch (c) {
      case CountConvention::ExcludeEmbeddings: return encoder + decoder + cross_attn;
      case CountConvention::IncludeEmbeddings: return encoder + decoder + cross_attn + embedding;
      case CountConvention::ExcludeEmbeddingsAndCrossAttention: return encoder + decoder;
    }
    return 0;
  }
};

inline const char* convention_name(CountConvention c) {
  switch (c) {
    case CountConvention::ExcludeEmbeddings: return "exclude-embeddings";
    case CountConvention::IncludeEmbeddings: return "include-embeddings";
    case CountConvention::ExcludeEmbeddingsAndCrossAttention:
      return "exclude-embeddings-and-cross-attention";
  }
  return "?";
}

// Body parameters of one stack (no embeddings, no cross-attention). An
// empty stack counts as zero, final norm included.
inline int64_t stack_body_params(const ModelConfig& c) {
  if (c.num_layers == 0) return 0;
  const int64_t attn = c.d_model * c.q_width() + 2 * c.d_model * c.kv_width() +
                       c.q_width() * c.d_model;
  const int64_t ffn = 3 * c.d_model * c.d_ffn;
  const int64_t norms = 4 * c.d_model;
  return c.num_layers * (attn + ffn + norms) + c.d_model;  // + final_norm
}

inline int64_t cross_attn_params(const ModelConfig& enc, const ModelConfig& dec) {
  const int64_t per_layer = dec.d_model * dec.q_width() + 2 * enc.d_model * dec.kv_width() +
                            dec.q_width() * dec.d_model;
  return dec.num_layers * per_layer;
}

inline ParamCounts count_params(const Metadata& m) {
  ParamCounts out;
  out.decoder = stack_body_params(m.decoder);
  out.embedding = m.decoder.vocab_size * m.decoder.d_model;
  if (m.arch == Arch::EncoderDecoder) {
    out.encoder = stack_body_params(m.encoder);
    out.cross_attn = cross_attn_params(m.encoder, m.decoder);
    if (!m.shared_embedding) out.embedding += m.encoder.vocab_size * m.encoder.d_model;
  }
  return out;
}

}  // namespace edsg
