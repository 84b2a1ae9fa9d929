#pragma once

// Checkpoint-to-checkpoint transformations. All functions take their inputs
// by const reference, never mutate them, and validate both the sources and
// the produced checkpoint, so a surgery result is always loadable.
//
// Initialization recipes:
//   balanced    encoder, decoder, and embeddings copied from one decoder-only
//               source; cross-attention projections copied from the same
//               layer's self-attention projections.
//   unbalanced  encoder stack from one source, decoder stack from another
//               (any config pairing); cross-attention drawn fresh from a
//               zero-mean normal with std scale/sqrt(fan_in), optionally with
//               a zeroed output projection so the sublayer starts as a no-op.

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "edsg/checkpoint.hpp"
#include "edsg/common.hpp"
#include "edsg/config.hpp"
#include "edsg/tensor.hpp"

namespace edsg {

enum class AdaptMode { Balanced, Unbalanced };
enum class MhaScope { EncoderOnly, All };

struct AdaptationPlan {
  const NamedCheckpoint* encoder_source = nullptr;
  const NamedCheckpoint* decoder_source = nullptr;  // may alias encoder_source
  AdaptMode mode = AdaptMode::Balanced;
  int64_t warmup_steps_k = 0;    // 0 permitted: the no-warmup ablation
  uint64_t init_seed = 0;
  double cross_attn_init_scale = 1.0;
  bool zero_init_xattn_o = false;

  void validate() const {
    if (!encoder_source || !decoder_source)
      throw SurgeryError("adaptation plan: both source checkpoints are required");
    if (encoder_source->meta.arch != Arch::DecoderOnly ||
        decoder_source->meta.arch != Arch::DecoderOnly)
      throw SurgeryError("adaptation plan: sources must be decoder-only checkpoints");
    if (mode == AdaptMode::Balanced &&
        !(encoder_source->meta.decoder == decoder_source->meta.decoder))
      throw SurgeryError("adaptation plan: balanced mode requires identical source configs");
    if (warmup_steps_k < 0) throw SurgeryError("adaptation plan: warmup_steps_k must be >= 0");
    if (!(cross_attn_init_scale > 0))
      throw SurgeryError("adaptation plan: cross_attn_init_scale must be positive");
  }
};

namespace detail {

// Tensor names of one layer, grouped for copying. `src_layer` maps the
// decoder-only source namespace onto the target side.
inline void copy_stack(const NamedCheckpoint& src, NamedCheckpoint& dst,
                       const std::string& dst_side, int64_t num_layers) {
  for (int64_t i = 0; i < num_layers; ++i) {
    const std::string s = cat("dec.", i, ".");
    const std::string d = cat(dst_side, ".", i, ".");
    for (const char* w : {"q", "k", "v", "o"}) dst.tensors[d + "attn." + w] = src.at(s + "attn." + w);
    for (const char* w : {"gate", "up", "down"}) dst.tensors[d + "ffn." + w] = src.at(s + "ffn." + w);
    for (const char* w : {"pre_attn", "post_attn", "pre_ffn", "post_ffn"})
      dst.tensors[d + "norm." + w] = src.at(s + "norm." + w);
  }
  dst.tensors[dst_side + ".final_norm"] = src.at("dec.final_norm");
}

}  // namespace detail

// Balanced adaptation from a single decoder-only checkpoint: every target
// tensor is a copy of a source tensor, cross-attention included.
inline NamedCheckpoint adapt_balanced(const NamedCheckpoint& source) {
  if (source.meta.arch != Arch::DecoderOnly)
    throw SurgeryError("adapt_balanced: source must be a decoder-only checkpoint");
  validate_checkpoint(source);
  const ModelConfig cfg = source.meta.decoder;

  NamedCheckpoint out;
  out.meta.arch = Arch::EncoderDecoder;
  out.meta.encoder = cfg;
  out.meta.decoder = cfg;
  out.meta.shared_embedding = true;
  out.meta.objective = source.meta.objective;
  out.meta.train_steps = source.meta.train_steps;

  out.tensors["emb.tok"] = source.at("emb.tok");
  detail::copy_stack(source, out, "enc", cfg.num_layers);
  detail::copy_stack(source, out, "dec", cfg.num_layers);
  for (int64_t i = 0; i < cfg.num_layers; ++i)
    for (const char* w : {"q", "k", "v", "o"})
      out.tensors[cat("dec.", i, ".xattn.", w)] = source.at(cat("dec.", i, ".attn.", w));

  validate_checkpoint(out);
  return out;
}

// Unbalanced adaptation: encoder and decoder stacks from (possibly different)
// sources, cross-attention initialized from scratch. The plan's warmup step
// count is recorded in the metadata for the trainer's freeze schedule.
inline NamedCheckpoint adapt_unbalanced(const AdaptationPlan& plan) {
  if (plan.mode != AdaptMode::Unbalanced)
    throw SurgeryError("adapt_unbalanced: plan mode is not Unbalanced");
  plan.validate();
  const NamedCheckpoint& enc_src = *plan.encoder_source;
  const NamedCheckpoint& dec_src = *plan.decoder_source;
  validate_checkpoint(enc_src);
  if (&dec_src != &enc_src) validate_checkpoint(dec_src);
  const ModelConfig enc_cfg = enc_src.meta.decoder;
  const ModelConfig dec_cfg = dec_src.meta.decoder;
  if (enc_cfg.vocab_size != dec_cfg.vocab_size)
    throw SurgeryError(cat("adapt_unbalanced: vocab mismatch ", enc_cfg.vocab_size, " vs ",
                           dec_cfg.vocab_size));

  NamedCheckpoint out;
  out.meta.arch = Arch::EncoderDecoder;
  out.meta.encoder = enc_cfg;
  out.meta.decoder = dec_cfg;
  out.meta.shared_embedding = false;
  out.meta.objective = dec_src.meta.objective;
  out.meta.train_steps = dec_src.meta.train_steps;
  out.meta.warmup_steps_k = plan.warmup_steps_k;

  out.tensors["emb.enc_tok"] = enc_src.at("emb.tok");
  out.tensors["emb.tok"] = dec_src.at("emb.tok");
  detail::copy_stack(enc_src, out, "enc", enc_cfg.num_layers);
  detail::copy_stack(dec_src, out, "dec", dec_cfg.num_layers);

  for (int64_t i = 0; i < dec_cfg.num_layers; ++i)
    for (const char* w : {"q", "k", "v", "o"}) {
      const std::string name = cat("dec.", i, ".xattn.", w);
      const Shape shape = expected_shape(name, out.meta);
      if (plan.zero_init_xattn_o && std::string(w) == "o") {
        out.tensors[name] = Tensor<float>::zeros(shape);
        continue;
      }
      const double stddev = plan.cross_attn_init_scale / std::sqrt(static_cast<double>(shape[0]));
      out.tensors[name] = Tensor<float>::randn(shape, derive_seed(plan.init_seed, fnv1a64(name)),
                                               static_cast<float>(stddev));
    }

  validate_checkpoint(out);
  return out;
}

inline NamedCheckpoint adapt(const AdaptationPlan& plan) {
  if (plan.mode == AdaptMode::Unbalanced) return adapt_unbalanced(plan);
  plan.validate();
  if (plan.encoder_source != plan.decoder_source)
    throw SurgeryError(
        "adapt: balanced mode copies from a single checkpoint; pass the same source twice");
  return adapt_balanced(*plan.encoder_source);
}

namespace detail {

// Replicates each kv head's projection columns group_size times. [in_w, kvw]
// becomes [in_w, qw]; query-head h reads the block that kv-head h/group held.
inline Tensor<float> replicate_kv_cols(const Tensor<float>& t, int64_t kv_heads, int64_t q_heads,
                                       int64_t d_head) {
  const int64_t in_w = t.shape[0];
  const int64_t group = q_heads / kv_heads;
  Tensor<float> out = Tensor<float>::zeros({in_w, q_heads * d_head});
  for (int64_t r = 0; r < in_w; ++r)
    for (int64_t h = 0; h < q_heads; ++h)
      for (int64_t j = 0; j < d_head; ++j)
        out.at(r, h * d_head + j) = t.at(r, (h / group) * d_head + j);
  return out;
}

inline void expand_stack_kv(NamedCheckpoint& ckpt, const std::string& side,
                            const std::string& group_name, ModelConfig& cfg_io,
                            const ModelConfig& cfg_snapshot) {
  if (cfg_snapshot.kv_heads == cfg_snapshot.q_heads) return;  // already MHA: no-op
  for (int64_t i = 0; i < cfg_snapshot.num_layers; ++i)
    for (const char* w : {"k", "v"}) {
      const std::string name = cat(side, ".", i, ".", group_name, ".", w);
      ckpt.tensors[name] = replicate_kv_cols(ckpt.at(name), cfg_snapshot.kv_heads,
                                             cfg_snapshot.q_heads, cfg_snapshot.d_head);
    }
  cfg_io.kv_heads = cfg_io.q_heads;
}

}  // namespace detail

// Grouped-query to multi-head expansion by kv parameter replication. The
// attention function is preserved exactly up to float summation order.
inline NamedCheckpoint expand_gqa_to_mha(const NamedCheckpoint& ckpt, MhaScope scope) {
  validate_checkpoint(ckpt);
  NamedCheckpoint out = ckpt;
  if (scope == MhaScope::EncoderOnly) {
    if (out.meta.arch != Arch::EncoderDecoder)
      throw SurgeryError("expand_gqa_to_mha: encoder-only scope on a checkpoint with no encoder");
    detail::expand_stack_kv(out, "enc", "attn", out.meta.encoder, ckpt.meta.encoder);
  } else {
    if (out.meta.arch == Arch::EncoderDecoder)
      detail::expand_stack_kv(out, "enc", "attn", out.meta.encoder, ckpt.meta.encoder);
    detail::expand_stack_kv(out, "dec", "attn", out.meta.decoder, ckpt.meta.decoder);
    if (out.meta.arch == Arch::EncoderDecoder)
      detail::expand_stack_kv(out, "dec", "xattn", out.meta.decoder, ckpt.meta.decoder);
  }
  validate_checkpoint(out);
  return out;
}

// Elementwise mean of two same-shaped checkpoints. Labels land in the
// metadata parent list (callers with file paths pass those).
inline NamedCheckpoint merge_uniform(const NamedCheckpoint& a, const NamedCheckpoint& b,
                                     const std::string& label_a = "a",
                                     const std::string& label_b = "b") {
  validate_checkpoint(a);
  validate_checkpoint(b);
  std::set<std::string> names_a, names_b;
  for (const auto& [n, t] : a.tensors) names_a.insert(n);
  for (const auto& [n, t] : b.tensors) names_b.insert(n);
  if (names_a != names_b) {
    std::string msg = "merge: tensor name sets differ;";
    for (const auto& n : names_a)
      if (!names_b.count(n)) msg += " only-in-a:" + n;
    for (const auto& n : names_b)
      if (!names_a.count(n)) msg += " only-in-b:" + n;
    throw SurgeryError(msg);
  }
  NamedCheckpoint out;
  out.meta = a.meta;
  out.meta.objective = "merged";
  out.meta.parents = {label_a, label_b};
  for (const auto& [name, ta] : a.tensors) {
    const Tensor<float>& tb = b.at(name);
    if (ta.shape != tb.shape)
      throw SurgeryError(cat("merge: tensor '", name, "' shapes differ: ", shape_str(ta.shape),
                             " vs ", shape_str(tb.shape)));
    Tensor<float> m = ta;
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = 0.5f * (m.data[i] + tb.data[i]);
    out.tensors.emplace(name, std::move(m));
  }
  validate_checkpoint(out);
  return out;
}

// Name filter for the warmup-freeze schedule: exactly the cross-attention
// projections.
inline bool is_cross_attention_tensor(const std::string& name) {
  return name.find(".xattn.") != std::string::npos;
}

}  // namespace edsg
