#pragma once

// Named tensor collections: the unit of surgery, training, merging and
// serialization. Tensor names follow one canonical scheme and every shape is
// a pure function of (name, metadata), which is what makes load-time
// validation and surgery mapping total.
//
// Canonical names:
//   emb.tok                                  decoder/output embedding table
//   emb.enc_tok                              encoder table (unshared case only)
//   {enc|dec}.{i}.attn.{q|k|v|o}             self-attention projections
//   dec.{i}.xattn.{q|k|v|o}                  cross-attention projections
//   {enc|dec}.{i}.ffn.{gate|up|down}         gated feed-forward
//   {enc|dec}.{i}.norm.{pre_attn|post_attn|pre_ffn|post_ffn}
//   {enc|dec}.final_norm
// Decoder-only checkpoints use the dec.* namespace.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "edsg/common.hpp"
#include "edsg/config.hpp"
#include "edsg/tensor.hpp"

namespace edsg {

struct Metadata {
  Arch arch = Arch::DecoderOnly;
  ModelConfig encoder;  // meaningful only when arch == EncoderDecoder
  ModelConfig decoder;
  // Single embedding table serving both stacks. Requires equal widths; the
  // unbalanced path stores a second table under emb.enc_tok instead.
  bool shared_embedding = true;
  // Ablation switch: run encoder self-attention with a causal mask.
  bool encoder_causal = false;
  std::string objective;        // provenance tag: pretrain-causal, prefixlm, ul2, ...
  int64_t train_steps = 0;
  int64_t warmup_steps_k = 0;   // consumed by the trainer's freeze schedule
  std::vector<std::string> parents;  // set by checkpoint merging

  void validate() const {
    if (arch == Arch::EncoderDecoder) {
      encoder.validate();
      if (encoder.vocab_size != decoder.vocab_size)
        throw ConfigError("metadata: encoder and decoder vocab sizes differ");
      if (shared_embedding && encoder.d_model != decoder.d_model)
        throw ConfigError("metadata: shared embedding requires equal model widths");
    }
    decoder.validate();
    if (warmup_steps_k < 0) throw ConfigError("metadata: warmup_steps_k must be >= 0");
  }
};

struct NamedCheckpoint {
  std::map<std::string, Tensor<float>> tensors;
  Metadata meta;

  const Tensor<float>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError(cat("checkpoint: missing tensor '", name, "'"));
    return it->second;
  }
  Tensor<float>& at(const std::string& name) {
    return const_cast<Tensor<float>&>(static_cast<const NamedCheckpoint*>(this)->at(name));
  }
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
};

inline std::vector<std::string> canonical_names(const Metadata& m) {
  std::vector<std::string> names;
  names.push_back("emb.tok");
  const bool encdec = m.arch == Arch::EncoderDecoder;
  if (encdec && !m.shared_embedding) names.push_back("emb.enc_tok");
  auto stack = [&names](const std::string& side, const ModelConfig& cfg, bool with_xattn) {
    for (int64_t i = 0; i < cfg.num_layers; ++i) {
      const std::string p = cat(side, ".", i, ".");
      for (const char* w : {"q", "k", "v", "o"}) names.push_back(p + "attn." + w);
      if (with_xattn)
        for (const char* w : {"q", "k", "v", "o"}) names.push_back(p + "xattn." + w);
      for (const char* w : {"gate", "up", "down"}) names.push_back(p + "ffn." + w);
      for (const char* w : {"pre_attn", "post_attn", "pre_ffn", "post_ffn"})
        names.push_back(p + "norm." + w);
    }
    names.push_back(side + ".final_norm");
  };
  if (encdec) stack("enc", m.encoder, false);
  stack("dec", m.decoder, encdec);
  return names;
}

// Shape of a canonical tensor under the given metadata. Throws
// ValidationError for names outside the scheme or outside the architecture.
inline Shape expected_shape(const std::string& name, const Metadata& m) {
  const bool encdec = m.arch == Arch::EncoderDecoder;
  auto fail = [&name]() -> Shape {
    throw ValidationError(cat("checkpoint: unknown tensor name '", name, "'"));
  };

  if (name == "emb.tok") return {m.decoder.vocab_size, m.decoder.d_model};
  if (name == "emb.enc_tok") {
    if (!encdec || m.shared_embedding) return fail();
    return {m.encoder.vocab_size, m.encoder.d_model};
  }

  // side.rest
  const size_t dot = name.find('.');
  if (dot == std::string::npos) return fail();
  const std::string side = name.substr(0, dot);
  const std::string rest = name.substr(dot + 1);
  const bool is_enc = side == "enc";
  if (!is_enc && side != "dec") return fail();
  if (is_enc && !encdec) return fail();
  const ModelConfig& cfg = is_enc ? m.encoder : m.decoder;

  if (rest == "final_norm") return {cfg.d_model};

  // layer_index.group.leaf
  const size_t d2 = rest.find('.');
  if (d2 == std::string::npos) return fail();
  int64_t layer = -1;
  try {
    size_t consumed = 0;
    layer = std::stoll(rest.substr(0, d2), &consumed);
    if (consumed != d2) return fail();
  } catch (const std::exception&) {
    return fail();
  }
  if (layer < 0 || layer >= cfg.num_layers) return fail();
  const std::string tail = rest.substr(d2 + 1);
  const size_t d3 = tail.find('.');
  if (d3 == std::string::npos) return fail();
  const std::string group = tail.substr(0, d3);
  const std::string leaf = tail.substr(d3 + 1);

  if (group == "attn" || group == "xattn") {
    if (group == "xattn" && (is_enc || !encdec)) return fail();
    // Cross-attention keys/values consume the encoder output width.
    const int64_t in_w = (group == "xattn" && (leaf == "k" || leaf == "v"))
                             ? m.encoder.d_model
                             : cfg.d_model;
    if (leaf == "q") return {cfg.d_model, cfg.q_width()};
    if (leaf == "k" || leaf == "v") return {in_w, cfg.kv_width()};
    if (leaf == "o") return {cfg.q_width(), cfg.d_model};
    return fail();
  }
  if (group == "ffn") {
    if (leaf == "gate" || leaf == "up") return {cfg.d_model, cfg.d_ffn};
    if (leaf == "down") return {cfg.d_ffn, cfg.d_model};
    return fail();
  }
  if (group == "norm") {
    if (leaf == "pre_attn" || leaf == "post_attn" || leaf == "pre_ffn" || leaf == "post_ffn")
      return {cfg.d_model};
    return fail();
  }
  return fail();
}

// Full structural validation: metadata invariants, exact name-set equality
// against the canonical scheme, per-tensor shapes, and finiteness.
inline void validate_checkpoint(const NamedCheckpoint& ckpt) {
  ckpt.meta.validate();
  std::vector<std::string> missing, extra;
  const std::vector<std::string> names = canonical_names(ckpt.meta);
  for (const std::string& n : names)
    if (!ckpt.has(n)) missing.push_back(n);
  {
    std::map<std::string, bool> expected;
    for (const std::string& n : names) expected[n] = true;
    for (const auto& [n, t] : ckpt.tensors)
      if (!expected.count(n)) extra.push_back(n);
  }
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "checkpoint: name set mismatch;";
    if (!missing.empty()) {
      msg += " missing:";
      for (const auto& n : missing) msg += " " + n;
    }
    if (!extra.empty()) {
      msg += " unexpected:";
      for (const auto& n : extra) msg += " " + n;
    }
    throw ValidationError(msg);
  }
  for (const auto& [n, t] : ckpt.tensors) {
    const Shape want = expected_shape(n, ckpt.meta);
    if (t.shape != want)
      throw ValidationError(cat("checkpoint: tensor '", n, "' has shape ", shape_str(t.shape),
                                ", expected ", shape_str(want)));
    if (!t.all_finite())
      throw ValidationError(cat("checkpoint: tensor '", n, "' contains non-finite values"));
  }
}

// Fresh random initialization. Projections draw from a zero-mean normal with
// std 1/sqrt(fan_in); embedding tables use 1/sqrt(d_model) so that the
// sqrt(d_model) input scaling yields unit-variance activations; norm scales
// start at one. Per-tensor streams are derived from the tensor name, so the
// result is independent of construction order.
inline NamedCheckpoint random_init(const Metadata& meta, uint64_t seed) {
  meta.validate();
  NamedCheckpoint ckpt;
  ckpt.meta = meta;
  for (const std::string& name : canonical_names(meta)) {
    const Shape shape = expected_shape(name, meta);
    Tensor<float> t;
    if (shape.size() == 1) {
      t = Tensor<float>::full(shape, 1.0f);  // norm gain
    } else {
      const double fan_in = static_cast<double>(shape[0]);
      const double stddev =
          (name.rfind("emb.", 0) == 0 ? 1.0 / std::sqrt(static_cast<double>(shape[1]))
                                      : 1.0 / std::sqrt(fan_in));
      t = Tensor<float>::randn(shape, derive_seed(seed, fnv1a64(name)),
                               static_cast<float>(stddev));
    }
    ckpt.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

inline NamedCheckpoint random_decoder_only(const ModelConfig& cfg, uint64_t seed) {
  Metadata m;
  m.arch = Arch::DecoderOnly;
  m.decoder = cfg;
  return random_init(m, seed);
}

}  // namespace edsg
