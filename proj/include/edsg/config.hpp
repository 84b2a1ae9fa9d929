#pragma once

// Architecture hyperparameters and the named size presets. A preset row
// fixes the transformer body (layers, widths, head layout); vocabulary is
// always this toolkit's byte vocabulary rather than a production tokenizer.

#include <cstdint>
#include <string>

#include "edsg/common.hpp"
#include "edsg/vocab.hpp"

namespace edsg {

enum class Arch { DecoderOnly, EncoderDecoder };
enum class MaskKind { Causal, Bidirectional };

struct ModelConfig {
  int64_t num_layers = 0;
  int64_t d_model = 0;
  int64_t d_ffn = 0;
  int64_t q_heads = 0;
  int64_t kv_heads = 0;
  int64_t d_head = 0;
  int64_t vocab_size = Vocab::size();
  double rope_base = 10000.0;
  int64_t max_seq = 2048;

  bool operator==(const ModelConfig&) const = default;

  int64_t q_width() const { return q_heads * d_head; }
  int64_t kv_width() const { return kv_heads * d_head; }
  int64_t group_size() const { return q_heads / kv_heads; }

  void validate() const {
    if (num_layers <= 0 || d_model <= 0 || d_ffn <= 0 || q_heads <= 0 || kv_heads <= 0 ||
        d_head <= 0 || vocab_size <= 0 || max_seq <= 0)
      throw ConfigError("model config: all dimensions must be positive");
    if (q_heads % kv_heads != 0)
      throw ConfigError(cat("model config: q_heads ", q_heads, " not a multiple of kv_heads ",
                            kv_heads));
    if (d_head % 2 != 0)
      throw ConfigError(cat("model config: d_head ", d_head, " must be even for rotary embedding"));
    if (!(rope_base > 0)) throw ConfigError("model config: rope_base must be positive");
  }
};

// Named size presets. S through XL are laptop-trainable; 2B and 9B exist for
// parameter and flops accounting and are guarded against accidental training
// at the command line.
inline ModelConfig preset(const std::string& name) {
  ModelConfig c;
  if (name == "S") {
    c.num_layers = 8;  c.d_model = 512;  c.d_ffn = 1024;  c.q_heads = 8;  c.kv_heads = 8;  c.d_head = 64;
  } else if (name == "B") {
    c.num_layers = 12; c.d_model = 768;  c.d_ffn = 2048;  c.q_heads = 12; c.kv_heads = 12; c.d_head = 64;
  } else if (name == "L") {
    c.num_layers = 24; c.d_model = 1024; c.d_ffn = 2816;  c.q_heads = 16; c.kv_heads = 16; c.d_head = 64;
  } else if (name == "XL") {
    c.num_layers = 24; c.d_model = 2048; c.d_ffn = 5120;  c.q_heads = 32; c.kv_heads = 32; c.d_head = 64;
  } else if (name == "2B") {
    c.num_layers = 26; c.d_model = 2304; c.d_ffn = 18432; c.q_heads = 8;  c.kv_heads = 4;  c.d_head = 256;
  } else if (name == "9B") {
    c.num_layers = 42; c.d_model = 3584; c.d_ffn = 28672; c.q_heads = 16; c.kv_heads = 8;  c.d_head = 256;
  } else {
    throw ConfigError(cat("unknown preset '", name, "' (expected S, B, L, XL, 2B or 9B)"));
  }
  c.validate();
  return c;
}

inline bool preset_is_guarded(const std::string& name) { return name == "2B" || name == "9B"; }

inline const char* arch_name(Arch a) {
  return a == Arch::DecoderOnly ? "decoder-only" : "encoder-decoder";
}

}  // namespace edsg
