#pragma once

// Byte-level vocabulary with fixed special-token ids. Documented layout:
//   0..255    raw byte values
//   256       PAD
//   257       BOS
//   258       EOS
//   259..358  sentinel tokens <s0>..<s99> (span-corruption placeholders)
//   359..361  denoiser mode tokens [R], [S], [X]
// Byte tokenization never emits ids >= 256; sentinels and mode tokens are
// inserted only by the data pipeline.

#include <cstdint>
#include <string>
#include <vector>

#include "edsg/common.hpp"

namespace edsg {

struct Vocab {
  static constexpr int32_t kPad = 256;
  static constexpr int32_t kBos = 257;
  static constexpr int32_t kEos = 258;
  static constexpr int32_t kSentinelBase = 259;
  static constexpr int32_t kNumSentinels = 100;
  static constexpr int32_t kModeR = 359;
  static constexpr int32_t kModeS = 360;
  static constexpr int32_t kModeX = 361;

  static constexpr int32_t size() { return 362; }

  static int32_t sentinel(int32_t i) {
    if (i < 0 || i >= kNumSentinels)
      throw InputError(cat("sentinel index ", i, " out of [0, ", kNumSentinels, ")"));
    return kSentinelBase + i;
  }
  static bool is_sentinel(int32_t id) {
    return id >= kSentinelBase && id < kSentinelBase + kNumSentinels;
  }
  static bool is_byte(int32_t id) { return id >= 0 && id < 256; }
  static bool is_mode(int32_t id) { return id >= kModeR && id <= kModeX; }

  static std::vector<int32_t> encode(const std::string& text) {
    std::vector<int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
    return out;
  }

  // Inverse of encode over byte tokens; non-byte ids render as readable
  // placeholders so decoded model output is always printable.
  static std::string decode(const std::vector<int32_t>& tokens) {
    std::string out;
    for (int32_t t : tokens) {
      if (is_byte(t)) {
        out.push_back(static_cast<char>(t));
      } else {
        out += token_name(t);
      }
    }
    return out;
  }

  static std::string token_name(int32_t id) {
    if (is_byte(id)) return std::string(1, static_cast<char>(id));
    if (id == kPad) return "<pad>";
    if (id == kBos) return "<bos>";
    if (id == kEos) return "<eos>";
    if (is_sentinel(id)) return cat("<s", id - kSentinelBase, ">");
    if (id == kModeR) return "[R]";
    if (id == kModeS) return "[S]";
    if (id == kModeX) return "[X]";
    return cat("<bad:", id, ">");
  }
};

}  // namespace edsg
