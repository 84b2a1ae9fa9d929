#pragma once

// Single-file checkpoint format:
//
//   bytes 0..3   magic "EDSG"
//   bytes 4..7   format version, u32 little-endian
//   bytes 8..15  manifest byte length, u64 little-endian
//   manifest     UTF-8 JSON: the metadata record plus, per tensor,
//                dtype / shape / absolute byte offset / byte length
//   payload      raw little-endian binary32, each tensor offset a
//                multiple of 64
//
// Saving validates the checkpoint first and goes through a temp file plus
// rename, so a crash never leaves a half-written checkpoint at the target
// path. Loading re-validates everything: magic, version, manifest syntax,
// offset bounds and overlaps, byte lengths against shapes, and finally the
// full structural checkpoint validation.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "edsg/checkpoint.hpp"

namespace edsg {

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'E', 'D', 'S', 'G'};
constexpr int64_t kTensorAlign = 64;

// The payload is written by memcpy, which is the wire format only on a
// little-endian host.
static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"d_model", c.d_model},       {"d_ffn", c.d_ffn},
          {"q_heads", c.q_heads},       {"kv_heads", c.kv_heads},     {"d_head", c.d_head},
          {"vocab_size", c.vocab_size}, {"rope_base", c.rope_base},   {"max_seq", c.max_seq}};
}

inline ModelConfig config_from_json(const nlohmann::json& j, const std::string& what) {
  ModelConfig c;
  try {
    c.num_layers = j.at("num_layers").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.d_ffn = j.at("d_ffn").get<int64_t>();
    c.q_heads = j.at("q_heads").get<int64_t>();
    c.kv_heads = j.at("kv_heads").get<int64_t>();
    c.d_head = j.at("d_head").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.rope_base = j.at("rope_base").get<double>();
    c.max_seq = j.at("max_seq").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(cat("checkpoint manifest: bad ", what, " config: ", e.what()));
  }
  return c;
}

inline nlohmann::json metadata_to_json(const Metadata& m) {
  return {{"arch", m.arch == Arch::EncoderDecoder ? "encoder-decoder" : "decoder-only"},
          {"encoder", config_to_json(m.encoder)},
          {"decoder", config_to_json(m.decoder)},
          {"shared_embedding", m.shared_embedding},
          {"encoder_causal", m.encoder_causal},
          {"objective", m.objective},
          {"train_steps", m.train_steps},
          {"warmup_steps_k", m.warmup_steps_k},
          {"parents", m.parents}};
}

inline Metadata metadata_from_json(const nlohmann::json& j) {
  Metadata m;
  try {
    const std::string arch = j.at("arch").get<std::string>();
    if (arch == "decoder-only") {
      m.arch = Arch::DecoderOnly;
    } else if (arch == "encoder-decoder") {
      m.arch = Arch::EncoderDecoder;
    } else {
      throw FormatError(cat("checkpoint manifest: unknown arch '", arch, "'"));
    }
    m.shared_embedding = j.at("shared_embedding").get<bool>();
    m.encoder_causal = j.at("encoder_causal").get<bool>();
    m.objective = j.at("objective").get<std::string>();
    m.train_steps = j.at("train_steps").get<int64_t>();
    m.warmup_steps_k = j.at("warmup_steps_k").get<int64_t>();
    m.parents = j.at("parents").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(cat("checkpoint manifest: bad metadata: ", e.what()));
  }
  m.encoder = config_from_json(j.at("encoder"), "encoder");
  m.decoder = config_from_json(j.at("decoder"), "decoder");
  return m;
}

inline int64_t align_up(int64_t n, int64_t a) { return (n + a - 1) / a * a; }

}  // namespace detail

inline void save_checkpoint(const NamedCheckpoint& ckpt, const std::string& path) {
  validate_checkpoint(ckpt);

  // Lay out the payload first so the manifest can carry final offsets.
  // Offsets are absolute file positions; the region between the manifest and
  // the first tensor is alignment padding.
  nlohmann::json manifest;
  manifest["metadata"] = detail::metadata_to_json(ckpt.meta);
  nlohmann::json tensors = nlohmann::json::object();

  // Two passes: measure the manifest with placeholder offsets of the final
  // width, then fill in the real ones. Offsets are fixed-width numbers so the
  // manifest length cannot change between passes.
  std::string blob = [&] {
    for (const auto& [name, t] : ckpt.tensors) {
      tensors[name] = {{"dtype", "f32"},
                       {"shape", t.shape},
                       {"offset", 0},
                       {"length", static_cast<int64_t>(t.data.size() * sizeof(float))}};
    }
    manifest["tensors"] = tensors;
    return manifest.dump();
  }();

  // Offsets serialize at whatever width their value needs; pin the header
  // area instead by computing sizes from a worst-case 20-digit field.
  // Simpler and fully robust: compute offsets iteratively until stable.
  int64_t header = 16 + static_cast<int64_t>(blob.size());
  for (int pass = 0; pass < 4; ++pass) {
    int64_t cursor = detail::align_up(header, kTensorAlign);
    for (const auto& [name, t] : ckpt.tensors) {
      tensors[name]["offset"] = cursor;
      cursor = detail::align_up(cursor + static_cast<int64_t>(t.data.size() * sizeof(float)),
                                kTensorAlign);
    }
    manifest["tensors"] = tensors;
    blob = manifest.dump();
    const int64_t new_header = 16 + static_cast<int64_t>(blob.size());
    if (new_header == header) break;
    header = new_header;
  }
  if (16 + static_cast<int64_t>(blob.size()) != header) {
    throw ContractError("checkpoint save: manifest layout failed to stabilize");
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError(cat("cannot open ", tmp, " for writing"));
    os.write(kCheckpointMagic, 4);
    io::write_u32(os, kCheckpointVersion);
    io::write_u64(os, static_cast<uint64_t>(blob.size()));
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    int64_t cursor = header;
    for (const auto& [name, t] : ckpt.tensors) {
      const int64_t offset = tensors[name]["offset"].get<int64_t>();
      for (; cursor < offset; ++cursor) os.put('\0');
      os.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
      cursor = offset + static_cast<int64_t>(t.data.size() * sizeof(float));
    }
    if (!os) throw InputError(cat("write to ", tmp, " failed"));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw InputError(cat("cannot move ", tmp, " into place at ", path));
  }
}

inline NamedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError(cat("cannot open checkpoint file ", path));
  is.seekg(0, std::ios::end);
  const int64_t file_size = static_cast<int64_t>(is.tellg());
  is.seekg(0);

  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError(cat("not a checkpoint file (bad magic): ", path));
  }
  const uint32_t version = io::read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError(cat("unsupported checkpoint version ", version, " (expected ",
                          kCheckpointVersion, ")"));
  }
  const uint64_t manifest_len = io::read_u64(is, "manifest length");
  if (16 + static_cast<int64_t>(manifest_len) > file_size) {
    throw FormatError(cat("manifest length ", manifest_len, " exceeds file size ", file_size));
  }
  std::string blob(manifest_len, '\0');
  if (!is.read(blob.data(), static_cast<std::streamsize>(manifest_len))) {
    throw FormatError("truncated stream while reading manifest");
  }

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(cat("checkpoint manifest is not valid JSON: ", e.what()));
  }
  if (!manifest.contains("metadata") || !manifest.contains("tensors")) {
    throw FormatError("checkpoint manifest: missing metadata or tensors section");
  }

  NamedCheckpoint ckpt;
  ckpt.meta = detail::metadata_from_json(manifest["metadata"]);

  // Decode the tensor table and check bounds before touching the payload.
  struct Entry {
    std::string name;
    Shape shape;
    int64_t offset = 0, length = 0;
  };
  std::vector<Entry> entries;
  for (const auto& [name, spec] : manifest["tensors"].items()) {
    Entry e;
    e.name = name;
    try {
      const std::string dtype = spec.at("dtype").get<std::string>();
      if (dtype != "f32") throw FormatError(cat("tensor '", name, "': unsupported dtype ", dtype));
      e.shape = spec.at("shape").get<Shape>();
      e.offset = spec.at("offset").get<int64_t>();
      e.length = spec.at("length").get<int64_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(cat("checkpoint manifest: bad entry for tensor '", name, "': ", ex.what()));
    }
    if (e.offset < 16 + static_cast<int64_t>(manifest_len) || e.length < 0 ||
        e.offset + e.length > file_size) {
      throw FormatError(cat("tensor '", name, "': payload [", e.offset, ", ", e.offset + e.length,
                            ") out of bounds for file of ", file_size, " bytes"));
    }
    if (e.offset % kTensorAlign != 0) {
      throw FormatError(cat("tensor '", name, "': offset ", e.offset, " not ", kTensorAlign,
                            "-byte aligned"));
    }
    int64_t count = 1;
    for (int64_t d : e.shape) {
      if (d <= 0) throw ValidationError(cat("tensor '", name, "': non-positive dimension in shape"));
      count *= d;
    }
    if (count * static_cast<int64_t>(sizeof(float)) != e.length) {
      throw ValidationError(cat("tensor '", name, "': shape ", shape_str(e.shape), " needs ",
                                count * sizeof(float), " bytes but manifest declares ", e.length));
    }
    entries.push_back(std::move(e));
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.offset < b.offset; });
  for (size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].offset < entries[i - 1].offset + entries[i - 1].length) {
      throw FormatError(cat("tensors '", entries[i - 1].name, "' and '", entries[i].name,
                            "' have overlapping payloads"));
    }
  }

  for (const Entry& e : entries) {
    Tensor<float> t;
    t.shape = e.shape;
    t.data.resize(static_cast<size_t>(e.length) / sizeof(float));
    is.seekg(e.offset);
    if (!is.read(reinterpret_cast<char*>(t.data.data()), e.length)) {
      throw FormatError(cat("truncated stream while reading tensor '", e.name, "'"));
    }
    ckpt.tensors.emplace(e.name, std::move(t));
  }

  validate_checkpoint(ckpt);
  return ckpt;
}

// Content hash of a checkpoint's bytes as stored, for reproducibility
// records: order-independent of map iteration because names are hashed with
// their payloads in sorted order.
inline uint64_t checkpoint_content_hash(const NamedCheckpoint& ckpt) {
  uint64_t h = fnv1a64("edsg.checkpoint");
  auto mix = [&h](uint64_t x) { h = (h ^ x) * 0x100000001b3ULL; };
  mix(ckpt.meta.arch == Arch::EncoderDecoder ? 2 : 1);
  mix(static_cast<uint64_t>(ckpt.meta.train_steps));
  for (const auto& [name, t] : ckpt.tensors) {
    mix(fnv1a64(name));
    for (int64_t d : t.shape) mix(static_cast<uint64_t>(d));
    for (float x : t.data) {
      uint32_t bits;
      std::memcpy(&bits, &x, sizeof(bits));
      mix(bits);
    }
  }
  return h;
}

}  // namespace edsg
