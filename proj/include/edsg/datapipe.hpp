#pragma once

// Training data pipeline: PrefixLM splits, UL2 span corruption and its exact
// inverse, the seeded denoiser mixture, teacher top-k sidecars, batch packing,
// and the binary dataset file format.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "edsg/common.hpp"
#include "edsg/model.hpp"
#include "edsg/vocab.hpp"

namespace edsg {

// Document prefix (bidirectionally encoded) and continuation (causally decoded).
struct PrefixLMExample {
  std::vector<int32_t> input_tokens;
  std::vector<int32_t> target_tokens;
};

// Span-corrupted denoising example. corrupted_input starts with the mode token
// and contains one sentinel per removed span; target lists the spans in order,
// each preceded by its sentinel, and ends with EOS. S-mode degenerates to a
// prefix split: the target is the raw suffix.
struct UL2Example {
  char mode = 'R';
  std::vector<int32_t> corrupted_input;
  std::vector<int32_t> target;
  // Set when the corruption budget could not be met within the sentinel
  // inventory and span sampling stopped early.
  bool span_cap_hit = false;
};

// One denoiser in the UL2 mixture. mean_span_length is unused for S-mode,
// where corruption_rate is the suffix fraction.
struct DenoiserConfig {
  char mode = 'R';
  double mean_span_length = 3.0;
  double corruption_rate = 0.15;

  void validate() const {
    if (mode != 'R' && mode != 'S' && mode != 'X') {
      throw ConfigError(cat("denoiser mode must be R, S, or X, got '", std::string(1, mode), "'"));
    }
    if (!(corruption_rate > 0.0) || !(corruption_rate < 1.0)) {
      throw ConfigError(cat("corruption_rate must lie in (0, 1), got ", corruption_rate));
    }
    if (mode != 'S' && !(mean_span_length >= 1.0)) {
      throw ConfigError(cat("mean_span_length must be >= 1, got ", mean_span_length));
    }
  }
};

// ---------------------------------------------------------------------------
// PrefixLM split: first floor(n/2) tokens become the encoder input, the rest
// the decoder target.

inline PrefixLMExample prefixlm_split(const std::vector<int32_t>& sequence) {
  if (sequence.size() < 2) {
    throw InputError(cat("prefixlm split needs at least 2 tokens, got ", sequence.size()));
  }
  const size_t cut = sequence.size() / 2;
  PrefixLMExample ex;
  ex.input_tokens.assign(sequence.begin(), sequence.begin() + static_cast<ptrdiff_t>(cut));
  ex.target_tokens.assign(sequence.begin() + static_cast<ptrdiff_t>(cut), sequence.end());
  return ex;
}

// ---------------------------------------------------------------------------
// UL2 span corruption.

namespace detail {

// Geometric span length with mean mu (support {1, 2, ...}), via inverse CDF so
// the draw is a fixed function of one uniform variate.
inline int64_t geometric_span(std::mt19937_64& eng, double mu) {
  if (mu <= 1.0) return 1;
  const double p = 1.0 / mu;
  const double u = next_unit(eng);
  const double len = 1.0 + std::floor(std::log1p(-u) / std::log1p(-p));
  return std::max<int64_t>(1, static_cast<int64_t>(len));
}

// Splits `total` into `parts` non-negative integers that sum exactly to
// `total`, proportional to independent exponential draws (largest-remainder
// rounding keeps the sum exact).
inline std::vector<int64_t> random_composition(std::mt19937_64& eng, int64_t total, size_t parts) {
  std::vector<int64_t> out(parts, 0);
  if (parts == 0 || total <= 0) return out;
  std::vector<double> weights(parts);
  double sum = 0.0;
  for (auto& w : weights) {
    double u = 0.0;
    do {
      u = next_unit(eng);
    } while (u <= 1e-300);
    w = -std::log(u);
    sum += w;
  }
  std::vector<std::pair<double, size_t>> remainders(parts);
  int64_t assigned = 0;
  for (size_t i = 0; i < parts; ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<int64_t>(std::floor(exact));
    assigned += out[i];
    remainders[i] = {exact - std::floor(exact), i};
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int64_t i = 0; i < total - assigned; ++i) {
    out[remainders[static_cast<size_t>(i) % parts].second] += 1;
  }
  return out;
}

inline void check_corruptible(const std::vector<int32_t>& sequence) {
  if (sequence.size() < 4) {
    throw InputError(cat("span corruption needs at least 4 tokens, got ", sequence.size()));
  }
  for (int32_t t : sequence) {
    if (t < 0 || t >= Vocab::kSentinelBase) {
      throw InputError(cat("sequence token ", t,
                           " collides with the sentinel/mode id range; corruption would not be "
                           "invertible"));
    }
  }
}

}  // namespace detail

// Corrupts `sequence` under one denoiser. Deterministic given (denoiser, seed).
// The corrupted token count equals round(corruption_rate * n) exactly (clamped
// to [1, n-1]), unless the 100-sentinel inventory forces an early stop.
inline UL2Example ul2_corrupt(const std::vector<int32_t>& sequence, const DenoiserConfig& denoiser,
                              uint64_t seed) {
  denoiser.validate();
  detail::check_corruptible(sequence);
  const int64_t n = static_cast<int64_t>(sequence.size());
  auto eng = make_engine(seed);

  UL2Example ex;
  ex.mode = denoiser.mode;

  if (denoiser.mode == 'S') {
    // Prefix split: the suffix of round(r * n) tokens becomes the target.
    int64_t suffix = static_cast<int64_t>(std::llround(denoiser.corruption_rate * static_cast<double>(n)));
    suffix = std::clamp<int64_t>(suffix, 1, n - 1);
    ex.corrupted_input.push_back(Vocab::kModeS);
    ex.corrupted_input.insert(ex.corrupted_input.end(), sequence.begin(),
                              sequence.end() - static_cast<ptrdiff_t>(suffix));
    ex.target.assign(sequence.end() - static_cast<ptrdiff_t>(suffix), sequence.end());
    return ex;
  }

  int64_t budget =
      static_cast<int64_t>(std::llround(denoiser.corruption_rate * static_cast<double>(n)));
  budget = std::clamp<int64_t>(budget, 1, n - 1);

  // Draw span lengths until the budget is spent, capped by the sentinel count.
  std::vector<int64_t> lengths;
  int64_t spent = 0;
  while (spent < budget) {
    if (lengths.size() == static_cast<size_t>(Vocab::kNumSentinels)) {
      ex.span_cap_hit = true;
      break;
    }
    int64_t len = std::min(detail::geometric_span(eng, denoiser.mean_span_length), budget - spent);
    lengths.push_back(len);
    spent += len;
  }
  const size_t m = lengths.size();

  // Place the spans left to right. Interior gaps get one mandatory kept token
  // when space allows (so distinct spans stay distinct); remaining kept tokens
  // are spread over the m+1 gaps at random.
  std::vector<int64_t> gaps(m + 1, 0);
  int64_t free_tokens = n - spent;
  if (m >= 2 && free_tokens >= static_cast<int64_t>(m) - 1) {
    for (size_t i = 1; i < m; ++i) gaps[i] = 1;
    free_tokens -= static_cast<int64_t>(m) - 1;
  }
  const auto extra = detail::random_composition(eng, free_tokens, m + 1);
  for (size_t i = 0; i <= m; ++i) gaps[i] += extra[i];

  ex.corrupted_input.push_back(denoiser.mode == 'R' ? Vocab::kModeR : Vocab::kModeX);
  int64_t pos = 0;
  for (size_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < gaps[i]; ++j) ex.corrupted_input.push_back(sequence[static_cast<size_t>(pos++)]);
    ex.corrupted_input.push_back(Vocab::sentinel(static_cast<int32_t>(i)));
    ex.target.push_back(Vocab::sentinel(static_cast<int32_t>(i)));
    for (int64_t j = 0; j < lengths[i]; ++j) ex.target.push_back(sequence[static_cast<size_t>(pos++)]);
  }
  for (int64_t j = 0; j < gaps[m]; ++j) ex.corrupted_input.push_back(sequence[static_cast<size_t>(pos++)]);
  ex.target.push_back(Vocab::kEos);
  return ex;
}

// Exact inverse of ul2_corrupt: splices the target spans back over the
// sentinels. Throws InputError when input and target do not line up.
inline std::vector<int32_t> ul2_reconstruct(const UL2Example& ex) {
  if (ex.corrupted_input.empty() || !Vocab::is_mode(ex.corrupted_input[0])) {
    throw InputError("corrupted input must start with a mode token");
  }
  if (ex.mode == 'S') {
    std::vector<int32_t> out(ex.corrupted_input.begin() + 1, ex.corrupted_input.end());
    out.insert(out.end(), ex.target.begin(), ex.target.end());
    return out;
  }
  // Parse the target into sentinel-keyed spans.
  std::vector<std::vector<int32_t>> spans;
  size_t i = 0;
  while (i < ex.target.size() && ex.target[i] != Vocab::kEos) {
    const int32_t s = ex.target[i];
    if (!Vocab::is_sentinel(s) || s - Vocab::kSentinelBase != static_cast<int32_t>(spans.size())) {
      throw InputError(cat("target span ", spans.size(), " is not introduced by its sentinel"));
    }
    ++i;
    std::vector<int32_t> span;
    while (i < ex.target.size() && !Vocab::is_sentinel(ex.target[i]) && ex.target[i] != Vocab::kEos) {
      span.push_back(ex.target[i++]);
    }
    spans.push_back(std::move(span));
  }
  std::vector<int32_t> out;
  size_t next_span = 0;
  for (size_t j = 1; j < ex.corrupted_input.size(); ++j) {
    const int32_t t = ex.corrupted_input[j];
    if (Vocab::is_sentinel(t)) {
      const size_t k = static_cast<size_t>(t - Vocab::kSentinelBase);
      if (k != next_span || k >= spans.size()) {
        throw InputError(cat("input sentinel ", k, " has no matching target span"));
      }
      out.insert(out.end(), spans[k].begin(), spans[k].end());
      ++next_span;
    } else {
      out.push_back(t);
    }
  }
  if (next_span != spans.size()) {
    throw InputError(cat("target has ", spans.size(), " spans but input references ", next_span));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser mixture. Sampling is a pure function of (seed, example index) so a
// stream is reproducible regardless of batching or evaluation order.

inline std::vector<DenoiserConfig> default_ul2_mixture() {
  return {
      {'R', 3.0, 0.15}, {'R', 8.0, 0.15},  {'S', 0.0, 0.25},  {'X', 3.0, 0.5},
      {'X', 8.0, 0.5},  {'X', 64.0, 0.15}, {'X', 64.0, 0.5},
  };
}

class UL2Mixture {
 public:
  UL2Mixture(std::vector<DenoiserConfig> denoisers, std::vector<double> weights, uint64_t seed)
      : denoisers_(std::move(denoisers)), weights_(std::move(weights)), seed_(seed) {
    if (denoisers_.empty()) throw ConfigError("denoiser mixture must not be empty");
    if (weights_.size() != denoisers_.size()) {
      throw ConfigError(cat("mixture has ", denoisers_.size(), " denoisers but ", weights_.size(),
                            " weights"));
    }
    double total = 0.0;
    for (double w : weights_) {
      if (!(w > 0.0)) throw ConfigError(cat("mixture weights must be positive, got ", w));
      total += w;
    }
    for (auto& d : denoisers_) d.validate();
    cumulative_.resize(weights_.size());
    double acc = 0.0;
    for (size_t i = 0; i < weights_.size(); ++i) {
      acc += weights_[i] / total;
      cumulative_[i] = acc;
    }
    cumulative_.back() = 1.0;
  }

  static UL2Mixture uniform_default(uint64_t seed) {
    auto d = default_ul2_mixture();
    return UL2Mixture(d, std::vector<double>(d.size(), 1.0), seed);
  }

  size_t pick(uint64_t index) const {
    auto eng = make_engine(derive_seed(seed_, 0xD1CE, index));
    const double u = next_unit(eng);
    const auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min(static_cast<size_t>(it - cumulative_.begin()), denoisers_.size() - 1);
  }

  UL2Example apply(const std::vector<int32_t>& sequence, uint64_t index) {
    const size_t which = pick(index);
    auto ex = ul2_corrupt(sequence, denoisers_[which], derive_seed(seed_, 0xC0FF, index));
    if (ex.span_cap_hit) ++span_cap_events_;
    return ex;
  }

  const std::vector<DenoiserConfig>& denoisers() const { return denoisers_; }
  int64_t span_cap_events() const { return span_cap_events_; }

 private:
  std::vector<DenoiserConfig> denoisers_;
  std::vector<double> weights_;
  std::vector<double> cumulative_;
  uint64_t seed_ = 0;
  int64_t span_cap_events_ = 0;
};

// Applies the mixture over a whole corpus, one denoiser draw per sequence.
inline std::vector<UL2Example> ul2_mixture(const std::vector<std::vector<int32_t>>& corpus,
                                           const std::vector<DenoiserConfig>& denoisers,
                                           const std::vector<double>& weights, uint64_t seed) {
  UL2Mixture mix(denoisers, weights, seed);
  std::vector<UL2Example> out;
  out.reserve(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) out.push_back(mix.apply(corpus[i], i));
  return out;
}

// ---------------------------------------------------------------------------
// Unified on-disk/training record. PrefixLM and UL2 examples both reduce to an
// (input, target) pair plus an optional teacher sidecar; causal records keep
// the whole sequence in `target` with an empty input.

using TeacherTopK = std::vector<std::vector<std::pair<int32_t, float>>>;

struct DataRecord {
  // 0 = prefixlm, 1 = UL2 R, 2 = UL2 S, 3 = UL2 X, 4 = causal.
  uint8_t mode = 0;
  std::vector<int32_t> input;
  std::vector<int32_t> target;
  // Per target position, top-k (token id, probability) in descending
  // probability. Empty when no teacher was recorded.
  TeacherTopK teacher_topk;
};

inline DataRecord to_record(const PrefixLMExample& ex) {
  DataRecord r;
  r.mode = 0;
  r.input = ex.input_tokens;
  r.target = ex.target_tokens;
  return r;
}

inline DataRecord to_record(const UL2Example& ex) {
  DataRecord r;
  r.mode = ex.mode == 'R' ? 1 : (ex.mode == 'S' ? 2 : 3);
  r.input = ex.corrupted_input;
  r.target = ex.target;
  return r;
}

inline DataRecord causal_record(const std::vector<int32_t>& sequence) {
  if (sequence.empty()) throw InputError("causal record needs a non-empty sequence");
  DataRecord r;
  r.mode = 4;
  r.target = sequence;
  return r;
}

// ---------------------------------------------------------------------------
// Teacher sidecars: run a decoder-only teacher over input ++ target and store
// the top-k next-token distribution for every target position.

inline void teacher_record(const NamedCheckpoint& teacher, DataRecord& record, int32_t k) {
  if (teacher.meta.arch != Arch::DecoderOnly) {
    throw ConfigError("teacher sidecars require a decoder-only teacher");
  }
  if (k < 1) throw ConfigError(cat("teacher top-k must be >= 1, got ", k));
  if (record.target.empty()) throw InputError("cannot record a teacher sidecar for an empty target");

  // The teacher consumes the example as one stream. For causal records the
  // first target token has no predecessor, so it gets no sidecar entry
  // (mirroring the cross-entropy convention of predicting from BOS onward).
  std::vector<int32_t> stream;
  if (record.mode == 4) {
    stream.push_back(Vocab::kBos);
  } else {
    stream = record.input;
    if (stream.empty()) throw InputError("prefix records need a non-empty input for the teacher");
  }
  stream.insert(stream.end(), record.target.begin(), record.target.end());

  const auto logits = decoder_only_forward(teacher, stream);
  const int64_t vocab = teacher.meta.decoder.vocab_size;
  const int32_t keep = std::min<int64_t>(k, vocab);
  record.teacher_topk.assign(record.target.size(), {});
  const int64_t base = static_cast<int64_t>(stream.size()) - static_cast<int64_t>(record.target.size());
  std::vector<float> probs(static_cast<size_t>(vocab));
  std::vector<int32_t> order(static_cast<size_t>(vocab));
  for (size_t t = 0; t < record.target.size(); ++t) {
    const float* row = &logits.data[static_cast<size_t>((base + static_cast<int64_t>(t) - 1) *
                                                        vocab)];
    kernels::softmax_row(row, probs.data(), vocab);
    for (int64_t i = 0; i < vocab; ++i) order[static_cast<size_t>(i)] = static_cast<int32_t>(i);
    std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                      [&](int32_t a, int32_t b) {
                        const float pa = probs[static_cast<size_t>(a)];
                        const float pb = probs[static_cast<size_t>(b)];
                        if (pa != pb) return pa > pb;
                        return a < b;  // deterministic tie order, lowest id first
                      });
    auto& entry = record.teacher_topk[t];
    entry.reserve(static_cast<size_t>(keep));
    for (int32_t i = 0; i < keep; ++i) {
      entry.emplace_back(order[static_cast<size_t>(i)], probs[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    }
  }
}

// ---------------------------------------------------------------------------
// Batch packing: right-pad with PAD, mask padded target positions out of the
// loss, truncate overlong examples from the right.

struct PackedExample {
  uint8_t mode = 0;
  std::vector<int32_t> input;    // length max_input (empty for causal records)
  std::vector<int32_t> target;   // length max_target
  std::vector<float> loss_mask;  // length max_target; 1 = real, 0 = padding
  int64_t input_len = 0;
  int64_t target_len = 0;
  TeacherTopK teacher_topk;  // truncated alongside target
};

struct Batch {
  std::vector<PackedExample> items;
  int64_t real_target_tokens = 0;
};

inline std::vector<Batch> pack_batches(const std::vector<DataRecord>& records, int64_t batch_size,
                                       int64_t max_input, int64_t max_target) {
  if (batch_size < 1) throw ConfigError(cat("batch_size must be >= 1, got ", batch_size));
  if (max_input < 1 || max_target < 1) {
    throw ConfigError(cat("sequence capacities must be >= 1, got input ", max_input, " target ",
                          max_target));
  }
  std::vector<Batch> out;
  for (size_t i = 0; i < records.size(); ++i) {
    if (i % static_cast<size_t>(batch_size) == 0) out.emplace_back();
    const auto& r = records[i];
    PackedExample p;
    p.mode = r.mode;
    p.input_len = std::min<int64_t>(static_cast<int64_t>(r.input.size()), max_input);
    p.target_len = std::min<int64_t>(static_cast<int64_t>(r.target.size()), max_target);
    if (p.target_len == 0) throw InputError(cat("record ", i, " has an empty target"));
    if (r.mode != 4) {
      p.input.assign(r.input.begin(), r.input.begin() + static_cast<ptrdiff_t>(p.input_len));
      p.input.resize(static_cast<size_t>(max_input), Vocab::kPad);
    }
    p.target.assign(r.target.begin(), r.target.begin() + static_cast<ptrdiff_t>(p.target_len));
    p.target.resize(static_cast<size_t>(max_target), Vocab::kPad);
    p.loss_mask.assign(static_cast<size_t>(max_target), 0.0f);
    std::fill(p.loss_mask.begin(), p.loss_mask.begin() + static_cast<ptrdiff_t>(p.target_len), 1.0f);
    if (!r.teacher_topk.empty()) {
      p.teacher_topk.assign(r.teacher_topk.begin(),
                            r.teacher_topk.begin() + static_cast<ptrdiff_t>(std::min<size_t>(
                                r.teacher_topk.size(), static_cast<size_t>(p.target_len))));
    }
    out.back().real_target_tokens += p.target_len;
    out.back().items.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus input: newline-delimited UTF-8 text, one document per line, tokenized
// at the byte level. Lines shorter than min_tokens are dropped.

inline std::vector<std::vector<int32_t>> read_text_corpus(const std::string& path,
                                                          size_t min_tokens = 2) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError(cat("cannot open corpus file ", path));
  std::vector<std::vector<int32_t>> corpus;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto tokens = Vocab::encode(line);
    if (tokens.size() >= min_tokens) corpus.push_back(std::move(tokens));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Dataset file format (little-endian):
//   magic "EDSD", u32 version, u64 record count, then per record:
//     u32 payload byte length (everything after this field)
//     u8 mode, u32 input length, i32 input tokens,
//     u32 target length, i32 target tokens,
//     u8 has_teacher; if 1: u32 k, then per target position k x (i32 id, f32 p).
// The length prefix lets a reader skip records without parsing them.

inline constexpr uint32_t kDatasetVersion = 1;

inline void write_dataset(const std::string& path, const std::vector<DataRecord>& records) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError(cat("cannot open ", tmp, " for writing"));
    os.write("EDSD", 4);
    io::write_u32(os, kDatasetVersion);
    io::write_u64(os, static_cast<uint64_t>(records.size()));
    for (const auto& r : records) {
      uint32_t k = 0;
      if (!r.teacher_topk.empty()) {
        if (r.teacher_topk.size() != r.target.size()) {
          throw InputError(cat("teacher sidecar covers ", r.teacher_topk.size(),
                               " positions but the target has ", r.target.size()));
        }
        k = static_cast<uint32_t>(r.teacher_topk[0].size());
        for (const auto& e : r.teacher_topk) {
          if (e.size() != k) throw InputError("teacher sidecar entries must share one k");
        }
      }
      uint32_t payload = 1 + 4 + 4 * static_cast<uint32_t>(r.input.size()) + 4 +
                         4 * static_cast<uint32_t>(r.target.size()) + 1;
      if (k > 0) payload += 4 + 8 * k * static_cast<uint32_t>(r.target.size());
      io::write_u32(os, payload);
      io::write_u8(os, r.mode);
      io::write_u32(os, static_cast<uint32_t>(r.input.size()));
      for (int32_t t : r.input) io::write_i32(os, t);
      io::write_u32(os, static_cast<uint32_t>(r.target.size()));
      for (int32_t t : r.target) io::write_i32(os, t);
      io::write_u8(os, k > 0 ? 1 : 0);
      if (k > 0) {
        io::write_u32(os, k);
        for (const auto& e : r.teacher_topk) {
          for (const auto& [id, p] : e) {
            io::write_i32(os, id);
            io::write_f32(os, p);
          }
        }
      }
    }
    if (!os) throw InputError(cat("write to ", tmp, " failed"));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw InputError(cat("cannot move ", tmp, " into place at ", path));
  }
}

inline std::vector<DataRecord> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError(cat("cannot open dataset file ", path));
  char magic[4] = {};
  io::read_bytes(is, magic, 4, "dataset magic");
  if (std::string(magic, 4) != "EDSD") {
    throw FormatError(cat(path, " is not a dataset file (bad magic)"));
  }
  const uint32_t version = io::read_u32(is, "dataset version");
  if (version != kDatasetVersion) {
    throw FormatError(cat("unsupported dataset version ", version));
  }
  const uint64_t count = io::read_u64(is, "record count");
  std::vector<DataRecord> records;
  records.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    const uint32_t payload = io::read_u32(is, "record length");
    const auto start = is.tellg();
    DataRecord r;
    r.mode = io::read_u8(is, "record mode");
    if (r.mode > 4) throw FormatError(cat("record ", i, " has unknown mode ", int(r.mode)));
    const uint32_t n_in = io::read_u32(is, "input length");
    r.input.resize(n_in);
    for (auto& t : r.input) t = io::read_i32(is, "input token");
    const uint32_t n_tgt = io::read_u32(is, "target length");
    r.target.resize(n_tgt);
    for (auto& t : r.target) t = io::read_i32(is, "target token");
    if (io::read_u8(is, "teacher flag") != 0) {
      const uint32_t k = io::read_u32(is, "teacher k");
      r.teacher_topk.resize(n_tgt);
      for (auto& e : r.teacher_topk) {
        e.resize(k);
        for (auto& [id, p] : e) {
          id = io::read_i32(is, "teacher token id");
          p = io::read_f32(is, "teacher probability");
        }
      }
    }
    const auto consumed = is.tellg() - start;
    if (consumed != static_cast<std::streamoff>(payload)) {
      throw FormatError(cat("record ", i, " declares ", payload, " payload bytes but parsing used ",
                            static_cast<int64_t>(consumed)));
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace edsg
