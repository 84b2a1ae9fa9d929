#pragma once

// Inference and measurement: an incremental decoder with per-layer key/value
// caches, greedy decoding with a cached/uncached switch, perplexity, a frozen
// linear probe, closed-form flop estimates, and wall-clock latency.
//
// The incremental path reuses the same kernels as the tape forward and
// accumulates every output element in the same order, so cached and uncached
// logits agree exactly, not just approximately.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "edsg/checkpoint.hpp"
#include "edsg/datapipe.hpp"
#include "edsg/model.hpp"
#include "edsg/trainer.hpp"

namespace edsg {

// ---------------------------------------------------------------------------
// Key/value cache. Self-attention k/v rows append as tokens arrive;
// cross-attention k/v are projected once from the encoder output and never
// change.

class KVCache {
 public:
  // Decoder-only checkpoints take no encoder input; encoder-decoder
  // checkpoints run their encoder once here.
  explicit KVCache(const NamedCheckpoint& ckpt, const std::vector<int32_t>& encoder_input = {})
      : ckpt_(&ckpt), cfg_(ckpt.meta.decoder), encdec_(ckpt.meta.arch == Arch::EncoderDecoder) {
    if (encdec_) {
      if (encoder_input.empty()) throw InputError("key/value cache: encoder input is empty");
      Tape<float> tp;
      const auto b = edsg::bind(tp, ckpt, false);
      enc_out_ = tp.value(encoder_hidden(tp, b, encoder_input));
      enc_len_ = enc_out_.shape[0];
    } else if (!encoder_input.empty()) {
      throw ContractError("key/value cache: decoder-only checkpoint got encoder input");
    }

    layers_.resize(static_cast<size_t>(cfg_.num_layers));
    if (encdec_) {
      const int64_t d_enc = ckpt.meta.encoder.d_model;
      for (int64_t l = 0; l < cfg_.num_layers; ++l) {
        auto& lay = layers_[static_cast<size_t>(l)];
        lay.cross_k.assign(static_cast<size_t>(enc_len_ * cfg_.kv_width()), 0.0f);
        lay.cross_v.assign(static_cast<size_t>(enc_len_ * cfg_.kv_width()), 0.0f);
        kernels::matmul_acc(enc_out_.data.data(), w(l, "xattn.k").data.data(),
                            lay.cross_k.data(), enc_len_, d_enc, cfg_.kv_width());
        kernels::matmul_acc(enc_out_.data.data(), w(l, "xattn.v").data.data(),
                            lay.cross_v.data(), enc_len_, d_enc, cfg_.kv_width());
      }
    }

    // Transposed embedding for the per-step logits row, materialized once the
    // same way the full forward does.
    const Tensor<float>& emb = ckpt.tensors.at("emb.tok");
    emb_t_.shape = {emb.shape[1], emb.shape[0]};
    emb_t_.data.resize(emb.data.size());
    kernels::transpose(emb.data.data(), emb_t_.data.data(), emb.shape[0], emb.shape[1]);
  }

  int64_t len() const { return len_; }
  const Tensor<float>& encoder_output() const {
    if (!encdec_) throw ContractError("key/value cache: no encoder side");
    return enc_out_;
  }

  // Appends `token` at the next position and returns its next-token logits.
  std::vector<float> step(int32_t token) {
    if (token < 0 || token >= cfg_.vocab_size) {
      throw InputError(cat("decode step: token ", token, " outside vocabulary of ", cfg_.vocab_size));
    }
    if (len_ >= cfg_.max_seq) {
      throw InputError(cat("decode step: position ", len_, " reaches max_seq ", cfg_.max_seq));
    }
    const int64_t d = cfg_.d_model;
    const int64_t qw = cfg_.q_width(), kw = cfg_.kv_width(), dh = cfg_.d_head;
    const int64_t group = cfg_.group_size();
    const int32_t pos = static_cast<int32_t>(len_);
    const float emb_scale = static_cast<float>(std::sqrt(static_cast<double>(d)));
    const float inv_scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));

    // h = embed(token) * sqrt(d_model)
    std::vector<float> h(static_cast<size_t>(d));
    const Tensor<float>& emb = ckpt_->tensors.at("emb.tok");
    for (int64_t j = 0; j < d; ++j) {
      h[static_cast<size_t>(j)] = emb.data[static_cast<size_t>(token * d + j)] * emb_scale;
    }

    std::vector<float> norm(static_cast<size_t>(d)), q(static_cast<size_t>(qw));
    std::vector<float> kv_new(static_cast<size_t>(kw)), mix(static_cast<size_t>(qw));
    std::vector<float> sub(static_cast<size_t>(d));
    const std::vector<float> unit(static_cast<size_t>(d), 1.0f);

    for (int64_t l = 0; l < cfg_.num_layers; ++l) {
      auto& lay = layers_[static_cast<size_t>(l)];

      // Self-attention with the sandwich norms.
      kernels::rms_norm_row(h.data(), g(l, "norm.pre_attn"), norm.data(), d,
                            static_cast<float>(kRmsEps));
      project(norm, w(l, "attn.q"), q);
      kernels::rope_rows(q.data(), 1, &pos, cfg_.q_heads, dh, cfg_.rope_base, false);
      project(norm, w(l, "attn.k"), kv_new);
      kernels::rope_rows(kv_new.data(), 1, &pos, cfg_.kv_heads, dh, cfg_.rope_base, false);
      lay.self_k.insert(lay.self_k.end(), kv_new.begin(), kv_new.end());
      project(norm, w(l, "attn.v"), kv_new);
      lay.self_v.insert(lay.self_v.end(), kv_new.begin(), kv_new.end());
      attend(q, lay.self_k, lay.self_v, len_ + 1, group, inv_scale, mix);
      project_into(mix, w(l, "attn.o"), sub);
      kernels::rms_norm_row(sub.data(), g(l, "norm.post_attn"), norm.data(), d,
                            static_cast<float>(kRmsEps));
      for (int64_t j = 0; j < d; ++j) h[static_cast<size_t>(j)] += norm[static_cast<size_t>(j)];

      // Cross-attention: unit-gain input norm, output joins the residual raw.
      if (encdec_) {
        kernels::rms_norm_row(h.data(), unit.data(), norm.data(), d, static_cast<float>(kRmsEps));
        project(norm, w(l, "xattn.q"), q);
        attend(q, lay.cross_k, lay.cross_v, enc_len_, group, inv_scale, mix);
        project_into(mix, w(l, "xattn.o"), sub);
        for (int64_t j = 0; j < d; ++j) h[static_cast<size_t>(j)] += sub[static_cast<size_t>(j)];
      }

      // Gated feed-forward.
      kernels::rms_norm_row(h.data(), g(l, "norm.pre_ffn"), norm.data(), d,
                            static_cast<float>(kRmsEps));
      std::vector<float> gate(static_cast<size_t>(cfg_.d_ffn)), up(static_cast<size_t>(cfg_.d_ffn));
      project(norm, w(l, "ffn.gate"), gate);
      for (auto& x : gate) x = kernels::gelu(x);
      project(norm, w(l, "ffn.up"), up);
      for (size_t j = 0; j < gate.size(); ++j) gate[j] *= up[j];
      project_into(gate, w(l, "ffn.down"), sub);
      kernels::rms_norm_row(sub.data(), g(l, "norm.post_ffn"), norm.data(), d,
                            static_cast<float>(kRmsEps));
      for (int64_t j = 0; j < d; ++j) h[static_cast<size_t>(j)] += norm[static_cast<size_t>(j)];
    }

    kernels::rms_norm_row(h.data(), ckpt_->tensors.at("dec.final_norm").data.data(), norm.data(), d,
                          static_cast<float>(kRmsEps));
    std::vector<float> logits(static_cast<size_t>(cfg_.vocab_size), 0.0f);
    kernels::matmul_acc(norm.data(), emb_t_.data.data(), logits.data(), 1, d, cfg_.vocab_size);
    ++len_;
    return logits;
  }

 private:
  struct Layer {
    std::vector<float> self_k, self_v;    // [len, kv_width], rows appended
    std::vector<float> cross_k, cross_v;  // [enc_len, kv_width], immutable
  };

  const Tensor<float>& w(int64_t layer, const std::string& leaf) const {
    return ckpt_->tensors.at(cat("dec.", layer, ".", leaf));
  }
  const float* g(int64_t layer, const std::string& leaf) const {
    return w(layer, leaf).data.data();
  }

  // out = row * mat, with `out` sized to mat's column count.
  void project(const std::vector<float>& row, const Tensor<float>& mat, std::vector<float>& out) const {
    std::fill(out.begin(), out.end(), 0.0f);
    kernels::matmul_acc(row.data(), mat.data.data(), out.data(), 1, mat.shape[0], mat.shape[1]);
  }
  void project_into(const std::vector<float>& row, const Tensor<float>& mat,
                    std::vector<float>& out) const {
    out.assign(static_cast<size_t>(mat.shape[1]), 0.0f);
    kernels::matmul_acc(row.data(), mat.data.data(), out.data(), 1, mat.shape[0], mat.shape[1]);
  }

  // Grouped-query attention of one query row over `rows` cached kv rows,
  // mirroring the tape path: per-head slices, transpose, matmul, scale,
  // softmax, mix.
  void attend(const std::vector<float>& q, const std::vector<float>& k_cache,
              const std::vector<float>& v_cache, int64_t rows, int64_t group, float inv_scale,
              std::vector<float>& out) const {
    const int64_t dh = cfg_.d_head, kw = cfg_.kv_width();
    std::vector<float> kh(static_cast<size_t>(rows * dh)), kh_t(static_cast<size_t>(rows * dh));
    std::vector<float> vh(static_cast<size_t>(rows * dh));
    std::vector<float> scores(static_cast<size_t>(rows)), probs(static_cast<size_t>(rows));
    for (int64_t head = 0; head < cfg_.q_heads; ++head) {
      const int64_t kv_off = (head / group) * dh;
      for (int64_t r = 0; r < rows; ++r) {
        std::copy_n(&k_cache[static_cast<size_t>(r * kw + kv_off)], dh, &kh[static_cast<size_t>(r * dh)]);
        std::copy_n(&v_cache[static_cast<size_t>(r * kw + kv_off)], dh, &vh[static_cast<size_t>(r * dh)]);
      }
      kernels::transpose(kh.data(), kh_t.data(), rows, dh);
      std::fill(scores.begin(), scores.end(), 0.0f);
      kernels::matmul_acc(&q[static_cast<size_t>(head * dh)], kh_t.data(), scores.data(), 1, dh, rows);
      for (auto& s : scores) s *= inv_scale;
      kernels::softmax_row(scores.data(), probs.data(), rows);
      float* mixed = &out[static_cast<size_t>(head * dh)];
      std::fill_n(mixed, dh, 0.0f);
      kernels::matmul_acc(probs.data(), vh.data(), mixed, 1, rows, dh);
    }
  }

  const NamedCheckpoint* ckpt_;
  ModelConfig cfg_;
  bool encdec_ = false;
  int64_t len_ = 0;
  int64_t enc_len_ = 0;
  Tensor<float> enc_out_;
  Tensor<float> emb_t_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Greedy decoding. Ties resolve to the lowest token id; generation stops
// after max_new_tokens or once EOS is emitted (EOS stays in the output).

inline int32_t argmax_token(const float* logits, int64_t n) {
  int32_t best = 0;
  for (int64_t i = 1; i < n; ++i) {
    if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) {
      best = static_cast<int32_t>(i);
    }
  }
  return best;
}

// Decoder-only: `input_tokens` is the prompt and generation continues it.
// Encoder-decoder: `input_tokens` feeds the encoder and the decoder starts
// from BOS. Returns only the generated tokens. `use_cache = false` recomputes
// the full prefix every step through the tape forward; both paths produce
// identical tokens.
inline std::vector<int32_t> greedy_decode(const NamedCheckpoint& ckpt,
                                          const std::vector<int32_t>& input_tokens,
                                          int64_t max_new_tokens, bool use_cache = true) {
  if (max_new_tokens < 1) {
    throw ConfigError(cat("greedy decode: max_new_tokens must be >= 1, got ", max_new_tokens));
  }
  if (input_tokens.empty()) throw InputError("greedy decode: empty input");
  const bool encdec = ckpt.meta.arch == Arch::EncoderDecoder;
  const int64_t vocab = ckpt.meta.decoder.vocab_size;
  std::vector<int32_t> out;

  if (use_cache) {
    KVCache cache(ckpt, encdec ? input_tokens : std::vector<int32_t>{});
    std::vector<float> logits;
    if (encdec) {
      logits = cache.step(Vocab::kBos);
    } else {
      for (int32_t t : input_tokens) logits = cache.step(t);
    }
    while (static_cast<int64_t>(out.size()) < max_new_tokens) {
      const int32_t next = argmax_token(logits.data(), vocab);
      out.push_back(next);
      if (next == Vocab::kEos || static_cast<int64_t>(out.size()) == max_new_tokens) break;
      logits = cache.step(next);
    }
    return out;
  }

  std::vector<int32_t> stream = encdec ? std::vector<int32_t>{Vocab::kBos} : input_tokens;
  while (static_cast<int64_t>(out.size()) < max_new_tokens) {
    const Tensor<float> logits = encdec ? encdec_forward(ckpt, input_tokens, stream)
                                        : decoder_only_forward(ckpt, stream);
    const float* last = &logits.data[static_cast<size_t>((logits.shape[0] - 1) * vocab)];
    const int32_t next = argmax_token(last, vocab);
    out.push_back(next);
    if (next == Vocab::kEos) break;
    stream.push_back(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perplexity: exp of the mean NLL over all target tokens, accumulated in
// binary64. Records follow the training convention (BOS-shifted decoder
// input).

inline double perplexity(const NamedCheckpoint& ckpt, const std::vector<DataRecord>& records) {
  if (records.empty()) throw ContractError("perplexity: no records");
  double nll = 0.0;
  int64_t count = 0;
  const int64_t vocab = ckpt.meta.decoder.vocab_size;
  std::vector<double> row(static_cast<size_t>(vocab)), logp(static_cast<size_t>(vocab));
  for (const auto& r : records) {
    if (r.target.empty()) throw InputError("perplexity: record with empty target");
    std::vector<int32_t> dec_in;
    dec_in.push_back(Vocab::kBos);
    dec_in.insert(dec_in.end(), r.target.begin(), r.target.end() - 1);
    Tensor<float> logits;
    if (r.mode == 4) {
      if (ckpt.meta.arch != Arch::DecoderOnly) {
        throw ConfigError("perplexity: causal records need a decoder-only model");
      }
      logits = decoder_only_forward(ckpt, dec_in);
    } else {
      if (ckpt.meta.arch != Arch::EncoderDecoder) {
        throw ConfigError("perplexity: prefix records need an encoder-decoder model");
      }
      logits = encdec_forward(ckpt, r.input, dec_in);
    }
    for (size_t t = 0; t < r.target.size(); ++t) {
      const float* lrow = &logits.data[t * static_cast<size_t>(vocab)];
      for (int64_t j = 0; j < vocab; ++j) row[static_cast<size_t>(j)] = lrow[j];
      kernels::log_softmax_row(row.data(), logp.data(), vocab);
      nll -= logp[static_cast<size_t>(r.target[t])];
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

// Decoder-only convenience over raw sequences.
inline double perplexity(const NamedCheckpoint& ckpt,
                         const std::vector<std::vector<int32_t>>& sequences) {
  std::vector<DataRecord> records;
  records.reserve(sequences.size());
  for (const auto& s : sequences) records.push_back(causal_record(s));
  return perplexity(ckpt, records);
}

// ---------------------------------------------------------------------------
// Frozen linear probe: softmax regression on the hidden state of the last
// token (encoder side for encoder-decoder models), trained over a small
// learning-rate x batch-size grid and selected by validation accuracy.

struct ProbeExample {
  std::vector<int32_t> tokens;
  int32_t label = 0;
};

struct ProbeCell {
  double lr = 0.0;
  int64_t batch_size = 0;
  double val_accuracy = 0.0;
};

struct ProbeResult {
  double val_accuracy = 0.0;
  double train_accuracy = 0.0;
  double lr = 0.0;
  int64_t batch_size = 0;
  std::vector<ProbeCell> grid;
};

// Hidden state of the last token with a trailing 1 for the bias, frozen.
inline std::vector<float> probe_features(const NamedCheckpoint& ckpt,
                                         const std::vector<int32_t>& tokens) {
  Tape<float> tp;
  const auto b = edsg::bind(tp, ckpt, false);
  const Tensor<float> hidden =
      ckpt.meta.arch == Arch::EncoderDecoder
          ? tp.value(encoder_hidden(tp, b, tokens))
          : tp.value(decoder_only_hidden(tp, b, tokens));
  const int64_t d = hidden.shape[1];
  std::vector<float> f(static_cast<size_t>(d) + 1);
  std::copy_n(&hidden.data[static_cast<size_t>((hidden.shape[0] - 1) * d)], d, f.data());
  f.back() = 1.0f;
  return f;
}

namespace detail {

inline double head_accuracy(const Tensor<float>& feats, const std::vector<int32_t>& labels,
                            const Tensor<float>& head) {
  const int64_t n = feats.shape[0], d = feats.shape[1], c = head.shape[1];
  Tensor<float> logits = Tensor<float>::zeros({n, c});
  kernels::matmul_acc(feats.data.data(), head.data.data(), logits.data.data(), n, d, c);
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (argmax_token(&logits.data[static_cast<size_t>(i * c)], c) == labels[static_cast<size_t>(i)]) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace detail

inline ProbeResult finetune_classifier(const NamedCheckpoint& ckpt,
                                       const std::vector<ProbeExample>& train,
                                       const std::vector<ProbeExample>& val, int32_t num_classes,
                                       uint64_t seed = 0, int64_t epochs = 30,
                                       const std::vector<double>& lrs = {0.1, 0.02},
                                       const std::vector<int64_t>& batch_sizes = {8, 32}) {
  if (num_classes < 2) throw ConfigError(cat("probe needs >= 2 classes, got ", num_classes));
  if (train.empty() || val.empty()) throw InputError("probe needs non-empty train and val sets");
  if (lrs.empty() || batch_sizes.empty()) throw ConfigError("probe grid must not be empty");
  if (epochs < 1) throw ConfigError("probe needs >= 1 epoch");
  for (const auto& set : {&train, &val}) {
    for (const auto& ex : *set) {
      if (ex.label < 0 || ex.label >= num_classes) {
        throw InputError(cat("probe label ", ex.label, " outside [0, ", num_classes, ")"));
      }
    }
  }

  // Features once, reused across the whole grid.
  auto featurize = [&](const std::vector<ProbeExample>& set, std::vector<int32_t>& labels) {
    const auto first = probe_features(ckpt, set[0].tokens);
    Tensor<float> out = Tensor<float>::zeros({static_cast<int64_t>(set.size()),
                                              static_cast<int64_t>(first.size())});
    labels.resize(set.size());
    for (size_t i = 0; i < set.size(); ++i) {
      const auto f = i == 0 ? first : probe_features(ckpt, set[i].tokens);
      std::copy(f.begin(), f.end(), &out.data[i * f.size()]);
      labels[i] = set[i].label;
    }
    return out;
  };
  std::vector<int32_t> train_labels, val_labels;
  const Tensor<float> x_train = featurize(train, train_labels);
  const Tensor<float> x_val = featurize(val, val_labels);
  const int64_t feat_dim = x_train.shape[1];

  ProbeResult result;
  result.val_accuracy = -1.0;
  for (double lr : lrs) {
    for (int64_t batch : batch_sizes) {
      if (!(lr > 0.0) || batch < 1) throw ConfigError("probe grid entries must be positive");
      // Plain softmax regression: AdamW without decay on one weight matrix.
      NamedCheckpoint head;
      head.tensors["head.w"] = Tensor<float>::zeros({feat_dim, num_classes});
      OptimizerState opt;
      opt.params.weight_decay = 0.0;
      std::vector<size_t> order(train.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      auto eng = make_engine(derive_seed(seed, fnv1a64(cat(lr, ":", batch))));
      for (int64_t e = 0; e < epochs; ++e) {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[eng() % i]);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
          const size_t stop = std::min(order.size(), start + static_cast<size_t>(batch));
          Tensor<float> xb = Tensor<float>::zeros({static_cast<int64_t>(stop - start), feat_dim});
          std::vector<int32_t> yb(stop - start);
          for (size_t i = start; i < stop; ++i) {
            std::copy_n(&x_train.data[order[i] * static_cast<size_t>(feat_dim)], feat_dim,
                        &xb.data[(i - start) * static_cast<size_t>(feat_dim)]);
            yb[i - start] = train_labels[order[i]];
          }
          Tape<float> tp;
          auto wv = tp.leaf(head.tensors["head.w"], true);
          auto loss = ce_loss(tp, tp.matmul(tp.constant(xb), wv), yb,
                              std::vector<float>(yb.size(), 1.0f));
          tp.backward(loss);
          std::map<std::string, Tensor<float>> grads;
          grads["head.w"] = tp.grad_of(wv);
          optimizer_apply(head, grads, opt, lr);
        }
      }
      const double acc = detail::head_accuracy(x_val, val_labels, head.tensors["head.w"]);
      result.grid.push_back({lr, batch, acc});
      if (acc > result.val_accuracy) {
        result.val_accuracy = acc;
        result.lr = lr;
        result.batch_size = batch;
        result.train_accuracy = detail::head_accuracy(x_train, train_labels, head.tensors["head.w"]);
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Closed-form flop estimates. Conventions (also in FlopsReport::notes):
// a multiply-accumulate counts as 2 flops; causal attention's score and
// mixing work counts L^2/2 positions, bidirectional counts L^2; norms,
// softmax, activations, and embedding gathers are excluded; output logits
// count only the output positions. Decoder-only models process
// input_len + output_len as one causal stream.

struct FlopsReport {
  int64_t encoder_attention = 0;
  int64_t encoder_ffn = 0;
  int64_t decoder_self_attention = 0;
  int64_t decoder_cross_attention = 0;
  int64_t decoder_ffn = 0;
  int64_t output_logits = 0;
  int64_t input_len = 0;
  int64_t output_len = 0;

  int64_t total() const {
    return encoder_attention + encoder_ffn + decoder_self_attention + decoder_cross_attention +
           decoder_ffn + output_logits;
  }
  static const char* notes() {
    return "mac=2 flops; causal attention scores/mix count L^2/2 positions, bidirectional L^2; "
           "norms, softmax, activations, embedding gathers excluded; logits on output positions "
           "only; decoder-only runs input+output as one causal stream";
  }
};

namespace detail {

// Self-attention flops for one stack of `layers` over length L.
inline int64_t self_attn_flops(const ModelConfig& c, int64_t len, bool causal) {
  const int64_t proj = 2 * len * c.d_model * (2 * c.q_width() + 2 * c.kv_width());
  // Scores and mixing each cost 2*d_head flops per (query, key) pair per head.
  const int64_t pairs = causal ? len * len / 2 : len * len;
  const int64_t quad = 2 * (2 * pairs * c.d_head * c.q_heads);
  return c.num_layers * (proj + quad);
}

inline int64_t ffn_flops(const ModelConfig& c, int64_t len) {
  return c.num_layers * 6 * len * c.d_model * c.d_ffn;
}

}  // namespace detail

inline FlopsReport estimate_flops(const Metadata& meta, int64_t input_len, int64_t output_len) {
  if (input_len < 0 || output_len < 1) {
    throw ConfigError(cat("flops estimate: need input_len >= 0 and output_len >= 1, got ",
                          input_len, " and ", output_len));
  }
  FlopsReport r;
  r.input_len = input_len;
  r.output_len = output_len;
  const ModelConfig& dec = meta.decoder;
  if (meta.arch == Arch::DecoderOnly) {
    const int64_t len = input_len + output_len;
    r.decoder_self_attention = detail::self_attn_flops(dec, len, true);
    r.decoder_ffn = detail::ffn_flops(dec, len);
  } else {
    if (input_len < 1) throw ConfigError("flops estimate: encoder-decoder needs input_len >= 1");
    const ModelConfig& enc = meta.encoder;
    r.encoder_attention = detail::self_attn_flops(enc, input_len, meta.encoder_causal);
    r.encoder_ffn = detail::ffn_flops(enc, input_len);
    r.decoder_self_attention = detail::self_attn_flops(dec, output_len, true);
    r.decoder_ffn = detail::ffn_flops(dec, output_len);
    // Cross attention: q/o on output rows, k/v on input rows, full grid.
    const int64_t proj_qo = 2 * output_len * dec.d_model * 2 * dec.q_width();
    const int64_t proj_kv = 2 * input_len * enc.d_model * 2 * dec.kv_width();
    const int64_t quad = 2 * (2 * output_len * input_len * dec.d_head * dec.q_heads);
    r.decoder_cross_attention = dec.num_layers * (proj_qo + proj_kv + quad);
  }
  r.output_logits = 2 * output_len * dec.d_model * dec.vocab_size;
  return r;
}

// ---------------------------------------------------------------------------
// Wall-clock decode latency. Warmup runs are mandatory and excluded from the
// statistics; the workload is one full greedy decode per iteration.

struct LatencyReport {
  double median_ms = 0.0;
  double p90_ms = 0.0;
  double tokens_per_second = 0.0;
  int64_t tokens_per_query = 0;
  int64_t iterations = 0;
  int64_t warmup = 0;
  bool used_cache = true;
};

inline LatencyReport measure_latency(const NamedCheckpoint& ckpt,
                                     const std::vector<int32_t>& input, int64_t max_new_tokens,
                                     int64_t iterations = 10, int64_t warmup = 2,
                                     bool use_cache = true) {
  if (warmup < 2) throw ConfigError(cat("latency: warmup must be >= 2, got ", warmup));
  if (iterations < 1) throw ConfigError(cat("latency: iterations must be >= 1, got ", iterations));
  std::vector<double> ms;
  ms.reserve(static_cast<size_t>(iterations));
  int64_t tokens = 0;
  for (int64_t i = 0; i < warmup + iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = greedy_decode(ckpt, input, max_new_tokens, use_cache);
    const auto t1 = std::chrono::steady_clock::now();
    tokens = static_cast<int64_t>(out.size());
    if (i >= warmup) {
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  }
  std::sort(ms.begin(), ms.end());
  LatencyReport r;
  const size_t n = ms.size();
  r.median_ms = (n % 2 == 1) ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  r.p90_ms = ms[std::min(n - 1, static_cast<size_t>(std::ceil(0.9 * static_cast<double>(n))) - 1)];
  r.tokens_per_query = tokens;
  r.tokens_per_second = r.median_ms > 0.0 ? 1000.0 * static_cast<double>(tokens) / r.median_ms : 0.0;
  r.iterations = iterations;
  r.warmup = warmup;
  r.used_cache = use_cache;
  return r;
}

}  // namespace edsg
