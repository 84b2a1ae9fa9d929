#pragma once

// Training machinery: masked cross-entropy and distillation losses recorded
// on the tape, AdamW with decoupled weight decay, warmup+cosine learning
// rates, global-norm gradient clipping, the cross-attention warmup freeze,
// and the end-to-end adaptation loop.

#include <cinttypes>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "edsg/checkpoint.hpp"
#include "edsg/datapipe.hpp"
#include "edsg/model.hpp"
#include "edsg/surgery.hpp"
#include "edsg/tape.hpp"

namespace edsg {

// ---------------------------------------------------------------------------
// Losses. Both take per-position labels and a 0/1 loss mask and reduce to the
// mean over unmasked positions, recorded on the tape so gradients flow to the
// logits.

namespace detail {

template <typename T>
void check_loss_args(const Tensor<T>& logits, const std::vector<int32_t>& labels,
                     const std::vector<float>& mask) {
  if (logits.rank() != 2) {
    throw ShapeError(cat("loss: logits must be rank 2, got ", shape_str(logits.shape)));
  }
  if (static_cast<int64_t>(labels.size()) != logits.shape[0] || labels.size() != mask.size()) {
    throw ShapeError(cat("loss: ", logits.shape[0], " logit rows vs ", labels.size(),
                         " labels vs ", mask.size(), " mask entries"));
  }
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= logits.shape[1]) {
      throw InputError(cat("loss: label ", labels[i], " at position ", i, " outside vocabulary of ",
                           logits.shape[1]));
    }
  }
}

inline double mask_total(const std::vector<float>& mask) {
  double total = 0.0;
  for (float m : mask) total += m;
  if (!(total > 0.0)) throw ContractError("loss: every position is masked out");
  return total;
}

}  // namespace detail

// Mean negative log-likelihood of `labels` under row-softmax of `logits`,
// averaged over positions with a nonzero mask.
template <typename T>
typename Tape<T>::Val ce_loss(Tape<T>& tp, typename Tape<T>::Val logits,
                              const std::vector<int32_t>& labels, const std::vector<float>& mask) {
  const Tensor<T>& lt = tp.value(logits);
  detail::check_loss_args(lt, labels, mask);
  const double total = detail::mask_total(mask);

  // sum(log_softmax(logits) * C) with C[t, label_t] = -mask_t / total is the
  // masked mean NLL in one reduction.
  Tensor<T> picker = Tensor<T>::zeros(lt.shape);
  for (size_t t = 0; t < labels.size(); ++t) {
    picker.at(static_cast<int64_t>(t), labels[t]) =
        static_cast<T>(-static_cast<double>(mask[t]) / total);
  }
  return tp.sum(tp.mul(tp.row_log_softmax(logits), tp.constant(picker)));
}

// Distillation: lambda * KL(teacher_renormalized || student)
//             + (1 - lambda) * ce_loss, averaged over unmasked positions.
// The teacher's top-k probabilities are renormalized to sum to 1 per position
// before the KL, so truncation never leaks probability mass.
template <typename T>
typename Tape<T>::Val kd_loss(Tape<T>& tp, typename Tape<T>::Val logits,
                              const std::vector<int32_t>& labels, const std::vector<float>& mask,
                              const TeacherTopK& teacher, double lambda) {
  if (!(lambda >= 0.0) || !(lambda <= 1.0)) {
    throw ConfigError(cat("kd_loss: lambda must lie in [0, 1], got ", lambda));
  }
  if (lambda == 0.0) return ce_loss(tp, logits, labels, mask);

  const Tensor<T>& lt = tp.value(logits);
  detail::check_loss_args(lt, labels, mask);
  const double total = detail::mask_total(mask);
  if (teacher.size() != labels.size()) {
    throw ContractError(cat("kd_loss: teacher covers ", teacher.size(), " positions but there are ",
                            labels.size()));
  }

  // KL = sum_t w_t sum_k phat log(phat) - sum_t w_t sum_k phat log p_student.
  // The first term is constant in the student; the second is one masked
  // reduction against the student's log-softmax.
  Tensor<T> weights = Tensor<T>::zeros(lt.shape);
  double entropy_part = 0.0;
  for (size_t t = 0; t < labels.size(); ++t) {
    if (mask[t] == 0.0f) continue;
    if (teacher[t].empty()) {
      throw ContractError(cat("kd_loss: unmasked position ", t, " has no teacher entries"));
    }
    const double w = static_cast<double>(mask[t]) / total;
    double z = 0.0;
    for (const auto& [id, p] : teacher[t]) {
      if (id < 0 || id >= lt.shape[1]) {
        throw InputError(cat("kd_loss: teacher token ", id, " outside vocabulary of ", lt.shape[1]));
      }
      if (!(p >= 0.0f)) throw InputError(cat("kd_loss: negative teacher probability at ", t));
      z += static_cast<double>(p);
    }
    if (!(z > 0.0)) throw InputError(cat("kd_loss: teacher mass at position ", t, " is zero"));
    for (const auto& [id, p] : teacher[t]) {
      const double phat = static_cast<double>(p) / z;
      if (phat > 0.0) {
        entropy_part += w * phat * std::log(phat);
        weights.at(static_cast<int64_t>(t), id) += static_cast<T>(w * phat);
      }
    }
  }
  auto cross = tp.sum(tp.mul(tp.row_log_softmax(logits), tp.constant(weights)));
  auto kl = tp.add(tp.constant(Tensor<T>::scalar(static_cast<T>(entropy_part))),
                   tp.scale(cross, static_cast<T>(-1.0)));
  if (lambda == 1.0) return kl;
  return tp.add(tp.scale(kl, static_cast<T>(lambda)),
                tp.scale(ce_loss(tp, logits, labels, mask), static_cast<T>(1.0 - lambda)));
}

// ---------------------------------------------------------------------------
// Learning-rate schedule and the run plan.

struct TrainSchedule {
  int64_t total_steps = 0;
  double lr_peak = 3e-4;
  // Linear warmup length; -1 means 1% of total_steps (minimum 1).
  int64_t lr_warmup_steps = -1;
  // Cosine decays from the peak to this fraction of it by the final step.
  double lr_final_fraction = 0.1;
  double grad_clip_norm = 1.0;
  // While step < freeze_xattn_steps, only cross-attention tensors train.
  int64_t freeze_xattn_steps = 0;

  // Distillation mix; 0 disables the teacher term entirely.
  double kd_lambda = 0.0;
  int32_t kd_top_k = 16;

  int64_t batch_size = 8;
  int64_t max_input_len = 512;
  int64_t max_target_len = 512;
  uint64_t seed = 0;

  // causal (decoder-only next-token), prefixlm, or ul2. When
  // second_objective is set, training switches to it at
  // stage_switch_fraction * total_steps.
  std::string objective = "prefixlm";
  std::string second_objective;
  double stage_switch_fraction = 0.0;

  int64_t metrics_every = 10;

  int64_t warmup() const {
    if (lr_warmup_steps >= 0) return lr_warmup_steps;
    return std::max<int64_t>(1, total_steps / 100);
  }

  void validate() const {
    if (total_steps < 1) throw ConfigError(cat("total_steps must be >= 1, got ", total_steps));
    if (!(lr_peak > 0.0)) throw ConfigError(cat("lr_peak must be positive, got ", lr_peak));
    if (!(lr_final_fraction >= 0.0) || !(lr_final_fraction <= 1.0)) {
      throw ConfigError(cat("lr_final_fraction must lie in [0, 1], got ", lr_final_fraction));
    }
    if (!(grad_clip_norm > 0.0)) {
      throw ConfigError(cat("grad_clip_norm must be positive, got ", grad_clip_norm));
    }
    if (freeze_xattn_steps < 0) {
      throw ConfigError(cat("freeze_xattn_steps must be >= 0, got ", freeze_xattn_steps));
    }
    if (!(kd_lambda >= 0.0) || !(kd_lambda <= 1.0)) {
      throw ConfigError(cat("kd_lambda must lie in [0, 1], got ", kd_lambda));
    }
    if (kd_top_k < 1) throw ConfigError(cat("kd_top_k must be >= 1, got ", kd_top_k));
    if (batch_size < 1) throw ConfigError(cat("batch_size must be >= 1, got ", batch_size));
    if (max_input_len < 1 || max_target_len < 1) {
      throw ConfigError("sequence length caps must be >= 1");
    }
    if (warmup() > total_steps) {
      throw ConfigError(cat("warmup of ", warmup(), " steps exceeds total_steps ", total_steps));
    }
    auto known = [](const std::string& o) { return o == "causal" || o == "prefixlm" || o == "ul2"; };
    if (!known(objective)) throw ConfigError(cat("unknown objective '", objective, "'"));
    if (!second_objective.empty()) {
      if (!known(second_objective)) {
        throw ConfigError(cat("unknown objective '", second_objective, "'"));
      }
      if (!(stage_switch_fraction > 0.0) || !(stage_switch_fraction < 1.0)) {
        throw ConfigError(cat("stage_switch_fraction must lie in (0, 1) with a second objective, got ",
                              stage_switch_fraction));
      }
    }
    if (metrics_every < 1) throw ConfigError("metrics_every must be >= 1");
  }
};

// Linear warmup to the peak, then cosine decay to lr_final_fraction * peak at
// the last step. Steps past the end stay at the floor.
inline double lr_at(const TrainSchedule& s, int64_t step) {
  const int64_t w = s.warmup();
  const double floor = s.lr_peak * s.lr_final_fraction;
  if (step < w) return s.lr_peak * static_cast<double>(step + 1) / static_cast<double>(w);
  if (step >= s.total_steps) return floor;
  if (s.total_steps == w) return s.lr_peak;
  const double progress =
      static_cast<double>(step - w) / static_cast<double>(s.total_steps - w);
  return floor + (s.lr_peak - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay applied to matrices only (embeddings and
// projections decay; norm gains do not).

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct OptimizerState {
  AdamWParams params;
  int64_t step = 0;  // completed optimizer steps; drives bias correction
  std::map<std::string, std::vector<float>> m, v;
};

// Applies one AdamW update for every tensor present in `grads`. Tensors
// absent from the map (frozen this step) keep their values and moments.
inline void optimizer_apply(NamedCheckpoint& ckpt, const std::map<std::string, Tensor<float>>& grads,
                            OptimizerState& opt, double lr) {
  opt.step += 1;
  const auto& p = opt.params;
  const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(opt.step));
  for (const auto& [name, grad] : grads) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw ContractError(cat("optimizer_apply: gradient for unknown tensor ", name));
    }
    Tensor<float>& theta = it->second;
    if (!same_shape(theta.shape, grad.shape)) {
      throw ShapeError(cat("optimizer_apply: ", name, " is ", shape_str(theta.shape),
                           " but its gradient is ", shape_str(grad.shape)));
    }
    auto& m = opt.m[name];
    auto& v = opt.v[name];
    if (m.empty()) m.assign(theta.data.size(), 0.0f);
    if (v.empty()) v.assign(theta.data.size(), 0.0f);
    const bool decay = theta.rank() == 2;
    for (size_t i = 0; i < theta.data.size(); ++i) {
      const double g = static_cast<double>(grad.data[i]);
      const double mi = p.beta1 * static_cast<double>(m[i]) + (1.0 - p.beta1) * g;
      const double vi = p.beta2 * static_cast<double>(v[i]) + (1.0 - p.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + p.eps);
      if (decay) update += p.weight_decay * static_cast<double>(theta.data[i]);
      theta.data[i] = static_cast<float>(static_cast<double>(theta.data[i]) - lr * update);
    }
  }
}

// Scales the gradient set so its global norm is at most max_norm. Returns the
// pre-clip norm.
inline double clip_global_norm(std::map<std::string, Tensor<float>>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError(cat("clip norm must be positive, got ", max_norm));
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (float gv : g.data) sq += static_cast<double>(gv) * static_cast<double>(gv);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericsError("gradient norm is not finite");
  if (norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& [name, g] : grads) {
      for (auto& gv : g.data) gv *= scale;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// One optimization step over a packed batch.

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;  // global norm before clipping
  double lr = 0.0;
  int64_t target_tokens = 0;
  bool xattn_only = false;  // true while the warmup freeze is active
};

namespace detail {

// Per-example forward producing logits over the real (unpadded) target rows,
// plus the aligned labels and mask.
template <typename T>
typename Tape<T>::Val example_logits(Tape<T>& tp, const Bound<T>& b, const PackedExample& ex,
                                     std::vector<int32_t>& labels, std::vector<float>& mask) {
  labels.assign(ex.target.begin(), ex.target.begin() + static_cast<ptrdiff_t>(ex.target_len));
  mask.assign(ex.loss_mask.begin(), ex.loss_mask.begin() + static_cast<ptrdiff_t>(ex.target_len));
  std::vector<int32_t> dec_in;
  dec_in.reserve(static_cast<size_t>(ex.target_len));
  dec_in.push_back(Vocab::kBos);
  dec_in.insert(dec_in.end(), labels.begin(), labels.end() - 1);
  if (ex.mode == 4) {
    if (b.meta.arch != Arch::DecoderOnly) {
      throw ConfigError("causal records require a decoder-only model");
    }
    return decoder_only_forward(tp, b, dec_in);
  }
  if (b.meta.arch != Arch::EncoderDecoder) {
    throw ConfigError("prefix and denoising records require an encoder-decoder model");
  }
  if (ex.input_len < 1) throw InputError("encoder-decoder record has an empty input");
  const std::vector<int32_t> enc_in(ex.input.begin(),
                                    ex.input.begin() + static_cast<ptrdiff_t>(ex.input_len));
  return encdec_forward(tp, b, enc_in, dec_in);
}

}  // namespace detail

// Runs forward/backward over each example, averages the masked loss across
// the batch, clips the global gradient norm, and applies AdamW. While
// step < freeze_xattn_steps only cross-attention tensors receive updates.
inline StepStats train_step(NamedCheckpoint& ckpt, const Batch& batch, OptimizerState& opt,
                            const TrainSchedule& sched, int64_t step) {
  if (batch.items.empty()) throw ContractError("train_step: empty batch");
  const bool freeze = step < sched.freeze_xattn_steps;
  if (freeze && ckpt.meta.arch != Arch::EncoderDecoder) {
    throw ConfigError("freeze_xattn_steps applies only to encoder-decoder checkpoints");
  }
  std::function<bool(const std::string&)> filter;
  if (freeze) filter = is_cross_attention_tensor;

  // Weight each example by its share of the batch's unmasked target tokens so
  // the batch loss is the mean over all unmasked positions.
  double total_mask = 0.0;
  for (const auto& ex : batch.items) {
    for (int64_t t = 0; t < ex.target_len; ++t) total_mask += ex.loss_mask[static_cast<size_t>(t)];
  }
  if (!(total_mask > 0.0)) throw ContractError("train_step: batch has no unmasked target tokens");

  std::map<std::string, Tensor<float>> grads;
  double loss = 0.0;
  for (const auto& ex : batch.items) {
    Tape<float> tp;
    const auto b = edsg::bind(tp, ckpt, true, filter);
    std::vector<int32_t> labels;
    std::vector<float> mask;
    const auto logits = detail::example_logits(tp, b, ex, labels, mask);
    double ex_mask = 0.0;
    for (float mv : mask) ex_mask += mv;
    if (ex_mask == 0.0) continue;
    typename Tape<float>::Val ex_loss =
        sched.kd_lambda > 0.0 ? kd_loss(tp, logits, labels, mask, ex.teacher_topk, sched.kd_lambda)
                              : ce_loss(tp, logits, labels, mask);
    const auto scaled = tp.scale(ex_loss, static_cast<float>(ex_mask / total_mask));
    tp.backward(scaled);
    loss += static_cast<double>(tp.value(scaled).data[0]);
    for (const auto& [name, val] : b.p) {
      if (filter && !filter(name)) continue;
      auto g = tp.grad_of(val);
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, std::move(g));
      } else {
        for (size_t i = 0; i < it->second.data.size(); ++i) it->second.data[i] += g.data[i];
      }
    }
  }
  if (!std::isfinite(loss)) {
    throw NumericsError(cat("train_step: non-finite loss ", loss, " at step ", step));
  }
  double grad_norm = 0.0;
  try {
    grad_norm = clip_global_norm(grads, sched.grad_clip_norm);
  } catch (const NumericsError&) {
    throw NumericsError(cat("train_step: non-finite gradient norm at step ", step));
  }

  StepStats stats;
  stats.loss = loss;
  stats.grad_norm = grad_norm;
  stats.lr = lr_at(sched, step);
  stats.target_tokens = batch.real_target_tokens;
  stats.xattn_only = freeze;
  optimizer_apply(ckpt, grads, opt, stats.lr);
  return stats;
}

// ---------------------------------------------------------------------------
// Adaptation loop: seeded epoch shuffling, per-stage objectives, optional
// teacher sidecars, and a metrics trail.

struct TrainMetrics {
  int64_t step = 0;
  std::string objective;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  int64_t target_tokens_seen = 0;
  int64_t epoch = 0;
  bool xattn_frozen = false;
};

// One tab-separated line per record; stable field order for downstream tools.
inline std::string metrics_header() {
  return "step\tobjective\tloss\tlr\tgrad_norm\ttarget_tokens_seen\tepoch\txattn_frozen";
}

inline std::string metrics_line(const TrainMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%" PRId64 "\t%s\t%.6g\t%.6g\t%.6g\t%" PRId64 "\t%" PRId64 "\t%d",
                m.step, m.objective.c_str(), m.loss, m.lr, m.grad_norm, m.target_tokens_seen,
                m.epoch, m.xattn_frozen ? 1 : 0);
  return buf;
}

struct AdaptationRun {
  std::vector<TrainMetrics> history;
  int64_t epochs_completed = 0;
  int64_t span_cap_events = 0;
  double final_loss = 0.0;
};

inline AdaptationRun run_adaptation(NamedCheckpoint& ckpt,
                                    const std::vector<std::vector<int32_t>>& corpus,
                                    const TrainSchedule& sched,
                                    const NamedCheckpoint* teacher = nullptr,
                                    const std::function<void(const TrainMetrics&)>& sink = {}) {
  sched.validate();
  if (sched.kd_lambda > 0.0 && teacher == nullptr) {
    throw ConfigError("kd_lambda > 0 requires a teacher checkpoint");
  }

  // Every objective can consume a length-4 sequence (the span-corruption
  // minimum); shorter ones are dropped up front.
  std::vector<size_t> usable;
  for (size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].size() >= 4) usable.push_back(i);
  }
  if (usable.empty()) throw InputError("corpus has no sequences of 4 or more tokens");

  UL2Mixture mixture = UL2Mixture::uniform_default(derive_seed(sched.seed, 0x012e));
  OptimizerState opt;
  AdaptationRun run;

  std::vector<size_t> order = usable;
  auto reshuffle = [&](int64_t epoch) {
    auto eng = make_engine(derive_seed(sched.seed, 0xe90c, static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[eng() % i]);
    }
  };
  reshuffle(0);
  size_t cursor = 0;
  int64_t epoch = 0;
  uint64_t example_counter = 0;
  int64_t tokens_seen = 0;
  const int64_t switch_at =
      sched.second_objective.empty()
          ? sched.total_steps
          : static_cast<int64_t>(sched.stage_switch_fraction * static_cast<double>(sched.total_steps));

  for (int64_t step = 0; step < sched.total_steps; ++step) {
    const std::string& objective =
        (step >= switch_at && !sched.second_objective.empty()) ? sched.second_objective
                                                               : sched.objective;
    std::vector<DataRecord> records;
    records.reserve(static_cast<size_t>(sched.batch_size));
    while (static_cast<int64_t>(records.size()) < sched.batch_size) {
      if (cursor == order.size()) {
        cursor = 0;
        ++epoch;
        reshuffle(epoch);
      }
      const auto& seq = corpus[order[cursor++]];
      if (objective == "causal") {
        records.push_back(causal_record(seq));
      } else if (objective == "prefixlm") {
        records.push_back(to_record(prefixlm_split(seq)));
      } else {
        records.push_back(to_record(mixture.apply(seq, example_counter)));
      }
      ++example_counter;
      if (sched.kd_lambda > 0.0) {
        teacher_record(*teacher, records.back(), sched.kd_top_k);
      }
    }
    auto batches =
        pack_batches(records, sched.batch_size, sched.max_input_len, sched.max_target_len);
    const auto stats = train_step(ckpt, batches[0], opt, sched, step);
    tokens_seen += stats.target_tokens;
    run.final_loss = stats.loss;

    if (step % sched.metrics_every == 0 || step == sched.total_steps - 1) {
      TrainMetrics m;
      m.step = step;
      m.objective = objective;
      m.loss = stats.loss;
      m.lr = stats.lr;
      m.grad_norm = stats.grad_norm;
      m.target_tokens_seen = tokens_seen;
      m.epoch = epoch;
      m.xattn_frozen = stats.xattn_only;
      run.history.push_back(m);
      if (sink) sink(m);
    }
  }
  run.epochs_completed = epoch;
  run.span_cap_events = mixture.span_cap_events();
  ckpt.meta.train_steps += sched.total_steps;
  if (!sched.objective.empty()) {
    ckpt.meta.objective = sched.second_objective.empty() ? sched.objective
                                                         : sched.second_objective;
  }
  return run;
}

}  // namespace edsg
