#pragma once

// Run configuration files: one JSON document naming the model (preset or
// explicit dimensions), the training schedule, data paths, seeds and the
// output directory. Parsing is strict: unknown keys are rejected at every
// level, every field is validated before any compute starts, and the parsed
// form round-trips back to JSON for the reproducibility record.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "edsg/checkpoint.hpp"
#include "edsg/trainer.hpp"

namespace edsg {

struct RunConfig {
  // Exactly one of preset / explicit model may be set; both may be absent
  // when `init` names a checkpoint that already carries its configuration.
  std::string preset;
  bool has_model = false;
  ModelConfig model;

  std::string init;     // checkpoint to continue from (optional)
  std::string teacher;  // teacher checkpoint for distillation (optional)
  std::string corpus;   // training text, one document per line
  std::string output_dir;
  TrainSchedule schedule;
  // Whether the file spelled out freeze_xattn_steps, as opposed to leaving
  // the default. An absent key lets a checkpoint's stored warmup take over.
  bool schedule_sets_freeze = false;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError(cat("run config: unknown key '", key, "' in ", where));
    }
  }
}

template <typename T>
T config_field(const nlohmann::json& obj, const std::string& key, const T& fallback,
               const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(cat("run config: bad value for '", key, "' in ", where, ": ", e.what()));
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(cat("run config is not valid JSON: ", e.what()));
  }
  if (!j.is_object()) throw ConfigError("run config: top level must be an object");
  detail::reject_unknown_keys(
      j, {"model", "init", "teacher", "data", "schedule", "output_dir"}, "top level");

  RunConfig rc;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (!m.is_object()) throw ConfigError("run config: 'model' must be an object");
    if (m.contains("preset")) {
      detail::reject_unknown_keys(m, {"preset"}, "model");
      rc.preset = detail::config_field<std::string>(m, "preset", "", "model");
      preset(rc.preset);  // throws ConfigError for unknown names
    } else {
      detail::reject_unknown_keys(m,
                                  {"num_layers", "d_model", "d_ffn", "q_heads", "kv_heads",
                                   "d_head", "vocab_size", "rope_base", "max_seq"},
                                  "model");
      rc.has_model = true;
      rc.model.num_layers = detail::config_field<int64_t>(m, "num_layers", 0, "model");
      rc.model.d_model = detail::config_field<int64_t>(m, "d_model", 0, "model");
      rc.model.d_ffn = detail::config_field<int64_t>(m, "d_ffn", 0, "model");
      rc.model.q_heads = detail::config_field<int64_t>(m, "q_heads", 0, "model");
      rc.model.kv_heads = detail::config_field<int64_t>(m, "kv_heads", 0, "model");
      rc.model.d_head = detail::config_field<int64_t>(m, "d_head", 0, "model");
      rc.model.vocab_size =
          detail::config_field<int64_t>(m, "vocab_size", rc.model.vocab_size, "model");
      rc.model.rope_base = detail::config_field<double>(m, "rope_base", rc.model.rope_base, "model");
      rc.model.max_seq = detail::config_field<int64_t>(m, "max_seq", rc.model.max_seq, "model");
      rc.model.validate();
    }
  }

  rc.init = detail::config_field<std::string>(j, "init", "", "top level");
  rc.teacher = detail::config_field<std::string>(j, "teacher", "", "top level");
  rc.output_dir = detail::config_field<std::string>(j, "output_dir", "", "top level");

  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (!d.is_object()) throw ConfigError("run config: 'data' must be an object");
    detail::reject_unknown_keys(d, {"corpus"}, "data");
    rc.corpus = detail::config_field<std::string>(d, "corpus", "", "data");
  }

  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    if (!s.is_object()) throw ConfigError("run config: 'schedule' must be an object");
    detail::reject_unknown_keys(s,
                                {"total_steps", "lr_peak", "lr_warmup_steps", "lr_final_fraction",
                                 "grad_clip_norm", "freeze_xattn_steps", "kd_lambda", "kd_top_k",
                                 "batch_size", "max_input_len", "max_target_len", "seed",
                                 "objective", "second_objective", "stage_switch_fraction",
                                 "metrics_every"},
                                "schedule");
    TrainSchedule& ts = rc.schedule;
    ts.total_steps = detail::config_field<int64_t>(s, "total_steps", ts.total_steps, "schedule");
    ts.lr_peak = detail::config_field<double>(s, "lr_peak", ts.lr_peak, "schedule");
    ts.lr_warmup_steps =
        detail::config_field<int64_t>(s, "lr_warmup_steps", ts.lr_warmup_steps, "schedule");
    ts.lr_final_fraction =
        detail::config_field<double>(s, "lr_final_fraction", ts.lr_final_fraction, "schedule");
    ts.grad_clip_norm =
        detail::config_field<double>(s, "grad_clip_norm", ts.grad_clip_norm, "schedule");
    ts.freeze_xattn_steps =
        detail::config_field<int64_t>(s, "freeze_xattn_steps", ts.freeze_xattn_steps, "schedule");
    rc.schedule_sets_freeze = s.contains("freeze_xattn_steps");
    ts.kd_lambda = detail::config_field<double>(s, "kd_lambda", ts.kd_lambda, "schedule");
    ts.kd_top_k = detail::config_field<int32_t>(s, "kd_top_k", ts.kd_top_k, "schedule");
    ts.batch_size = detail::config_field<int64_t>(s, "batch_size", ts.batch_size, "schedule");
    ts.max_input_len =
        detail::config_field<int64_t>(s, "max_input_len", ts.max_input_len, "schedule");
    ts.max_target_len =
        detail::config_field<int64_t>(s, "max_target_len", ts.max_target_len, "schedule");
    ts.seed = detail::config_field<uint64_t>(s, "seed", ts.seed, "schedule");
    ts.objective = detail::config_field<std::string>(s, "objective", ts.objective, "schedule");
    ts.second_objective =
        detail::config_field<std::string>(s, "second_objective", ts.second_objective, "schedule");
    ts.stage_switch_fraction = detail::config_field<double>(s, "stage_switch_fraction",
                                                            ts.stage_switch_fraction, "schedule");
    ts.metrics_every =
        detail::config_field<int64_t>(s, "metrics_every", ts.metrics_every, "schedule");
  }

  if (!rc.preset.empty() && rc.has_model) {
    throw ConfigError("run config: give either a preset or explicit model dimensions, not both");
  }
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError(cat("cannot open run config ", path));
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

// Canonical JSON form, embedded verbatim in reproducibility records.
inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  nlohmann::json j;
  if (!rc.preset.empty()) {
    j["model"] = {{"preset", rc.preset}};
  } else if (rc.has_model) {
    j["model"] = {{"num_layers", rc.model.num_layers}, {"d_model", rc.model.d_model},
                  {"d_ffn", rc.model.d_ffn},           {"q_heads", rc.model.q_heads},
                  {"kv_heads", rc.model.kv_heads},     {"d_head", rc.model.d_head},
                  {"vocab_size", rc.model.vocab_size}, {"rope_base", rc.model.rope_base},
                  {"max_seq", rc.model.max_seq}};
  }
  if (!rc.init.empty()) j["init"] = rc.init;
  if (!rc.teacher.empty()) j["teacher"] = rc.teacher;
  if (!rc.corpus.empty()) j["data"] = {{"corpus", rc.corpus}};
  if (!rc.output_dir.empty()) j["output_dir"] = rc.output_dir;
  const TrainSchedule& ts = rc.schedule;
  j["schedule"] = {{"total_steps", ts.total_steps},
                   {"lr_peak", ts.lr_peak},
                   {"lr_warmup_steps", ts.lr_warmup_steps},
                   {"lr_final_fraction", ts.lr_final_fraction},
                   {"grad_clip_norm", ts.grad_clip_norm},
                   {"freeze_xattn_steps", ts.freeze_xattn_steps},
                   {"kd_lambda", ts.kd_lambda},
                   {"kd_top_k", ts.kd_top_k},
                   {"batch_size", ts.batch_size},
                   {"max_input_len", ts.max_input_len},
                   {"max_target_len", ts.max_target_len},
                   {"seed", ts.seed},
                   {"objective", ts.objective},
                   {"second_objective", ts.second_objective},
                   {"stage_switch_fraction", ts.stage_switch_fraction},
                   {"metrics_every", ts.metrics_every}};
  return j;
}

}  // namespace edsg
