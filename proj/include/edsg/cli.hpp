#pragma once

// Command-line front end. Eleven subcommands cover the whole pipeline:
// pretraining a decoder, surgically adapting it into an encoder-decoder,
// training, evaluation, probing, flop and latency reports, checkpoint
// merging, GQA-to-MHA expansion, inspection, and dataset preparation.
//
// Exit codes: 0 success, 1 runtime failure (with a diagnostic on stderr),
// 2 invalid command line (with usage text). Every artifact-producing run
// writes a reproducibility record (full config, seeds, input content hashes)
// next to its outputs; report commands embed the same record in their JSON.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "edsg/datapipe.hpp"
#include "edsg/evalbench.hpp"
#include "edsg/runconfig.hpp"
#include "edsg/serialize.hpp"
#include "edsg/surgery.hpp"
#include "edsg/trainer.hpp"

namespace edsg {
namespace cli_detail {

// Command-line shape problems that CLI11's declarative checks cannot express
// (mutually exclusive options, task-dependent requirements). Exit code 2,
// like any other bad invocation.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string hex64(uint64_t x) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

inline uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError(cat("cannot open ", path, " for hashing"));
  std::ostringstream ss;
  ss << is.rdbuf();
  return fnv1a64(ss.str());
}

// Model text is raw bytes and may not be valid UTF-8; replace on dump.
inline std::string dump_json(const nlohmann::json& j) {
  return j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace);
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw InputError(cat("cannot open ", path, " for writing"));
  os << dump_json(j) << "\n";
  if (!os) throw InputError(cat("write to ", path, " failed"));
}

inline nlohmann::json make_record(const std::string& command, const nlohmann::json& config,
                                  const nlohmann::json& inputs, const nlohmann::json& outputs) {
  return {{"record_version", 1},
          {"command", command},
          {"config", config},
          {"inputs", inputs},
          {"outputs", outputs}};
}

// The 2B and 9B presets exist for accounting; training a model with their
// dimensions needs an explicit override flag.
inline bool is_guarded_config(const ModelConfig& c) {
  for (const char* name : {"2B", "9B"}) {
    const ModelConfig g = preset(name);
    if (c.num_layers == g.num_layers && c.d_model == g.d_model && c.d_ffn == g.d_ffn &&
        c.q_heads == g.q_heads && c.kv_heads == g.kv_heads && c.d_head == g.d_head) {
      return true;
    }
  }
  return false;
}

inline void check_trainable_size(const Metadata& meta, bool override_flag,
                                 const std::string& command) {
  const bool guarded = is_guarded_config(meta.decoder) ||
                       (meta.arch == Arch::EncoderDecoder && is_guarded_config(meta.encoder));
  if (guarded && !override_flag) {
    throw ConfigError(cat(command, ": this model has 2B/9B-preset dimensions, which exist for "
                                   "accounting; pass --i-know-this-is-huge to train it anyway"));
  }
}

// "B" -> decoder-only metadata; "B-S" -> encoder-decoder pairing.
inline Metadata preset_metadata(const std::string& name) {
  Metadata m;
  const size_t dash = name.find('-');
  if (dash == std::string::npos) {
    m.arch = Arch::DecoderOnly;
    m.decoder = preset(name);
  } else {
    m.arch = Arch::EncoderDecoder;
    m.encoder = preset(name.substr(0, dash));
    m.decoder = preset(name.substr(dash + 1));
    m.shared_embedding = m.encoder.d_model == m.decoder.d_model;
  }
  return m;
}

inline nlohmann::json config_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"d_model", c.d_model},   {"d_ffn", c.d_ffn},
          {"q_heads", c.q_heads},       {"kv_heads", c.kv_heads}, {"d_head", c.d_head},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}};
}

// Probe set files: one example per line, "label<TAB>text".
inline std::vector<ProbeExample> read_probe_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError(cat("cannot open probe file ", path));
  std::vector<ProbeExample> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw InputError(cat(path, ":", lineno, ": expected 'label<TAB>text'"));
    }
    ProbeExample ex;
    try {
      size_t used = 0;
      ex.label = std::stoi(line.substr(0, tab), &used);
      if (used != tab) throw std::invalid_argument("trailing junk");
    } catch (const std::exception&) {
      throw InputError(cat(path, ":", lineno, ": label is not an integer"));
    }
    ex.tokens = Vocab::encode(line.substr(tab + 1));
    if (ex.tokens.empty()) throw InputError(cat(path, ":", lineno, ": empty text"));
    out.push_back(std::move(ex));
  }
  return out;
}

// Shared trainer driver for pretrain-decoder and train. Writes the model,
// a metrics trail, and the reproducibility record into output_dir.
inline void run_training_command(const std::string& command, const std::string& config_path,
                                 NamedCheckpoint& ckpt, const RunConfig& rc,
                                 nlohmann::json inputs) {
  if (rc.corpus.empty()) throw ConfigError(cat(command, ": config must set data.corpus"));
  if (rc.output_dir.empty()) throw ConfigError(cat(command, ": config must set output_dir"));
  inputs["config"] = hex64(file_hash(config_path));
  inputs["corpus"] = hex64(file_hash(rc.corpus));

  TrainSchedule sched = rc.schedule;
  if (!rc.schedule_sets_freeze && ckpt.meta.warmup_steps_k > 0) {
    sched.freeze_xattn_steps = ckpt.meta.warmup_steps_k;
  }

  NamedCheckpoint teacher;
  const NamedCheckpoint* teacher_ptr = nullptr;
  if (!rc.teacher.empty()) {
    teacher = load_checkpoint(rc.teacher);
    inputs["teacher"] = hex64(checkpoint_content_hash(teacher));
    teacher_ptr = &teacher;
  }

  const auto corpus = read_text_corpus(rc.corpus);
  std::filesystem::create_directories(rc.output_dir);
  const std::string metrics_path = rc.output_dir + "/metrics.tsv";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw InputError(cat("cannot open ", metrics_path, " for writing"));
  metrics << metrics_header() << "\n";
  const auto sink = [&metrics](const TrainMetrics& m) { metrics << metrics_line(m) << "\n"; };

  const AdaptationRun run = run_adaptation(ckpt, corpus, sched, teacher_ptr, sink);
  metrics.flush();

  const std::string model_path = rc.output_dir + "/model.edsg";
  save_checkpoint(ckpt, model_path);

  nlohmann::json outputs = {{"checkpoint", model_path},
                            {"checkpoint_hash", hex64(checkpoint_content_hash(ckpt))},
                            {"metrics", metrics_path},
                            {"final_loss", run.final_loss},
                            {"steps", sched.total_steps},
                            {"epochs_completed", run.epochs_completed},
                            {"span_cap_events", run.span_cap_events}};
  nlohmann::json cfg = run_config_to_json(rc);
  cfg["schedule"]["freeze_xattn_steps"] = sched.freeze_xattn_steps;  // effective value
  write_json_file(rc.output_dir + "/run.json", make_record(command, cfg, inputs, outputs));
  std::cout << dump_json(outputs) << "\n";
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv) {
  using cli_detail::dump_json;
  using cli_detail::hex64;
  using cli_detail::make_record;
  using nlohmann::json;

  CLI::App app{"Decoder-to-encoder-decoder adaptation toolkit"};
  app.require_subcommand(1);

  // pretrain-decoder ---------------------------------------------------------
  std::string pt_config;
  bool pt_huge = false;
  auto* pt = app.add_subcommand("pretrain-decoder",
                                "Train a fresh decoder-only model on the causal objective");
  pt->add_option("--config", pt_config, "run config file")->required();
  pt->add_flag("--i-know-this-is-huge", pt_huge, "allow training 2B/9B-sized models");

  // adapt --------------------------------------------------------------------
  std::string ad_mode = "balanced", ad_enc_src, ad_dec_src, ad_out;
  int64_t ad_warmup_k = 0;
  uint64_t ad_seed = 0;
  double ad_scale = 1.0;
  bool ad_zero_o = false;
  auto* ad = app.add_subcommand("adapt", "Turn decoder-only checkpoints into an encoder-decoder");
  ad->add_option("--mode", ad_mode, "balanced or unbalanced")
      ->check(CLI::IsMember({"balanced", "unbalanced"}));
  ad->add_option("--encoder-src", ad_enc_src, "encoder source checkpoint (unbalanced)");
  ad->add_option("--decoder-src", ad_dec_src, "decoder source checkpoint")->required();
  ad->add_option("--out", ad_out, "output checkpoint path")->required();
  ad->add_option("--warmup-k", ad_warmup_k, "cross-attention warmup steps stored in metadata");
  ad->add_option("--seed", ad_seed, "init seed for fresh cross-attention (unbalanced)");
  ad->add_option("--xattn-scale", ad_scale, "std multiplier for fresh cross-attention init");
  ad->add_flag("--zero-o", ad_zero_o, "zero the fresh cross-attention output projection");

  // train --------------------------------------------------------------------
  std::string tr_config;
  bool tr_huge = false;
  auto* tr = app.add_subcommand("train", "Train a checkpoint per a run config");
  tr->add_option("--config", tr_config, "run config file")->required();
  tr->add_flag("--i-know-this-is-huge", tr_huge, "allow training 2B/9B-sized models");

  // eval ---------------------------------------------------------------------
  std::string ev_ckpt, ev_task = "perplexity", ev_corpus, ev_prompt;
  int64_t ev_max_new = 64, ev_limit = 0;
  bool ev_no_cache = false;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--task", ev_task, "perplexity or decode")
      ->check(CLI::IsMember({"perplexity", "decode"}));
  ev->add_option("--corpus", ev_corpus, "text corpus for perplexity");
  ev->add_option("--limit", ev_limit, "cap on evaluated sequences (0 = all)");
  ev->add_option("--prompt", ev_prompt, "prompt text for decode");
  ev->add_option("--max-new", ev_max_new, "decode length cap");
  ev->add_flag("--no-cache", ev_no_cache, "decode without the kv cache");

  // probe --------------------------------------------------------------------
  std::string pr_ckpt, pr_train, pr_val;
  int32_t pr_classes = 2;
  uint64_t pr_seed = 0;
  int64_t pr_epochs = 30;
  auto* pr = app.add_subcommand("probe", "Frozen linear probe on labeled text");
  pr->add_option("--ckpt", pr_ckpt, "checkpoint path")->required();
  pr->add_option("--train", pr_train, "training set, one 'label<TAB>text' per line")->required();
  pr->add_option("--val", pr_val, "validation set, same format")->required();
  pr->add_option("--classes", pr_classes, "number of classes");
  pr->add_option("--seed", pr_seed, "probe shuffle seed");
  pr->add_option("--epochs", pr_epochs, "epochs per grid cell");

  // flops --------------------------------------------------------------------
  std::string fl_preset, fl_ckpt;
  int64_t fl_in = -1, fl_out = 1;
  auto* fl = app.add_subcommand("flops", "Closed-form inference flop estimate");
  fl->add_option("--preset", fl_preset, "size preset; A-B pairs an encoder with a decoder");
  fl->add_option("--ckpt", fl_ckpt, "read dimensions from a checkpoint instead");
  fl->add_option("--in-len", fl_in, "input length")->required();
  fl->add_option("--out-len", fl_out, "output length (default 1)");

  // latency ------------------------------------------------------------------
  std::string la_ckpt, la_prompt = "hello";
  int64_t la_max_new = 16, la_iters = 10, la_warmup = 2;
  bool la_no_cache = false;
  auto* la = app.add_subcommand("latency", "Wall-clock greedy decode latency");
  la->add_option("--ckpt", la_ckpt, "checkpoint path")->required();
  la->add_option("--prompt", la_prompt, "prompt text");
  la->add_option("--max-new", la_max_new, "decode length cap");
  la->add_option("--iterations", la_iters, "timed runs");
  la->add_option("--warmup", la_warmup, "untimed warmup runs (>= 2)");
  la->add_flag("--no-cache", la_no_cache, "decode without the kv cache");

  // merge --------------------------------------------------------------------
  std::string mg_a, mg_b, mg_out;
  auto* mg = app.add_subcommand("merge", "Elementwise mean of two same-shaped checkpoints");
  mg->add_option("--a", mg_a, "first checkpoint")->required();
  mg->add_option("--b", mg_b, "second checkpoint")->required();
  mg->add_option("--out", mg_out, "output checkpoint path")->required();

  // expand-mha ----------------------------------------------------------------
  std::string ex_ckpt, ex_scope = "encoder", ex_out;
  auto* ex = app.add_subcommand("expand-mha", "Replicate kv heads until GQA becomes MHA");
  ex->add_option("--ckpt", ex_ckpt, "checkpoint path")->required();
  ex->add_option("--scope", ex_scope, "encoder or all")
      ->check(CLI::IsMember({"encoder", "all"}));
  ex->add_option("--out", ex_out, "output checkpoint path")->required();

  // inspect ------------------------------------------------------------------
  std::string in_path, in_preset;
  auto* in = app.add_subcommand("inspect", "Print a checkpoint's manifest and parameter counts");
  in->add_option("path", in_path, "checkpoint path");
  in->add_option("--preset", in_preset, "inspect a size preset instead of a file");

  // prep-data ----------------------------------------------------------------
  std::string pd_corpus, pd_out, pd_objective = "prefixlm", pd_teacher;
  uint64_t pd_seed = 0;
  int32_t pd_top_k = 16;
  auto* pd = app.add_subcommand("prep-data", "Build a record dataset from a text corpus");
  pd->add_option("--corpus", pd_corpus, "text corpus, one document per line")->required();
  pd->add_option("--out", pd_out, "output dataset path")->required();
  pd->add_option("--objective", pd_objective, "causal, prefixlm or ul2")
      ->check(CLI::IsMember({"causal", "prefixlm", "ul2"}));
  pd->add_option("--seed", pd_seed, "denoiser sampling seed");
  pd->add_option("--teacher", pd_teacher, "decoder-only teacher for top-k sidecars");
  pd->add_option("--top-k", pd_top_k, "teacher entries kept per position");

  try {
    app.parse(argc, const_cast<char**>(argv));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (pt->parsed()) {
      RunConfig rc = load_run_config(pt_config);
      if (rc.preset.empty() && !rc.has_model) {
        throw ConfigError("pretrain-decoder: config must name a model preset or dimensions");
      }
      if (!rc.init.empty()) {
        throw ConfigError("pretrain-decoder: starts from random weights; drop 'init' or use train");
      }
      if (rc.schedule.objective != "causal" || !rc.schedule.second_objective.empty()) {
        throw ConfigError("pretrain-decoder: decoder-only pretraining uses objective 'causal'");
      }
      const ModelConfig cfg = rc.preset.empty() ? rc.model : preset(rc.preset);
      // Guard on the dimensions alone; materializing a 2B-scale model just to
      // refuse it would already exhaust memory.
      Metadata proposed;
      proposed.arch = Arch::DecoderOnly;
      proposed.decoder = cfg;
      cli_detail::check_trainable_size(proposed, pt_huge, "pretrain-decoder");
      NamedCheckpoint ckpt = random_decoder_only(cfg, rc.schedule.seed);
      ckpt.meta.objective = "pretrain-causal";
      cli_detail::run_training_command("pretrain-decoder", pt_config, ckpt, rc, json::object());
    } else if (ad->parsed()) {
      const NamedCheckpoint dec_src = load_checkpoint(ad_dec_src);
      json inputs = {{"decoder-src", hex64(checkpoint_content_hash(dec_src))}};
      AdaptationPlan plan;
      plan.decoder_source = &dec_src;
      plan.warmup_steps_k = ad_warmup_k;
      plan.init_seed = ad_seed;
      plan.cross_attn_init_scale = ad_scale;
      plan.zero_init_xattn_o = ad_zero_o;

      NamedCheckpoint enc_src;
      if (ad_mode == "balanced") {
        if (!ad_enc_src.empty() && ad_enc_src != ad_dec_src) {
          throw cli_detail::UsageError("adapt: balanced mode copies one source; --encoder-src must "
                                       "be omitted or equal to --decoder-src");
        }
        plan.mode = AdaptMode::Balanced;
        plan.encoder_source = &dec_src;
      } else {
        if (ad_enc_src.empty()) {
          throw cli_detail::UsageError("adapt: unbalanced mode needs --encoder-src");
        }
        plan.mode = AdaptMode::Unbalanced;
        enc_src = load_checkpoint(ad_enc_src);
        inputs["encoder-src"] = hex64(checkpoint_content_hash(enc_src));
        plan.encoder_source = &enc_src;
      }
      NamedCheckpoint out = adapt(plan);
      out.meta.warmup_steps_k = ad_warmup_k;
      save_checkpoint(out, ad_out);

      const json config = {{"mode", ad_mode},       {"warmup_k", ad_warmup_k},
                           {"seed", ad_seed},       {"xattn_scale", ad_scale},
                           {"zero_o", ad_zero_o},   {"encoder_src", ad_enc_src},
                           {"decoder_src", ad_dec_src}};
      const json outputs = {{"checkpoint", ad_out},
                            {"checkpoint_hash", hex64(checkpoint_content_hash(out))},
                            {"arch", arch_name(out.meta.arch)}};
      cli_detail::write_json_file(ad_out + ".run.json",
                                  make_record("adapt", config, inputs, outputs));
      std::cout << dump_json(outputs) << "\n";
    } else if (tr->parsed()) {
      RunConfig rc = load_run_config(tr_config);
      if (rc.init.empty()) throw ConfigError("train: config must name an init checkpoint");
      if (!rc.preset.empty() || rc.has_model) {
        throw ConfigError("train: 'init' already fixes the model; drop the model section");
      }
      NamedCheckpoint ckpt = load_checkpoint(rc.init);
      cli_detail::check_trainable_size(ckpt.meta, tr_huge, "train");
      json inputs = {{"init", hex64(checkpoint_content_hash(ckpt))}};
      cli_detail::run_training_command("train", tr_config, ckpt, rc, std::move(inputs));
    } else if (ev->parsed()) {
      const NamedCheckpoint ckpt = load_checkpoint(ev_ckpt);
      const json record = make_record(
          "eval",
          {{"task", ev_task}, {"corpus", ev_corpus}, {"limit", ev_limit},
           {"prompt", ev_prompt}, {"max_new", ev_max_new}, {"use_cache", !ev_no_cache}},
          {{"ckpt", hex64(checkpoint_content_hash(ckpt))}}, json::object());
      if (ev_task == "perplexity") {
        if (ev_corpus.empty()) throw cli_detail::UsageError("eval: perplexity needs --corpus");
        auto corpus = read_text_corpus(ev_corpus);
        if (ev_limit > 0 && static_cast<int64_t>(corpus.size()) > ev_limit) {
          corpus.resize(static_cast<size_t>(ev_limit));
        }
        std::vector<DataRecord> records;
        records.reserve(corpus.size());
        for (const auto& seq : corpus) {
          if (ckpt.meta.arch == Arch::DecoderOnly) {
            records.push_back(causal_record(seq));
          } else {
            records.push_back(to_record(prefixlm_split(seq)));
          }
        }
        const double ppl = perplexity(ckpt, records);
        std::cout << dump_json({{"task", "perplexity"},
                                {"checkpoint", ev_ckpt},
                                {"sequences", records.size()},
                                {"perplexity", ppl},
                                {"record", record}})
                  << "\n";
      } else {
        const auto tokens = greedy_decode(ckpt, Vocab::encode(ev_prompt), ev_max_new, !ev_no_cache);
        std::cout << dump_json({{"task", "decode"},
                                {"checkpoint", ev_ckpt},
                                {"prompt", ev_prompt},
                                {"tokens", tokens},
                                {"text", Vocab::decode(tokens)},
                                {"used_cache", !ev_no_cache},
                                {"record", record}})
                  << "\n";
      }
    } else if (pr->parsed()) {
      const NamedCheckpoint ckpt = load_checkpoint(pr_ckpt);
      const auto train_set = cli_detail::read_probe_file(pr_train);
      const auto val_set = cli_detail::read_probe_file(pr_val);
      const ProbeResult res =
          finetune_classifier(ckpt, train_set, val_set, pr_classes, pr_seed, pr_epochs);
      json grid = json::array();
      for (const auto& cell : res.grid) {
        grid.push_back({{"lr", cell.lr}, {"batch_size", cell.batch_size},
                        {"val_accuracy", cell.val_accuracy}});
      }
      std::cout << dump_json(
                       {{"val_accuracy", res.val_accuracy},
                        {"train_accuracy", res.train_accuracy},
                        {"lr", res.lr},
                        {"batch_size", res.batch_size},
                        {"grid", grid},
                        {"record", make_record("probe",
                                               {{"classes", pr_classes},
                                                {"seed", pr_seed},
                                                {"epochs", pr_epochs}},
                                               {{"ckpt", hex64(checkpoint_content_hash(ckpt))},
                                                {"train", hex64(cli_detail::file_hash(pr_train))},
                                                {"val", hex64(cli_detail::file_hash(pr_val))}},
                                               json::object())}})
                << "\n";
    } else if (fl->parsed()) {
      if (fl_preset.empty() == fl_ckpt.empty()) {
        throw cli_detail::UsageError("flops: give exactly one of --preset or --ckpt");
      }
      const Metadata meta = fl_preset.empty() ? load_checkpoint(fl_ckpt).meta
                                              : cli_detail::preset_metadata(fl_preset);
      const FlopsReport r = estimate_flops(meta, fl_in, fl_out);
      json out = {{"arch", arch_name(meta.arch)},
                  {"input_len", r.input_len},
                  {"output_len", r.output_len},
                  {"encoder_attention", r.encoder_attention},
                  {"encoder_ffn", r.encoder_ffn},
                  {"decoder_self_attention", r.decoder_self_attention},
                  {"decoder_cross_attention", r.decoder_cross_attention},
                  {"decoder_ffn", r.decoder_ffn},
                  {"output_logits", r.output_logits},
                  {"total", r.total()},
                  {"notes", FlopsReport::notes()}};
      if (!fl_preset.empty()) out["preset"] = fl_preset;
      if (!fl_ckpt.empty()) out["checkpoint"] = fl_ckpt;
      std::cout << dump_json(out) << "\n";
    } else if (la->parsed()) {
      const NamedCheckpoint ckpt = load_checkpoint(la_ckpt);
      const LatencyReport r = measure_latency(ckpt, Vocab::encode(la_prompt), la_max_new, la_iters,
                                              la_warmup, !la_no_cache);
      std::cout << dump_json({{"checkpoint", la_ckpt},
                              {"median_ms", r.median_ms},
                              {"p90_ms", r.p90_ms},
                              {"tokens_per_second", r.tokens_per_second},
                              {"tokens_per_query", r.tokens_per_query},
                              {"iterations", r.iterations},
                              {"warmup", r.warmup},
                              {"used_cache", r.used_cache}})
                << "\n";
    } else if (mg->parsed()) {
      const NamedCheckpoint a = load_checkpoint(mg_a);
      const NamedCheckpoint b = load_checkpoint(mg_b);
      const NamedCheckpoint out = merge_uniform(a, b, mg_a, mg_b);
      save_checkpoint(out, mg_out);
      const json outputs = {{"checkpoint", mg_out},
                            {"checkpoint_hash", hex64(checkpoint_content_hash(out))}};
      cli_detail::write_json_file(
          mg_out + ".run.json",
          make_record("merge", {{"a", mg_a}, {"b", mg_b}},
                      {{"a", hex64(checkpoint_content_hash(a))},
                       {"b", hex64(checkpoint_content_hash(b))}},
                      outputs));
      std::cout << dump_json(outputs) << "\n";
    } else if (ex->parsed()) {
      const NamedCheckpoint src = load_checkpoint(ex_ckpt);
      const MhaScope scope = ex_scope == "all" ? MhaScope::All : MhaScope::EncoderOnly;
      const NamedCheckpoint out = expand_gqa_to_mha(src, scope);
      save_checkpoint(out, ex_out);
      const json outputs = {{"checkpoint", ex_out},
                            {"checkpoint_hash", hex64(checkpoint_content_hash(out))}};
      cli_detail::write_json_file(
          ex_out + ".run.json",
          make_record("expand-mha", {{"scope", ex_scope}},
                      {{"ckpt", hex64(checkpoint_content_hash(src))}}, outputs));
      std::cout << dump_json(outputs) << "\n";
    } else if (in->parsed()) {
      if (in_path.empty() == in_preset.empty()) {
        throw cli_detail::UsageError("inspect: give a checkpoint path or --preset");
      }
      Metadata meta;
      if (!in_preset.empty()) {
        meta.arch = Arch::DecoderOnly;
        meta.decoder = preset(in_preset);
        std::cout << "preset: " << in_preset << "\n";
      } else {
        const NamedCheckpoint ckpt = load_checkpoint(in_path);
        meta = ckpt.meta;
        std::cout << "path: " << in_path << "\n";
        std::cout << "content_hash: " << hex64(checkpoint_content_hash(ckpt)) << "\n";
      }
      std::cout << "arch: " << arch_name(meta.arch) << "\n";
      std::cout << "objective: " << (meta.objective.empty() ? "-" : meta.objective) << "\n";
      std::cout << "train_steps: " << meta.train_steps << "\n";
      std::cout << "warmup_steps_k: " << meta.warmup_steps_k << "\n";
      if (!meta.parents.empty()) {
        std::cout << "parents:";
        for (const auto& p : meta.parents) std::cout << " " << p;
        std::cout << "\n";
      }
      auto show = [](const char* side, const ModelConfig& c) {
        std::cout << side << ": num_layers=" << c.num_layers << " d_model=" << c.d_model
                  << " d_ffn=" << c.d_ffn << " q_heads=" << c.q_heads << " kv_heads=" << c.kv_heads
                  << " d_head=" << c.d_head << " vocab_size=" << c.vocab_size
                  << " max_seq=" << c.max_seq << "\n";
      };
      if (meta.arch == Arch::EncoderDecoder) {
        show("encoder", meta.encoder);
        std::cout << "shared_embedding: " << (meta.shared_embedding ? "true" : "false") << "\n";
        std::cout << "encoder_causal: " << (meta.encoder_causal ? "true" : "false") << "\n";
      }
      show("decoder", meta.decoder);

      std::cout << "tensors:\n";
      int64_t payload = 0;
      for (const std::string& name : canonical_names(meta)) {
        const Shape shape = expected_shape(name, meta);
        int64_t count = 1;
        for (int64_t d : shape) count *= d;
        payload += count * static_cast<int64_t>(sizeof(float));
        std::cout << "  " << name << "  " << shape_str(shape) << "  " << count * sizeof(float)
                  << " bytes\n";
      }
      std::cout << "payload_bytes: " << payload << "\n";

      const ParamCounts counts = count_params(meta);
      std::cout << "parameter counts:\n";
      for (const CountConvention c :
           {CountConvention::IncludeEmbeddings, CountConvention::ExcludeEmbeddings,
            CountConvention::ExcludeEmbeddingsAndCrossAttention}) {
        std::cout << "  " << convention_name(c) << ": " << counts.total(c) << "\n";
      }
      std::cout << "  breakdown: encoder=" << counts.encoder << " decoder=" << counts.decoder
                << " cross_attn=" << counts.cross_attn << " embedding=" << counts.embedding
                << "\n";
    } else if (pd->parsed()) {
      const auto corpus = read_text_corpus(pd_corpus);
      json inputs = {{"corpus", hex64(cli_detail::file_hash(pd_corpus))}};
      std::vector<DataRecord> records;
      records.reserve(corpus.size());
      int64_t skipped = 0, span_cap_events = 0;
      if (pd_objective == "causal") {
        for (const auto& seq : corpus) records.push_back(causal_record(seq));
      } else if (pd_objective == "prefixlm") {
        for (const auto& seq : corpus) records.push_back(to_record(prefixlm_split(seq)));
      } else {
        UL2Mixture mix = UL2Mixture::uniform_default(pd_seed);
        for (size_t i = 0; i < corpus.size(); ++i) {
          if (corpus[i].size() < 4) {
            ++skipped;
            continue;
          }
          records.push_back(to_record(mix.apply(corpus[i], i)));
        }
        span_cap_events = mix.span_cap_events();
      }
      if (records.empty()) throw InputError("prep-data: no usable sequences in corpus");

      if (!pd_teacher.empty()) {
        const NamedCheckpoint teacher = load_checkpoint(pd_teacher);
        inputs["teacher"] = hex64(checkpoint_content_hash(teacher));
        for (auto& rec : records) teacher_record(teacher, rec, pd_top_k);
      }
      write_dataset(pd_out, records);

      const json config = {{"objective", pd_objective}, {"seed", pd_seed},
                           {"teacher", pd_teacher},     {"top_k", pd_top_k}};
      const json outputs = {{"dataset", pd_out},
                            {"records", records.size()},
                            {"skipped_short", skipped},
                            {"span_cap_events", span_cap_events},
                            {"dataset_hash", hex64(cli_detail::file_hash(pd_out))}};
      cli_detail::write_json_file(pd_out + ".run.json",
                                  make_record("prep-data", config, inputs, outputs));
      std::cout << dump_json(outputs) << "\n";
    }
  } catch (const cli_detail::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace edsg
