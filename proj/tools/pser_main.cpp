// pser: personalized speech-emotion representation pipeline.
//
// Subcommands cover the full chain: gen-data -> pseudo-label -> papt ->
// finetune -> predict -> calibrate -> evaluate, plus the analysis harnesses
// shift-analysis, gap, and ablate-fusion.

#include "pser/calibrate.hpp"
#include "pser/corpus.hpp"
#include "pser/downstream.hpp"
#include "pser/encoder.hpp"
#include "pser/evalkit.hpp"
#include "pser/pretrain.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pser;

namespace {

const char* kLayoutHelp =
    "Artifacts live under --run-dir in a fixed layout:\n"
    "  corpus/manifest.ndjson   synthetic corpus (waveforms in corpus/waves/)\n"
    "  pseudo/                  per-utterance pseudo-labels + index.json\n"
    "  checkpoints/             init.ckpt, papt.ckpt, finetune.ckpt\n"
    "  preds/                   <split>.ndjson, <split>_proxies.json, *_calibrated.ndjson\n"
    "  profiles/                training-speaker profiles + vectors/\n"
    "  reports/                 metric reports, NDJSON and aligned text\n"
    "  runs/                    one JSON manifest per invocation\n";

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + p.string() + "'");
  out << s;
}

void require_exists(const fs::path& p, const std::string& missing_msg) {
  if (!fs::exists(p)) throw ValidationError(missing_msg);
}

// Per-invocation bookkeeping; becomes runs/<run_id>.json at the end.
struct RunContext {
  fs::path run_dir;
  std::string subcommand;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  json config = json::object();
  json extra = json::object();
  std::map<std::string, std::string> config_files;  // path -> raw bytes

  fs::path input(const fs::path& p) {
    inputs.push_back(p.string());
    return p;
  }
  fs::path output(const fs::path& p) {
    outputs.push_back(p.string());
    return p;
  }

  void finish() {
    for (const auto& o : outputs) {
      if (!fs::exists(o))
        throw std::runtime_error("declared output missing at run end: " + o);
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(run_dir / "runs");
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%S", &tm_utc);
    std::string run_id = subcommand + "-" + stamp;
    fs::path path = run_dir / "runs" / (run_id + ".json");
    for (int n = 1; fs::exists(path); ++n) {
      path = run_dir / "runs" / (run_id + "-" + std::to_string(n) + ".json");
    }

    json manifest = {{"format", "pser-run-manifest"},
                     {"version", 1},
                     {"run_id", path.stem().string()},
                     {"subcommand", subcommand},
                     {"seed", seed},
                     {"jobs", jobs},
                     {"config", config},
                     {"config_files", config_files},
                     {"inputs", inputs},
                     {"outputs", outputs},
                     {"duration_seconds", secs}};
    if (!extra.empty()) manifest["extra"] = extra;
    write_text(path, manifest.dump(2) + "\n");
  }
};

// Shared flags; every subcommand gets them.
struct Common {
  std::string run_dir = "run";
  std::uint64_t seed = 0;
  int jobs = 1;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--run-dir", run_dir, "Artifact tree root")->capture_default_str();
    seed_opt = cmd->add_option("--seed", seed, "Master seed; sub-streams are derived from it")
                   ->capture_default_str();
    cmd->add_option("--jobs", jobs, "Worker cap (orchestration stays single-threaded)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
  }

  RunContext context(const std::string& subcommand) const {
    RunContext ctx;
    ctx.run_dir = run_dir;
    ctx.subcommand = subcommand;
    ctx.seed = seed;
    ctx.jobs = jobs;
    return ctx;
  }

  fs::path resolve(const std::string& given, const char* fallback) const {
    return given.empty() ? fs::path(run_dir) / fallback : fs::path(given);
  }
};

json parse_json_file(RunContext& ctx, const fs::path& p) {
  require_exists(p, "config file not found at '" + p.string() + "'");
  ctx.input(p);
  const std::string raw = read_text(p);
  ctx.config_files[p.string()] = raw;
  try {
    return json::parse(raw);
  } catch (const json::parse_error& e) {
    throw ParseError("invalid JSON in '" + p.string() + "': " + e.what());
  }
}

Corpus load_corpus(RunContext& ctx, const fs::path& manifest) {
  require_exists(manifest, "corpus manifest not found at '" + manifest.string() + "'");
  ctx.input(manifest);
  return read_manifest(manifest);
}

EncoderModel load_model(RunContext& ctx, const fs::path& ckpt) {
  require_exists(ckpt, "checkpoint not found at '" + ckpt.string() + "'");
  ctx.input(ckpt);
  return load_checkpoint(ckpt);
}

PredictionSet load_preds(RunContext& ctx, const fs::path& p) {
  require_exists(p, "no predictions found at '" + p.string() + "'");
  ctx.input(p);
  return read_predictions(p);
}

// Attaches truth labels from the corpus. Only `evaluate` and `shift-analysis`
// call this; no other subcommand touches test labels.
void join_truth(PredictionSet& preds, const Corpus& corpus) {
  std::map<std::string, const UtteranceRecord*> by_id;
  for (const auto& r : corpus.records) by_id[r.id] = &r;
  for (auto& e : preds.entries) {
    if (e.truth) continue;
    auto it = by_id.find(e.id);
    if (it == by_id.end())
      throw LookupError("prediction id '" + e.id + "' not present in the corpus");
    if (!it->second->label)
      throw ValidationError("utterance '" + e.id + "' has no label to evaluate against");
    e.truth = *it->second->label;
  }
}

void write_report_pair(RunContext& ctx, const fs::path& prefix, const std::string& ndjson,
                       const std::string& table) {
  write_text(ctx.output(prefix.string() + ".ndjson"), ndjson);
  write_text(ctx.output(prefix.string() + ".txt"), table);
}

SyntheticSpec spec_from_json(const json& j) {
  SyntheticSpec spec;
  spec.n_speakers_per_split = {{Split::train, 10}, {Split::validation, 2},  {Split::test_a, 3},
                               {Split::test_b, 3}, {Split::test_c, 3}};
  static const std::vector<std::string> known = {
      "n_speakers_per_split", "utterances_per_speaker", "t_raw", "feature_shift_scale",
      "label_mu_range",       "label_sigma_range",      "seed"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown field '" + key + "' in synthetic spec");
    (void)value;
  }
  if (j.contains("n_speakers_per_split")) {
    spec.n_speakers_per_split.clear();
    for (const auto& [name, count] : j.at("n_speakers_per_split").items())
      spec.n_speakers_per_split[split_from_name(name)] = count.get<int>();
  }
  spec.utterances_per_speaker = j.value("utterances_per_speaker", spec.utterances_per_speaker);
  spec.t_raw = j.value("t_raw", spec.t_raw);
  spec.feature_shift_scale = j.value("feature_shift_scale", spec.feature_shift_scale);
  if (j.contains("label_mu_range")) {
    auto r = j.at("label_mu_range").get<std::vector<double>>();
    if (r.size() != 2) throw ConfigError("label_mu_range must be [lo, hi]");
    spec.label_mu_lo = r[0];
    spec.label_mu_hi = r[1];
  }
  if (j.contains("label_sigma_range")) {
    auto r = j.at("label_sigma_range").get<std::vector<double>>();
    if (r.size() != 2) throw ConfigError("label_sigma_range must be [lo, hi]");
    spec.label_sigma_lo = r[0];
    spec.label_sigma_hi = r[1];
  }
  spec.seed = j.value("seed", spec.seed);
  return spec;
}

json spec_to_json(const SyntheticSpec& spec) {
  json per_split = json::object();
  for (const auto& [split, n] : spec.n_speakers_per_split) per_split[split_name(split)] = n;
  return json{{"n_speakers_per_split", per_split},
              {"utterances_per_speaker", spec.utterances_per_speaker},
              {"t_raw", spec.t_raw},
              {"feature_shift_scale", spec.feature_shift_scale},
              {"label_mu_range", {spec.label_mu_lo, spec.label_mu_hi}},
              {"label_sigma_range", {spec.label_sigma_lo, spec.label_sigma_hi}},
              {"seed", spec.seed}};
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  Common common;
  std::string spec_path;
  std::string out;
};

void run_gen_data(const GenDataArgs& a) {
  RunContext ctx = a.common.context("gen-data");
  SyntheticSpec spec;
  if (!a.spec_path.empty()) {
    spec = spec_from_json(parse_json_file(ctx, a.spec_path));
  } else {
    spec = spec_from_json(json::object());
  }
  if (a.common.seed_opt->count() > 0) spec.seed = a.common.seed;
  ctx.seed = spec.seed;
  ctx.config = spec_to_json(spec);

  const Corpus corpus = generate_synthetic(spec);
  const fs::path out_dir = a.out.empty() ? ctx.run_dir / "corpus" : fs::path(a.out);
  const fs::path manifest = out_dir / "manifest.ndjson";
  write_manifest(corpus, manifest);
  ctx.output(manifest);
  ctx.extra["records"] = corpus.records.size();
  ctx.extra["speakers"] = corpus.speaker_index.size();
  ctx.finish();
  std::cout << "wrote " << corpus.records.size() << " utterances ("
            << corpus.speaker_index.size() << " speakers) to " << manifest.string() << "\n";
}

// ------------------------------------------------------------ pseudo-label

struct PseudoArgs {
  Common common;
  std::string corpus;
  std::string encoder_config;
  std::string fusion = "last";
  int k = 0;
  CLI::Option* k_opt = nullptr;
  std::string out;
  std::string ckpt_out;
};

void run_pseudo_label(const PseudoArgs& a) {
  RunContext ctx = a.common.context("pseudo-label");
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));

  EncoderConfig cfg;
  if (!a.encoder_config.empty()) cfg = EncoderConfig::from_json(parse_json_file(ctx, a.encoder_config));
  cfg.fusion = fusion_from_name(a.fusion);
  if (a.k_opt->count() > 0) cfg.k_pseudo = a.k;

  EncoderModel model = init_model(cfg, corpus.seen_speakers(), a.common.seed);
  const PseudoLabelSet labels = make_pseudo_labels(model, corpus, cfg.k_pseudo, a.common.seed);

  const fs::path out_dir = a.common.resolve(a.out, "pseudo");
  write_pseudo_labels(out_dir, labels);
  ctx.output(out_dir / "index.json");
  const fs::path ckpt = a.common.resolve(a.ckpt_out, "checkpoints/init.ckpt");
  save_checkpoint(model, ckpt);
  ctx.output(ckpt);

  ctx.config = model.config.to_json();
  ctx.finish();
  std::cout << "clustered " << labels.labels.size() << " utterances into k=" << labels.k
            << " pseudo-labels; initial model at " << ckpt.string() << "\n";
}

// ------------------------------------------------------------------- papt

struct PaptArgs {
  Common common;
  std::string corpus;
  std::string pseudo;
  std::string init_ckpt;
  std::string config;
  std::string out;
  int epochs = 10;
  double lr_max = 1e-3;
  int batch_size = 8;
  double mask_prob = 0.08;
  int span = 10;
  CLI::Option *epochs_opt = nullptr, *lr_opt = nullptr, *batch_opt = nullptr,
              *mask_opt = nullptr, *span_opt = nullptr;
};

std::string pretrain_history_ndjson(const PretrainHistory& h) {
  std::ostringstream out;
  out << json{{"format", "pser-papt-history"}, {"version", 1}, {"best_epoch", h.best_epoch}}.dump()
      << '\n';
  for (std::size_t i = 0; i < h.train_loss.size(); ++i)
    out << json{{"epoch", i}, {"train_loss", h.train_loss[i]}, {"val_loss", h.val_loss[i]}}.dump()
        << '\n';
  return out.str();
}

std::string pretrain_history_table(const PretrainHistory& h) {
  std::ostringstream out;
  out << "epoch  train_loss    val_loss\n";
  out << "-----  ----------  ----------\n";
  for (std::size_t i = 0; i < h.train_loss.size(); ++i) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%5zu  %10.6f  %10.6f%s\n", i, h.train_loss[i], h.val_loss[i],
                  static_cast<int>(i) == h.best_epoch ? "  *" : "");
    out << buf;
  }
  return out.str();
}

void run_papt(const PaptArgs& a) {
  RunContext ctx = a.common.context("papt");
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));

  PretrainConfig pc;
  pc.lr_max = 1e-3;  // toy-scale default; config files may restore the paper-scale 1e-5
  if (!a.config.empty()) pc = PretrainConfig::from_json(parse_json_file(ctx, a.config));
  if (a.epochs_opt->count() > 0) pc.epochs = a.epochs;
  if (a.lr_opt->count() > 0) pc.lr_max = a.lr_max;
  if (a.batch_opt->count() > 0) pc.batch_size = a.batch_size;
  if (a.mask_opt->count() > 0) pc.mask_prob = a.mask_prob;
  if (a.span_opt->count() > 0) pc.span = a.span;
  if (a.common.seed_opt->count() > 0 || a.config.empty()) pc.seed = a.common.seed;
  ctx.seed = pc.seed;
  ctx.config = pc.to_json();

  const fs::path pseudo_dir = a.common.resolve(a.pseudo, "pseudo");
  require_exists(pseudo_dir / "index.json",
                 "pseudo-labels not found at '" + (pseudo_dir / "index.json").string() + "'");
  ctx.input(pseudo_dir / "index.json");
  const PseudoLabelSet labels = read_pseudo_labels(pseudo_dir);

  EncoderModel model = load_model(ctx, a.common.resolve(a.init_ckpt, "checkpoints/init.ckpt"));
  const PretrainHistory history = run_papt(model, corpus, labels, pc);

  const fs::path ckpt = a.common.resolve(a.out, "checkpoints/papt.ckpt");
  save_checkpoint(model, ckpt);
  ctx.output(ckpt);
  write_report_pair(ctx, ctx.run_dir / "reports" / "papt_history",
                    pretrain_history_ndjson(history), pretrain_history_table(history));
  ctx.extra["best_epoch"] = history.best_epoch;
  ctx.extra["best_val_loss"] = history.val_loss.at(history.best_epoch);
  ctx.finish();
  std::cout << pretrain_history_table(history);
  std::cout << "pre-trained model at " << ckpt.string() << "\n";
}

// ---------------------------------------------------------------- finetune

struct FinetuneArgs {
  Common common;
  std::string corpus;
  std::string ckpt_in;
  std::string config;
  std::string out;
  std::string target = "valence";
  int epochs_max = 10;
  double lr = 1e-3;
  int patience = 2;
  int batch_size = 8;
  CLI::Option *epochs_opt = nullptr, *lr_opt = nullptr, *patience_opt = nullptr,
              *batch_opt = nullptr;
};

std::string finetune_history_ndjson(const FinetuneHistory& h) {
  std::ostringstream out;
  out << json{{"format", "pser-finetune-history"},
              {"version", 1},
              {"best_epoch", h.best_epoch},
              {"epochs_run", h.epochs_run}}
             .dump()
      << '\n';
  for (std::size_t i = 0; i < h.train_loss.size(); ++i)
    out << json{{"epoch", i}, {"train_loss", h.train_loss[i]}, {"val_ccc", h.val_ccc[i]}}.dump()
        << '\n';
  return out.str();
}

std::string finetune_history_table(const FinetuneHistory& h) {
  std::ostringstream out;
  out << "epoch  train_loss     val_ccc\n";
  out << "-----  ----------  ----------\n";
  for (std::size_t i = 0; i < h.train_loss.size(); ++i) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%5zu  %10.6f  %10.6f%s\n", i, h.train_loss[i], h.val_ccc[i],
                  static_cast<int>(i) == h.best_epoch ? "  *" : "");
    out << buf;
  }
  return out.str();
}

void run_finetune(const FinetuneArgs& a) {
  RunContext ctx = a.common.context("finetune");
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));

  FinetuneConfig fc;
  fc.lr = 1e-3;  // toy-scale default; the paper-scale rate is 5e-5
  if (!a.config.empty()) fc = FinetuneConfig::from_json(parse_json_file(ctx, a.config));
  if (a.epochs_opt->count() > 0) fc.epochs_max = a.epochs_max;
  if (a.lr_opt->count() > 0) fc.lr = a.lr;
  if (a.patience_opt->count() > 0) fc.patience = a.patience;
  if (a.batch_opt->count() > 0) fc.batch_size = a.batch_size;
  if (a.common.seed_opt->count() > 0 || a.config.empty()) fc.seed = a.common.seed;
  ctx.seed = fc.seed;
  ctx.config = fc.to_json();
  ctx.config["target"] = a.target;

  EncoderModel model = load_model(ctx, a.common.resolve(a.ckpt_in, "checkpoints/papt.ckpt"));
  const FinetuneHistory history = finetune(model, corpus, fc, target_from_name(a.target));

  const fs::path ckpt = a.common.resolve(a.out, "checkpoints/finetune.ckpt");
  save_checkpoint(model, ckpt);
  ctx.output(ckpt);
  write_report_pair(ctx, ctx.run_dir / "reports" / "finetune_history",
                    finetune_history_ndjson(history), finetune_history_table(history));
  ctx.extra["best_epoch"] = history.best_epoch;
  ctx.extra["best_val_ccc"] = history.val_ccc.at(history.best_epoch);
  ctx.finish();
  std::cout << finetune_history_table(history);
  std::cout << "fine-tuned model at " << ckpt.string() << "\n";
}

// ----------------------------------------------------------------- predict

struct PredictArgs {
  Common common;
  std::string corpus;
  std::string ckpt;
  std::string base_ckpt;
  std::string split = "test_b";
  std::string out;
  bool no_speaker = false;
};

void run_predict(const PredictArgs& a) {
  RunContext ctx = a.common.context("predict");
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));
  const Split split = split_from_name(a.split);
  EncoderModel model = load_model(ctx, a.common.resolve(a.ckpt, "checkpoints/finetune.ckpt"));

  PredictOptions options;
  options.use_speaker = !a.no_speaker;

  // Unseen speakers get a proxy embedding chosen with the base encoder.
  if (options.use_speaker) {
    std::vector<std::string> unseen;
    for (const auto& sid : corpus.speakers_of(split))
      if (!model.speaker_lookup.count(sid)) unseen.push_back(sid);
    if (!unseen.empty()) {
      EncoderModel base =
          load_model(ctx, a.common.resolve(a.base_ckpt, "checkpoints/papt.ckpt"));
      const auto base_profiles = build_train_profiles(base, corpus, /*use_speaker=*/false);
      for (const auto& sid : unseen) {
        std::vector<const UtteranceRecord*> utts;
        for (const auto& rec : corpus.records)
          if (rec.split == split && rec.speaker_id == sid) utts.push_back(&rec);
        options.proxies[sid] = proxy_speaker(utts, base, base_profiles);
      }
    }
  }

  PredictionSet preds = predict_all(model, corpus, split, options);
  for (auto& e : preds.entries) e.truth.reset();  // labels stay out of prediction artifacts

  const fs::path out_path =
      a.out.empty() ? ctx.run_dir / "preds" / (a.split + ".ndjson") : fs::path(a.out);
  write_predictions(preds, out_path);
  ctx.output(out_path);

  json proxies = json::object();
  for (const auto& [sid, proxy] : options.proxies) proxies[sid] = proxy;
  const fs::path proxy_path = out_path.parent_path() / (out_path.stem().string() + "_proxies.json");
  write_text(proxy_path, json{{"format", "pser-proxies"}, {"version", 1}, {"proxies", proxies}}.dump(2) + "\n");
  ctx.output(proxy_path);

  ctx.config = {{"split", a.split}, {"use_speaker", options.use_speaker}};
  ctx.extra["proxies"] = proxies;
  ctx.finish();
  std::cout << "wrote " << preds.entries.size() << " predictions to " << out_path.string() << "\n";
}

// --------------------------------------------------------------- calibrate

struct CalibrateArgs {
  Common common;
  std::string corpus;
  std::string ckpt;
  std::string preds;
  std::string out;
  std::string profiles_out;
  std::string shift_mode = "both";
  int top_k = 5;
};

void run_calibrate(const CalibrateArgs& a) {
  RunContext ctx = a.common.context("calibrate");
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));
  const fs::path preds_path = a.common.resolve(a.preds, "preds/test_b.ndjson");
  const PredictionSet preds = load_preds(ctx, preds_path);
  EncoderModel model = load_model(ctx, a.common.resolve(a.ckpt, "checkpoints/finetune.ckpt"));

  CalibrationConfig cfg;
  cfg.top_k = a.top_k;
  cfg.mode = shift_mode_from_name(a.shift_mode);
  cfg.validate();
  ctx.config = {{"top_k", cfg.top_k}, {"mode", shift_mode_name(cfg.mode)}};

  const auto profiles = build_train_profiles(model, corpus, /*use_speaker=*/true);
  const fs::path profiles_path = a.common.resolve(a.profiles_out, "profiles/profiles.ndjson");
  write_profiles(profiles, profiles_path);
  ctx.output(profiles_path);

  std::map<std::string, std::string> proxies;
  const fs::path proxy_path =
      preds_path.parent_path() / (preds_path.stem().string() + "_proxies.json");
  if (fs::exists(proxy_path)) {
    ctx.input(proxy_path);
    const json j = json::parse(read_text(proxy_path));
    for (const auto& [sid, proxy] : j.at("proxies").items())
      proxies[sid] = proxy.get<std::string>();
  }

  const CalibrationResult result =
      calibrate_prediction_set(model, corpus, preds, profiles, cfg, proxies);
  const fs::path out_path = a.out.empty()
                                ? preds_path.parent_path() /
                                      (preds_path.stem().string() + "_calibrated.ndjson")
                                : fs::path(a.out);
  write_predictions(result.preds, out_path);
  ctx.output(out_path);
  ctx.extra["skipped_speakers"] = result.skipped_speakers;
  ctx.finish();
  for (const auto& sid : result.skipped_speakers)
    std::cerr << "warning: speaker '" << sid << "' left uncalibrated (too few predictions)\n";
  std::cout << "calibrated predictions at " << out_path.string() << "\n";
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  Common common;
  std::string corpus;
  std::string preds;
  std::string out_prefix;
};

void run_evaluate(const EvaluateArgs& a) {
  RunContext ctx = a.common.context("evaluate");
  const fs::path preds_path = a.common.resolve(a.preds, "preds/test_b.ndjson");
  PredictionSet preds = load_preds(ctx, preds_path);
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));
  join_truth(preds, corpus);

  const EvalReport report = evaluate(preds);
  const fs::path prefix = a.out_prefix.empty()
                              ? ctx.run_dir / "reports" / ("eval_" + preds_path.stem().string())
                              : fs::path(a.out_prefix);
  write_report_pair(ctx, prefix, eval_report_ndjson(report), eval_report_table(report));
  ctx.config = {{"preds", preds_path.string()}};
  ctx.finish();
  std::cout << eval_report_table(report);
}

// ---------------------------------------------------------- shift-analysis

struct ShiftArgs {
  Common common;
  std::string corpus;
  std::string preds;
  std::string ckpt;
  std::string out_prefix;
};

void run_shift_analysis(const ShiftArgs& a) {
  RunContext ctx = a.common.context("shift-analysis");
  const fs::path preds_path = a.common.resolve(a.preds, "preds/test_b.ndjson");
  PredictionSet preds = load_preds(ctx, preds_path);
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));
  join_truth(preds, corpus);
  EncoderModel model = load_model(ctx, a.common.resolve(a.ckpt, "checkpoints/finetune.ckpt"));

  const ShiftReport report = shift_analysis(model, corpus, preds);
  const fs::path prefix = a.out_prefix.empty()
                              ? ctx.run_dir / "reports" / ("shift_" + preds_path.stem().string())
                              : fs::path(a.out_prefix);
  write_report_pair(ctx, prefix, shift_report_ndjson(report), shift_report_table(report));
  ctx.config = {{"preds", preds_path.string()}};
  ctx.finish();
  std::cout << shift_report_table(report);
}

// --------------------------------------------------------------------- gap

struct GapArgs {
  Common common;
  std::string corpus;
  std::string encoder_config;
  std::string pt_config;
  std::string ft_config;
  std::string target = "valence";
  std::vector<int> ks{5, 20, 80};
  int n_removed = -1;
  bool no_test_a = false;
  std::string out_prefix;
};

void run_gap(const GapArgs& a) {
  RunContext ctx = a.common.context("gap");
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));

  GapOptions options;
  if (!a.encoder_config.empty())
    options.encoder = EncoderConfig::from_json(parse_json_file(ctx, a.encoder_config));
  if (!a.pt_config.empty())
    options.pt = PretrainConfig::from_json(parse_json_file(ctx, a.pt_config));
  if (!a.ft_config.empty())
    options.ft = FinetuneConfig::from_json(parse_json_file(ctx, a.ft_config));
  else
    options.ft.lr = 1e-3;
  options.seed = a.common.seed;
  options.ft.seed = a.common.seed;
  options.n_removed = a.n_removed;
  options.include_test_a = !a.no_test_a;
  options.target = target_from_name(a.target);
  ctx.config = {{"k_values", a.ks},
                {"n_removed", a.n_removed},
                {"include_test_a", options.include_test_a},
                {"target", a.target}};

  const auto rows = personalization_gap(corpus, a.ks, options);
  const fs::path prefix =
      a.out_prefix.empty() ? ctx.run_dir / "reports" / "gap" : fs::path(a.out_prefix);
  write_report_pair(ctx, prefix, gap_report_ndjson(rows), gap_report_table(rows));
  ctx.finish();
  std::cout << gap_report_table(rows);
}

// ----------------------------------------------------------- ablate-fusion

struct AblateArgs {
  Common common;
  std::string corpus;
  std::string pseudo;
  std::string encoder_config;
  std::string pt_config;
  std::string ft_config;
  std::string target = "valence";
  std::string out_prefix;
};

void run_ablate_fusion(const AblateArgs& a) {
  RunContext ctx = a.common.context("ablate-fusion");
  const Corpus corpus = load_corpus(ctx, a.common.resolve(a.corpus, "corpus/manifest.ndjson"));

  AblateOptions options;
  if (!a.encoder_config.empty())
    options.encoder = EncoderConfig::from_json(parse_json_file(ctx, a.encoder_config));
  if (!a.pt_config.empty())
    options.pt = PretrainConfig::from_json(parse_json_file(ctx, a.pt_config));
  else
    options.pt.lr_max = 1e-3;
  if (!a.ft_config.empty())
    options.ft = FinetuneConfig::from_json(parse_json_file(ctx, a.ft_config));
  else
    options.ft.lr = 1e-3;
  options.seed = a.common.seed;
  options.pt.seed = a.common.seed;
  options.ft.seed = a.common.seed;
  options.target = target_from_name(a.target);
  ctx.config = {{"target", a.target},
                {"encoder", options.encoder.to_json()},
                {"pretrain", options.pt.to_json()},
                {"finetune", options.ft.to_json()}};

  PseudoLabelSet labels;
  if (!a.pseudo.empty()) {
    const fs::path pseudo_dir(a.pseudo);
    require_exists(pseudo_dir / "index.json",
                   "pseudo-labels not found at '" + (pseudo_dir / "index.json").string() + "'");
    ctx.input(pseudo_dir / "index.json");
    labels = read_pseudo_labels(pseudo_dir);
  } else {
    // The conv front-end is fusion-independent, so one init serves all rows.
    EncoderModel seed_model = init_model(options.encoder, corpus.seen_speakers(), options.seed);
    labels = make_pseudo_labels(seed_model, corpus, options.encoder.k_pseudo, options.seed);
  }

  const auto rows = ablate_fusion(corpus, labels, options);
  const fs::path prefix =
      a.out_prefix.empty() ? ctx.run_dir / "reports" / "fusion" : fs::path(a.out_prefix);
  write_report_pair(ctx, prefix, fusion_report_ndjson(rows), fusion_report_table(rows));
  ctx.finish();
  std::cout << fusion_report_table(rows);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string("pser: personalized speech-emotion representation pipeline.\n\n") +
               kLayoutHelp};
  app.require_subcommand(1);

  auto gen = std::make_shared<GenDataArgs>();
  {
    CLI::App* cmd = app.add_subcommand("gen-data", "Generate a synthetic corpus");
    gen->common.attach(cmd);
    cmd->add_option("--spec", gen->spec_path, "Synthetic spec JSON");
    cmd->add_option("--out", gen->out, "Corpus directory (default <run-dir>/corpus)");
    cmd->callback([gen] { run_gen_data(*gen); });
  }

  auto pseudo = std::make_shared<PseudoArgs>();
  {
    CLI::App* cmd = app.add_subcommand(
        "pseudo-label", "Initialize a model and cluster conv features into pseudo-labels");
    pseudo->common.attach(cmd);
    cmd->add_option("--corpus", pseudo->corpus, "Corpus manifest");
    cmd->add_option("--encoder-config", pseudo->encoder_config, "EncoderConfig JSON");
    cmd->add_option("--fusion", pseudo->fusion, "Speaker fusion position")
        ->check(CLI::IsMember({"last", "first", "prefix", "none"}))
        ->capture_default_str();
    pseudo->k_opt = cmd->add_option("--k", pseudo->k, "Number of pseudo-label clusters");
    cmd->add_option("--out", pseudo->out, "Pseudo-label directory (default <run-dir>/pseudo)");
    cmd->add_option("--ckpt-out", pseudo->ckpt_out,
                    "Initial checkpoint path (default <run-dir>/checkpoints/init.ckpt)");
    cmd->callback([pseudo] { run_pseudo_label(*pseudo); });
  }

  auto papt = std::make_shared<PaptArgs>();
  {
    CLI::App* cmd =
        app.add_subcommand("papt", "Personalized adaptive pre-training (masked prediction)");
    papt->common.attach(cmd);
    cmd->add_option("--corpus", papt->corpus, "Corpus manifest");
    cmd->add_option("--pseudo", papt->pseudo, "Pseudo-label directory");
    cmd->add_option("--init", papt->init_ckpt, "Starting checkpoint");
    cmd->add_option("--config", papt->config, "PretrainConfig JSON");
    cmd->add_option("--out", papt->out, "Output checkpoint");
    papt->epochs_opt = cmd->add_option("--epochs", papt->epochs, "Training epochs");
    papt->lr_opt = cmd->add_option("--lr-max", papt->lr_max, "Peak learning rate");
    papt->batch_opt = cmd->add_option("--batch-size", papt->batch_size, "Batch size");
    papt->mask_opt = cmd->add_option("--mask-prob", papt->mask_prob, "Span start probability");
    papt->span_opt = cmd->add_option("--span", papt->span, "Mask span length");
    cmd->callback([papt] { run_papt(*papt); });
  }

  auto ft = std::make_shared<FinetuneArgs>();
  {
    CLI::App* cmd = app.add_subcommand("finetune", "CCC-loss emotion regression fine-tuning");
    ft->common.attach(cmd);
    cmd->add_option("--corpus", ft->corpus, "Corpus manifest");
    cmd->add_option("--init", ft->ckpt_in, "Starting checkpoint (default papt.ckpt)");
    cmd->add_option("--config", ft->config, "FinetuneConfig JSON");
    cmd->add_option("--out", ft->out, "Output checkpoint");
    cmd->add_option("--target", ft->target, "Affect dimension name")
        ->check(CLI::IsMember({"arousal", "valence"}))
        ->capture_default_str();
    ft->epochs_opt = cmd->add_option("--epochs-max", ft->epochs_max, "Epoch cap");
    ft->lr_opt = cmd->add_option("--lr", ft->lr, "Learning rate");
    ft->patience_opt = cmd->add_option("--patience", ft->patience, "Early-stopping patience");
    ft->batch_opt = cmd->add_option("--batch-size", ft->batch_size, "Batch size");
    cmd->callback([ft] { run_finetune(*ft); });
  }

  auto pred = std::make_shared<PredictArgs>();
  {
    CLI::App* cmd = app.add_subcommand("predict", "Batch prediction for one split");
    pred->common.attach(cmd);
    cmd->add_option("--corpus", pred->corpus, "Corpus manifest");
    cmd->add_option("--checkpoint", pred->ckpt, "Model checkpoint (default finetune.ckpt)");
    cmd->add_option("--base-checkpoint", pred->base_ckpt,
                    "Base encoder for proxy selection (default papt.ckpt)");
    cmd->add_option("--split", pred->split, "Corpus split to predict")
        ->check(CLI::IsMember({"train", "validation", "test_a", "test_b", "test_c"}))
        ->capture_default_str();
    cmd->add_option("--out", pred->out, "Predictions NDJSON path");
    cmd->add_flag("--no-speaker", pred->no_speaker, "Ignore speaker embeddings");
    cmd->callback([pred] { run_predict(*pred); });
  }

  auto cal = std::make_shared<CalibrateArgs>();
  {
    CLI::App* cmd =
        app.add_subcommand("calibrate", "Personalized label-distribution calibration (PLDC)");
    cal->common.attach(cmd);
    cmd->add_option("--corpus", cal->corpus, "Corpus manifest");
    cmd->add_option("--checkpoint", cal->ckpt, "Model checkpoint (default finetune.ckpt)");
    cmd->add_option("--preds", cal->preds, "Predictions to calibrate");
    cmd->add_option("--out", cal->out, "Calibrated predictions path");
    cmd->add_option("--profiles-out", cal->profiles_out, "Speaker profile NDJSON path");
    cmd->add_option("--shift-mode", cal->shift_mode, "Distribution statistics to shift")
        ->check(CLI::IsMember({"none", "mu", "sigma", "both"}))
        ->capture_default_str();
    cmd->add_option("--top-k", cal->top_k, "Similar training speakers to retrieve")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->callback([cal] { run_calibrate(*cal); });
  }

  auto ev = std::make_shared<EvaluateArgs>();
  {
    CLI::App* cmd = app.add_subcommand("evaluate", "O-CCC / A-CCC report for a prediction set");
    ev->common.attach(cmd);
    cmd->add_option("--corpus", ev->corpus, "Corpus manifest (source of truth labels)");
    cmd->add_option("--preds", ev->preds, "Predictions NDJSON");
    cmd->add_option("--out-prefix", ev->out_prefix, "Report path prefix");
    cmd->callback([ev] { run_evaluate(*ev); });
  }

  auto shift = std::make_shared<ShiftArgs>();
  {
    CLI::App* cmd = app.add_subcommand(
        "shift-analysis", "Per-speaker feature/label shift vs performance correlations");
    shift->common.attach(cmd);
    cmd->add_option("--corpus", shift->corpus, "Corpus manifest");
    cmd->add_option("--preds", shift->preds, "Predictions NDJSON");
    cmd->add_option("--checkpoint", shift->ckpt, "Model checkpoint (default finetune.ckpt)");
    cmd->add_option("--out-prefix", shift->out_prefix, "Report path prefix");
    cmd->callback([shift] { run_shift_analysis(*shift); });
  }

  auto gap = std::make_shared<GapArgs>();
  {
    CLI::App* cmd = app.add_subcommand(
        "gap", "Speaker-dependent vs speaker-independent personalization gap");
    gap->common.attach(cmd);
    cmd->add_option("--corpus", gap->corpus, "Corpus manifest");
    cmd->add_option("--k", gap->ks, "Ascending training-speaker subset sizes")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--encoder-config", gap->encoder_config, "EncoderConfig JSON");
    cmd->add_option("--pt-config", gap->pt_config,
                    "PretrainConfig JSON; all cells fine-tune from one shared pre-trained base");
    cmd->add_option("--ft-config", gap->ft_config, "FinetuneConfig JSON");
    cmd->add_option("--target", gap->target, "Affect dimension name")
        ->check(CLI::IsMember({"arousal", "valence"}))
        ->capture_default_str();
    cmd->add_option("--n-removed", gap->n_removed,
                    "Speakers dropped for the dependent cell (-1 = |test_a speakers|)")
        ->capture_default_str();
    cmd->add_flag("--no-test-a", gap->no_test_a, "Exclude adaptation data (diagnostic)");
    cmd->add_option("--out-prefix", gap->out_prefix, "Report path prefix");
    cmd->callback([gap] { run_gap(*gap); });
  }

  auto abl = std::make_shared<AblateArgs>();
  {
    CLI::App* cmd =
        app.add_subcommand("ablate-fusion", "Pre-train + fine-tune per fusion position");
    abl->common.attach(cmd);
    cmd->add_option("--corpus", abl->corpus, "Corpus manifest");
    cmd->add_option("--pseudo", abl->pseudo, "Reuse persisted pseudo-labels");
    cmd->add_option("--encoder-config", abl->encoder_config, "EncoderConfig JSON");
    cmd->add_option("--pt-config", abl->pt_config, "PretrainConfig JSON");
    cmd->add_option("--ft-config", abl->ft_config, "FinetuneConfig JSON");
    cmd->add_option("--target", abl->target, "Affect dimension name")
        ->check(CLI::IsMember({"arousal", "valence"}))
        ->capture_default_str();
    cmd->add_option("--out-prefix", abl->out_prefix, "Report path prefix");
    cmd->callback([abl] { run_ablate_fusion(*abl); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const TrainingError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
