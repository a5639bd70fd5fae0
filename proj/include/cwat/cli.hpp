#pragma once

// Command-line driver: gen, train, attack, eval, report.
//
// Configuration is "section.key = value" text (sections run, data, detector,
// train, attack, eval); flags override the file. Every command writes the
// fully resolved configuration to <out>/config.txt, which can be passed back
// with --config to repeat the run.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cwat/attacks.hpp"
#include "cwat/checkpoint.hpp"
#include "cwat/data.hpp"
#include "cwat/detector.hpp"
#include "cwat/error.hpp"
#include "cwat/evaluation.hpp"
#include "cwat/text.hpp"
#include "cwat/training.hpp"

namespace cwat::cli {

namespace fs = std::filesystem;

/// Header of summary.csv written by `eval` and `report`.
inline constexpr const char* kSummaryHeader = "model,clean,fgsm_cls,fgsm_reg,pgd10_cls,pgd10_reg,cwa";

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string name;

  SceneSpec scene;
  std::size_t count = 0;
  std::uint64_t first_index = 0;
  bool has_image_size = false;

  DetectorConfig detector;
  TrainConfig train;
  AttackSpec attack;
  std::string attack_kind = "pgd";  // pgd | fgsm | mda
  EvalOptions eval;
  std::string eval_mode = "summary";  // summary | single

  /// Resolved attack, with the kind applied.
  AttackSpec resolved_attack() const {
    AttackSpec a = attack;
    a.seed = seed;
    if (attack_kind == "fgsm") {
      a.steps = 1;
      a.step_size = a.epsilon;
      a.random_start = false;
    }
    a.kind = attack_kind == "mda" ? AttackKind::mda : AttackKind::pgd;
    return a;
  }

  text::KeyValues echo() const {
    text::KeyValues kv;
    kv["run.seed"] = std::to_string(seed);
    kv["run.threads"] = std::to_string(threads);
    kv["run.name"] = name;
    kv["data.count"] = std::to_string(count);
    kv["data.first_index"] = std::to_string(first_index);
    for (const auto& [k, v] : scene.echo()) {
      if (k.rfind("scene.", 0) == 0) kv["data." + k.substr(6)] = v;
    }
    for (const auto& [k, v] : detector.echo()) kv["detector." + k] = v;
    for (const auto& [k, v] : train.echo()) {
      if (k != "seed" && k != "threads") kv["train." + k] = v;
    }
    kv["attack.kind"] = attack_kind;
    kv["attack.objective"] = objective_name(attack.objective);
    kv["attack.epsilon"] = text::format_double(attack.epsilon);
    kv["attack.steps"] = std::to_string(attack.steps);
    kv["attack.step_size"] = text::format_double(attack.step_size);
    kv["attack.beta_cls"] = text::format_double(attack.thresholds.beta_cls);
    kv["attack.beta_reg"] = text::format_double(attack.thresholds.beta_reg);
    kv["attack.beta_o"] = text::format_double(attack.thresholds.beta_o);
    kv["attack.random_start"] = attack.random_start ? "true" : "false";
    kv["attack.ohem_ratio"] = text::format_double(attack.ohem_ratio);
    kv["attack.class_wise_negatives"] = attack.loss_options.class_wise_negatives ? "true" : "false";
    kv["eval.iou"] = text::format_double(eval.iou_threshold);
    kv["eval.eleven_point"] = eval.eleven_point ? "true" : "false";
    kv["eval.mode"] = eval_mode;
    return kv;
  }
};

namespace detail {

inline double as_double(const std::string& key, const std::string& v) {
  const auto d = text::try_parse_double(v);
  if (!d) fail(ErrorCategory::config, key + ": expected a number, got '" + v + "'");
  return *d;
}

inline long long as_int(const std::string& key, const std::string& v, long long min = 0) {
  const auto d = text::try_parse_int(v);
  if (!d || *d < min) fail(ErrorCategory::config, key + ": expected an integer >= " + std::to_string(min) + ", got '" + v + "'");
  return *d;
}

inline bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorCategory::config, key + ": expected true or false, got '" + v + "'");
}

inline std::vector<int> as_ints(const std::string& key, const std::string& v) {
  if (text::trim(v).empty()) return {};
  std::vector<int> out;
  for (const auto& t : text::split(v, ',')) out.push_back(static_cast<int>(as_int(key, t)));
  return out;
}

}  // namespace detail

/// Validates every key against the schema and builds the run configuration.
inline RunConfig resolve_config(const text::KeyValues& kv) {
  using namespace detail;
  RunConfig rc;
  text::KeyValues detector_kv;
  for (const auto& [key, v] : kv) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) fail(ErrorCategory::config, "key '" + key + "' has no section (expected section.key)");
    const std::string section = key.substr(0, dot);
    const std::string k = key.substr(dot + 1);
    auto unknown = [&] { fail(ErrorCategory::config, "unknown config key '" + key + "'"); };
    if (section == "run") {
      if (k == "seed") rc.seed = static_cast<std::uint64_t>(as_int(key, v));
      else if (k == "threads") rc.threads = static_cast<std::size_t>(as_int(key, v));
      else if (k == "name") rc.name = v;
      else unknown();
    } else if (section == "data") {
      SceneSpec& s = rc.scene;
      if (k == "count") rc.count = static_cast<std::size_t>(as_int(key, v));
      else if (k == "first_index") rc.first_index = static_cast<std::uint64_t>(as_int(key, v));
      else if (k == "image_size") s.image_size = static_cast<std::size_t>(as_int(key, v, 1)), rc.has_image_size = true;
      else if (k == "num_classes") s.num_classes = static_cast<int>(as_int(key, v, 1));
      else if (k == "channels") s.channels = static_cast<std::size_t>(as_int(key, v, 1));
      else if (k == "min_objects") s.min_objects = static_cast<int>(as_int(key, v));
      else if (k == "max_objects") s.max_objects = static_cast<int>(as_int(key, v));
      else if (k == "class_weights") s.class_weights = cwat::detail::parse_double_list(key, v);
      else if (k == "composition") s.composition = as_ints(key, v);
      else if (k == "min_size") s.min_size = static_cast<int>(as_int(key, v));
      else if (k == "max_size") s.max_size = static_cast<int>(as_int(key, v));
      else if (k == "noise") s.noise = as_double(key, v);
      else unknown();
    } else if (section == "detector") {
      detector_kv[k] = v;
    } else if (section == "train") {
      TrainConfig& t = rc.train;
      if (k == "mode") t.mode = parse_mode(v);
      else if (k == "epochs") t.epochs = static_cast<int>(as_int(key, v, 1));
      else if (k == "batch_size") t.batch_size = static_cast<std::size_t>(as_int(key, v, 1));
      else if (k == "lr") t.lr = as_double(key, v);
      else if (k == "momentum") t.momentum = as_double(key, v);
      else if (k == "weight_decay") t.weight_decay = as_double(key, v);
      else if (k == "lr_decay_epochs") t.lr_decay_epochs = as_ints(key, v);
      else if (k == "lr_decay_factor") t.lr_decay_factor = as_double(key, v);
      else if (k == "replay") t.replay = static_cast<int>(as_int(key, v, 1));
      else if (k == "shared_delta") t.shared_delta = as_bool(key, v);
      else unknown();
    } else if (section == "attack") {
      AttackSpec& a = rc.attack;
      if (k == "kind") {
        if (v != "pgd" && v != "fgsm" && v != "mda") fail(ErrorCategory::config, key + ": expected pgd, fgsm or mda");
        rc.attack_kind = v;
      } else if (k == "objective") a.objective = parse_objective(v);
      else if (k == "epsilon") a.epsilon = as_double(key, v);
      else if (k == "steps") a.steps = static_cast<int>(as_int(key, v, 1));
      else if (k == "step_size") a.step_size = as_double(key, v);
      else if (k == "beta") a.thresholds = ClipThresholds::uniform(as_double(key, v));
      else if (k == "beta_cls") a.thresholds.beta_cls = as_double(key, v);
      else if (k == "beta_reg") a.thresholds.beta_reg = as_double(key, v);
      else if (k == "beta_o") a.thresholds.beta_o = as_double(key, v);
      else if (k == "random_start") a.random_start = as_bool(key, v);
      else if (k == "ohem_ratio") a.ohem_ratio = as_double(key, v);
      else if (k == "class_wise_negatives") a.loss_options.class_wise_negatives = as_bool(key, v);
      else unknown();
    } else if (section == "eval") {
      if (k == "iou") rc.eval.iou_threshold = as_double(key, v);
      else if (k == "eleven_point") rc.eval.eleven_point = as_bool(key, v);
      else if (k == "mode") {
        if (v != "summary" && v != "single") fail(ErrorCategory::config, key + ": expected summary or single");
        rc.eval_mode = v;
      } else unknown();
    } else {
      fail(ErrorCategory::config, "unknown config section '" + section + "' in key '" + key + "'");
    }
  }
  rc.detector = detector_config_from(detector_kv);
  if (rc.attack.epsilon < 0) fail(ErrorCategory::config, "attack.epsilon must be >= 0");
  rc.attack.validate();
  rc.train.seed = rc.seed;
  rc.train.threads = rc.threads;
  rc.train.attack = rc.attack;
  rc.eval.threads = rc.threads;
  rc.scene.seed = rc.seed;
  rc.scene.validate();
  if (!(rc.eval.iou_threshold > 0 && rc.eval.iou_threshold <= 1)) fail(ErrorCategory::config, "eval.iou must be in (0,1]");
  return rc;
}

// ---------------------------------------------------------------------------
// Checkpoint <-> training state

inline Checkpoint make_checkpoint(const RunConfig& rc, const TrainState& st, const std::vector<double>& mean) {
  Checkpoint ck;
  ck.config = rc.echo();
  ck.meta["mode"] = mode_name(rc.train.mode);
  ck.meta["epochs_done"] = std::to_string(st.epochs_done);
  ck.meta["updates"] = std::to_string(st.updates);
  ck.meta["mean"] = text::join_doubles(mean);
  for (const auto& [name, t] : st.params.tensors) ck.layers[name] = t;
  for (const auto& [name, t] : st.velocity) ck.layers["momentum/" + name] = t;
  for (std::size_t i = 0; i < st.deltas.size(); ++i) {
    ck.layers["delta/" + cwat::detail::stem(i)] = Tensor({st.deltas[i].size()}, st.deltas[i]);
  }
  return ck;
}

struct LoadedModel {
  DetectorConfig detector;
  TrainState state;
  std::vector<double> mean;
  std::string mode;
};

inline LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  LoadedModel m;
  text::KeyValues det;
  for (const auto& [k, v] : ck.config) {
    if (k.rfind("detector.", 0) == 0) det[k.substr(9)] = v;
  }
  m.detector = detector_config_from(det);
  auto meta = [&](const std::string& k) -> std::string {
    auto it = ck.meta.find(k);
    if (it == ck.meta.end()) fail(ErrorCategory::data, path + ": checkpoint lacks '" + k + "'");
    return it->second;
  };
  m.mode = meta("mode");
  m.state.epochs_done = static_cast<int>(detail::as_int("epochs_done", meta("epochs_done")));
  m.state.updates = static_cast<std::size_t>(detail::as_int("updates", meta("updates")));
  m.mean = cwat::detail::parse_double_list("mean", meta("mean"));
  for (const auto& [name, t] : ck.layers) {
    if (name.rfind("momentum/", 0) == 0) m.state.velocity[name.substr(9)] = t;
    else if (name.rfind("delta/", 0) == 0) m.state.deltas.push_back(t.data);
    else m.state.params.tensors[name] = t;
  }
  check_params(m.detector, m.state.params);
  return m;
}

/// Stamps the model's normalization onto every image.
inline void use_model_mean(Dataset& data, const std::vector<double>& mean) {
  data.mean = mean;
  for (Sample& s : data.samples) s.image.mean_shift = mean;
}

/// Truncates each pixel offset toward zero so the result is an 8-bit image
/// that stays inside the same l-infinity ball and [0, 255].
inline ImageTensor quantize_toward_clean(const ImageTensor& clean, const ImageTensor& adv) {
  ImageTensor out = adv;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = clean.pixels[i] + std::trunc(adv.pixels[i] - clean.pixels[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  RunConfig rc;
  fs::path out;
  bool force = false;
  std::string data;
  std::string checkpoint;
  std::string resume;
  std::string manifest;
  std::ostream* log = &std::cout;
};

inline void prepare_out(const Context& ctx, bool must_be_empty) {
  if (ctx.out.empty()) fail(ErrorCategory::config, "--out is required");
  if (must_be_empty && fs::exists(ctx.out) && !fs::is_empty(ctx.out)) {
    if (!ctx.force) fail(ErrorCategory::io, "output directory " + ctx.out.string() + " is not empty (use --force)");
    fs::remove_all(ctx.out);
  }
  fs::create_directories(ctx.out);
}

inline void write_echo(const Context& ctx, const std::string& command) {
  text::KeyValues kv = ctx.rc.echo();
  text::write_key_values((ctx.out / "config.txt").string(), kv);
  std::ofstream cmd(ctx.out / "command.txt");
  cmd << command << "\n";
}

inline Dataset require_dataset(const Context& ctx) {
  if (ctx.data.empty()) fail(ErrorCategory::config, "--data is required");
  if (!fs::exists(ctx.data)) fail(ErrorCategory::io, "dataset directory " + ctx.data + " does not exist");
  return load_dataset(ctx.data);
}

inline void cmd_gen(Context& ctx) {
  const RunConfig& rc = ctx.rc;
  if (!rc.has_image_size) fail(ErrorCategory::config, "missing required key 'data.image_size'");
  if (rc.count == 0) fail(ErrorCategory::config, "data.count must be >= 1");
  prepare_out(ctx, true);
  Dataset data = generate_dataset(rc.scene, rc.count, ctx.log, rc.first_index);
  save_dataset(data, ctx.out);
  const DatasetStats stats = dataset_stats(data.samples);
  write_histogram_csv((ctx.out / "stats_objects.csv").string(), stats.objects_per_image);
  write_histogram_csv((ctx.out / "stats_classes.csv").string(), stats.classes_per_image);
  write_echo(ctx, "gen");
  *ctx.log << "wrote " << data.size() << " images to " << ctx.out.string() << "\n";
}

inline void cmd_train(Context& ctx) {
  RunConfig& rc = ctx.rc;
  Dataset data = require_dataset(ctx);
  if (data.num_classes != rc.detector.num_classes) {
    fail(ErrorCategory::config, "dataset has " + std::to_string(data.num_classes) + " classes but detector.num_classes is " +
                                    std::to_string(rc.detector.num_classes));
  }
  rc.train.validate();
  prepare_out(ctx, false);
  write_echo(ctx, "train");

  std::optional<TrainState> start;
  std::vector<double> mean = data.mean;
  if (!ctx.resume.empty()) {
    LoadedModel m = load_model(ctx.resume);
    if (m.mode != mode_name(rc.train.mode)) {
      fail(ErrorCategory::state, "checkpoint was written by mode " + m.mode + ", not " + std::string(mode_name(rc.train.mode)));
    }
    if (!(m.detector == rc.detector)) fail(ErrorCategory::state, "checkpoint detector differs from the configuration");
    mean = m.mean;
    start = std::move(m.state);
  } else if (!ctx.checkpoint.empty()) {
    // Fine-tune: weights only, fresh optimizer state.
    LoadedModel m = load_model(ctx.checkpoint);
    if (!(m.detector == rc.detector)) fail(ErrorCategory::state, "checkpoint detector differs from the configuration");
    mean = m.mean;
    start = TrainState{};
    start->params = std::move(m.state.params);
  }
  use_model_mean(data, mean);

  std::size_t logged = 0;
  TrainResult res = train(rc.detector, data, rc.train, std::move(start), [&](const TrainState& st, TrainLog& log) {
    const std::string name = "epoch_" + cwat::detail::stem(static_cast<std::size_t>(st.epochs_done)) + ".ckpt";
    save_checkpoint(make_checkpoint(rc, st, mean), ctx.out / name);
    log.checkpoints.push_back(name);
    double loss = 0.0;
    for (std::size_t i = logged; i < log.steps.size(); ++i) loss += log.steps[i].loss;
    loss /= static_cast<double>(log.steps.size() - logged);
    logged = log.steps.size();
    *ctx.log << "epoch " << st.epochs_done << " loss " << text::format_double(loss) << "\n";
  });
  save_checkpoint(make_checkpoint(rc, res.state, mean), ctx.out / "model.ckpt");
  res.log.checkpoints.push_back("model.ckpt");
  res.log.write((ctx.out / "train_log.jsonl").string());
}

inline void cmd_attack(Context& ctx) {
  const RunConfig& rc = ctx.rc;
  if (ctx.checkpoint.empty()) fail(ErrorCategory::config, "--checkpoint is required");
  const LoadedModel m = load_model(ctx.checkpoint);
  Dataset data = require_dataset(ctx);
  const std::vector<double> file_mean = data.mean;
  use_model_mean(data, m.mean);
  const AttackSpec spec = rc.resolved_attack();
  spec.validate();
  prepare_out(ctx, true);

  Dataset adv;
  adv.num_classes = data.num_classes;
  adv.manifest = data.manifest;
  adv.manifest["attack"] = spec.tag();
  adv.manifest["attack.seed"] = std::to_string(spec.seed);
  adv.samples.resize(data.size());
  std::vector<text::KeyValues> sidecars(data.size());
  parallel_for(data.size(), resolve_threads(rc.threads), [&](std::size_t i) {
    const Sample& s = data.samples[i];
    AttackSpec a = spec;
    a.seed = spec.seed * 1000003ULL + i;
    const AttackResult r = run_attack(m.detector, m.state.params, s.image, s.truth, a);
    const ImageTensor q = quantize_toward_clean(s.image, r.image);
    double max_delta = 0.0;
    for (std::size_t p = 0; p < q.pixels.size(); ++p) max_delta = std::max(max_delta, std::abs(q.pixels[p] - s.image.pixels[p]));
    adv.samples[i] = {q, s.truth};
    text::KeyValues& sc = sidecars[i];
    sc["source"] = (fs::path(ctx.data) / "images" / (cwat::detail::stem(i) + ".png")).string();
    sc["attack"] = spec.tag();
    sc["seed"] = std::to_string(a.seed);
    sc["skipped"] = r.skipped ? "true" : "false";
    sc["gradient_passes"] = std::to_string(r.gradient_passes);
    sc["max_abs_delta"] = text::format_double(max_delta);
    if (r.cls_candidate_loss) {
      sc["mda.cls_loss"] = text::format_double(*r.cls_candidate_loss);
      sc["mda.reg_loss"] = text::format_double(*r.reg_candidate_loss);
      sc["mda.chose"] = r.chose_cls ? "cls" : "reg";
    }
  });
  // The saved set keeps the source normalization so it reloads like the clean set.
  adv.mean = file_mean;
  save_dataset(adv, ctx.out);
  fs::create_directories(ctx.out / "sidecars");
  for (std::size_t i = 0; i < sidecars.size(); ++i) {
    text::write_key_values((ctx.out / "sidecars" / (cwat::detail::stem(i) + ".txt")).string(), sidecars[i]);
  }
  write_echo(ctx, "attack");
  *ctx.log << "attacked " << adv.size() << " images (" << spec.tag() << ")\n";
}

/// The summary columns: clean, FGSM and PGD-10 on each task loss, and CWA PGD-10.
inline std::vector<std::pair<std::string, std::optional<AttackSpec>>> summary_attacks(const RunConfig& rc) {
  AttackSpec base = rc.attack;
  base.seed = rc.seed;
  base.kind = AttackKind::pgd;
  base.random_start = false;
  base.step_size = 0.0;
  auto make = [&](Objective o, int steps) {
    AttackSpec a = base;
    a.objective = o;
    a.steps = steps;
    if (steps == 1) a.step_size = a.epsilon;
    return std::optional<AttackSpec>(a);
  };
  return {{"clean", std::nullopt},
          {"fgsm_cls", make(Objective::cls_only, 1)},
          {"fgsm_reg", make(Objective::reg_only, 1)},
          {"pgd10_cls", make(Objective::cls_only, 10)},
          {"pgd10_reg", make(Objective::reg_only, 10)},
          {"cwa", make(Objective::class_wise, 10)}};
}

struct ModelEval {
  std::vector<EvalReport> reports;  // summary column order
};

inline ModelEval evaluate_summary(const RunConfig& rc, const LoadedModel& m, const Dataset& data, std::ostream* log) {
  ModelEval out;
  for (auto& [column, attack] : summary_attacks(rc)) {
    EvalReport r = evaluate(m.detector, m.state.params, data, attack, rc.eval);
    r.attack_tag = column;
    if (!out.reports.empty()) attach_evenness(r, out.reports.front());
    if (log) *log << column << " mAP " << text::format_double(r.map) << "\n";
    out.reports.push_back(std::move(r));
  }
  return out;
}

inline std::string summary_row(const std::string& model, const ModelEval& e) {
  std::string row = model;
  for (const auto& r : e.reports) row += "," + text::format_double(r.map);
  return row;
}

inline void cmd_eval(Context& ctx) {
  const RunConfig& rc = ctx.rc;
  if (ctx.checkpoint.empty()) fail(ErrorCategory::config, "--checkpoint is required");
  const LoadedModel m = load_model(ctx.checkpoint);
  Dataset data = require_dataset(ctx);
  use_model_mean(data, m.mean);
  prepare_out(ctx, false);
  write_echo(ctx, "eval");
  std::vector<EvalReport> reports;
  if (rc.eval_mode == "summary") {
    ModelEval e = evaluate_summary(rc, m, data, ctx.log);
    std::ofstream summary(ctx.out / "summary.csv");
    if (!summary) fail(ErrorCategory::io, "cannot write summary.csv");
    summary << kSummaryHeader << "\n" << summary_row(rc.name.empty() ? m.mode : rc.name, e) << "\n";
    reports = std::move(e.reports);
  } else {
    EvalReport clean = evaluate(m.detector, m.state.params, data, std::nullopt, rc.eval);
    const AttackSpec spec = rc.resolved_attack();
    spec.validate();
    EvalReport attacked = evaluate(m.detector, m.state.params, data, spec, rc.eval);
    attach_evenness(attacked, clean);
    if (!attacked.evenness) *ctx.log << "warning: evenness undefined (mean AP drop is not positive)\n";
    *ctx.log << "clean mAP " << text::format_double(clean.map) << ", " << attacked.attack_tag << " mAP "
             << text::format_double(attacked.map) << "\n";
    reports = {clean, attacked};
  }
  write_per_class_csv((ctx.out / "per_class.csv").string(), reports, m.detector.num_classes);
  for (const auto& r : reports) text::write_key_values((ctx.out / ("report_" + r.attack_tag + ".txt")).string(), r.to_kv());
}

/// Batch manifest: one "model_name = checkpoint_path" line per model.
inline void cmd_report(Context& ctx) {
  const RunConfig& rc = ctx.rc;
  if (ctx.manifest.empty()) fail(ErrorCategory::config, "--manifest is required");
  const text::KeyValues models = text::read_key_values(ctx.manifest);
  if (models.empty()) fail(ErrorCategory::config, ctx.manifest + " lists no models");
  const Dataset base = require_dataset(ctx);
  prepare_out(ctx, false);
  write_echo(ctx, "report");
  std::ofstream summary(ctx.out / "summary.csv");
  if (!summary) fail(ErrorCategory::io, "cannot write summary.csv");
  summary << kSummaryHeader << "\n";
  for (const auto& [name, path] : models) {
    const fs::path p = fs::path(path).is_absolute() ? fs::path(path) : fs::path(ctx.manifest).parent_path() / path;
    const LoadedModel m = load_model(p.string());
    Dataset data = base;
    use_model_mean(data, m.mean);
    *ctx.log << "model " << name << "\n";
    const ModelEval e = evaluate_summary(rc, m, data, ctx.log);
    summary << summary_row(name, e) << "\n";
    write_per_class_csv((ctx.out / ("per_class_" + name + ".csv")).string(), e.reports, m.detector.num_classes);
  }
}

/// Parses arguments and runs one command; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Class-aware adversarial training for a one-stage detector"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir, mode, objective;
  std::optional<double> epsilon;
  std::optional<int> steps;
  std::vector<std::string> sets;
  Context ctx;
  ctx.log = &out;
  app.add_option("--config", config_path, "config file (section.key = value)");
  app.add_option("--seed", seed, "run seed (run.seed)");
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--force", ctx.force, "replace a non-empty output directory");
  app.add_option("--mode", mode, "training mode: std, toat, owat, cwat, mtd, fast-cwat");
  app.add_option("--epsilon", epsilon, "attack budget in pixel units");
  app.add_option("--steps", steps, "attack steps");
  app.add_option("--objective", objective, "attack objective: total, cls_only, reg_only, task_clipped, object_wise, class_wise");
  app.add_option("--set", sets, "override one key, e.g. --set train.epochs=4");
  app.add_option("--data", ctx.data, "dataset directory");
  app.add_option("--checkpoint", ctx.checkpoint, "model checkpoint (train: initial weights)");
  app.add_option("--resume", ctx.resume, "train: resume from a per-epoch checkpoint");
  app.add_option("--manifest", ctx.manifest, "report: 'name = checkpoint' lines");
  for (const char* name : {"gen", "train", "attack", "eval", "report"}) app.add_subcommand(name);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error[config]: " << e.what() << "\n";
    return exit_code(ErrorCategory::config);
  }

  try {
    text::KeyValues kv;
    if (!config_path.empty()) kv = text::read_key_values(config_path);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) fail(ErrorCategory::config, "--set expects key=value, got '" + s + "'");
      kv[text::trim(s.substr(0, eq))] = text::trim(s.substr(eq + 1));
    }
    if (seed) kv["run.seed"] = std::to_string(*seed);
    if (!mode.empty()) kv["train.mode"] = mode;
    if (epsilon) kv["attack.epsilon"] = text::format_double(*epsilon);
    if (steps) kv["attack.steps"] = std::to_string(*steps);
    if (!objective.empty()) kv["attack.objective"] = objective;
    ctx.rc = resolve_config(kv);
    ctx.out = out_dir;
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen") cmd_gen(ctx);
    else if (cmd == "train") cmd_train(ctx);
    else if (cmd == "attack") cmd_attack(ctx);
    else if (cmd == "eval") cmd_eval(ctx);
    else cmd_report(ctx);
  } catch (const Error& e) {
    err << "error[" << category_name(e.category()) << "]: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const fs::filesystem_error& e) {
    err << "error[io]: " << e.what() << "\n";
    return exit_code(ErrorCategory::io);
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace cwat::cli
