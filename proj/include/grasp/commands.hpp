#pragma once

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grasp/baselines.hpp"
#include "grasp/checkpoint.hpp"
#include "grasp/config.hpp"
#include "grasp/error.hpp"
#include "grasp/harness.hpp"
#include "grasp/hashing.hpp"
#include "grasp/reward_oracle.hpp"
#include "grasp/run_log.hpp"

namespace grasp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct Context {
  RunConfig cfg;
  fs::path out;
  bool force = false;
  std::ostream* msg = &std::cout;
};

inline std::string file_digest(const fs::path& path) { return to_hex(fnv1a(read_file(path))); }

inline json read_json_file(const fs::path& path, const char* what) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string(what) + " " + path.string() + " is malformed: " + e.what());
  }
}

inline double wall_clock_now() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

inline std::string host_name() {
  char buf[256] = {};
  if (gethostname(buf, sizeof buf - 1) != 0) return "unknown";
  return buf;
}

// One phase directory under the output root. Tracks every deterministic
// output with its digest; timing goes to a separate file.
class PhaseOutput {
 public:
  PhaseOutput(const Context& ctx, std::string phase)
      : ctx_(ctx), phase_(std::move(phase)), dir_(ctx.out / phase_) {
    std::error_code ec;
    if (fs::exists(dir_ / "manifest.json", ec) || fs::exists(dir_ / "config.ini", ec)) {
      if (!ctx.force) {
        throw UsageError("outputs already exist in " + dir_.string() +
                         "; pass --force to overwrite");
      }
      fs::remove_all(dir_, ec);
      if (ec) throw IoError("cannot clear " + dir_.string() + ": " + ec.message());
    }
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) {
      throw IoError("cannot create output directory " + dir_.string() +
                    (ec ? ": " + ec.message() : std::string()));
    }
    timing_["host"] = host_name();
    timing_["started_at"] = wall_clock_now();
  }

  const fs::path& dir() const noexcept { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  void write(const std::string& name, std::string_view data) {
    write_file(path(name), data);
    outputs_[name] = to_hex(fnv1a(data));
  }

  // For files written incrementally (the round log).
  void record(const std::string& name) { outputs_[name] = file_digest(path(name)); }

  void parent(const std::string& role, const fs::path& file, const std::string& phase_hash) {
    parents_.push_back({{"role", role},
                        {"path", fs::relative(file, ctx_.out).lexically_normal().generic_string()},
                        {"digest", file_digest(file)},
                        {"phase_hash", phase_hash}});
  }

  json& derived() { return derived_; }
  json& timing() { return timing_; }

  void finish() {
    write("config.ini", canonical_text(ctx_.cfg));
    timing_["finished_at"] = wall_clock_now();
    write_file(path("timing.json"), timing_.dump(2) + "\n");
    json manifest;
    manifest["phase"] = phase_;
    manifest["seed"] = ctx_.cfg.seed;
    manifest["config"] = "config.ini";
    manifest["config_hash"] = config_hash(ctx_.cfg);
    manifest["parents"] = parents_;
    manifest["outputs"] = outputs_;
    manifest["derived"] = derived_;
    manifest["timing"] = "timing.json";
    write_file(path("manifest.json"), manifest.dump(2) + "\n");
  }

 private:
  const Context& ctx_;
  std::string phase_;
  fs::path dir_;
  std::map<std::string, std::string> outputs_;
  json parents_ = json::array();
  json derived_ = json::object();
  json timing_ = json::object();
};

inline fs::path default_merged_init(const Context& ctx) {
  return ctx.out / "adapters" / "merged_init.gck";
}

// Loads a checkpoint and insists it was produced by the expected phase under
// the settings the current config implies.
inline Checkpoint load_parent(const fs::path& path, const std::string& kind,
                              const std::string& expected_hash, const char* producer) {
  if (!fs::exists(path)) {
    throw UsageError(kind + " checkpoint not found at " + path.string() + "; run `" + producer +
                     "` first");
  }
  Checkpoint ck = read_checkpoint(path);
  if (ck.meta.kind != kind) {
    throw ArtifactMismatchError(path.string() + " holds a '" + ck.meta.kind + "' checkpoint, expected '" +
                                kind + "'");
  }
  if (ck.meta.config_hash != expected_hash) {
    throw ArtifactMismatchError(path.string() + " was produced with config hash " +
                                ck.meta.config_hash + " but the current settings hash to " +
                                expected_hash);
  }
  return ck;
}

inline GraspInputs inputs_for(const RunConfig& cfg, const MergedAdapterSet& merged,
                              std::size_t m) {
  const ToyData data = gen_toy_data(cfg.task, data_seed(cfg.seed));
  return make_grasp_inputs(data, merged, m);
}

struct TrainAdaptersResult {
  double source_final_loss = 0.0;
  double target_final_loss = 0.0;
};

inline TrainAdaptersResult cmd_train_adapters(const Context& ctx) {
  ctx.cfg.validate();
  PhaseOutput out(ctx, "adapters");
  const auto t0 = std::chrono::steady_clock::now();
  const Phase1Result p1 = train_and_merge(ctx.cfg.task, ctx.cfg.lora, ctx.cfg.train, ctx.cfg.seed);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::string hash = phase_hash(ctx.cfg, "adapters");
  out.write("source.gck", encode_checkpoint(as_parameter_set(p1.source.adapters), {"source", hash}));
  out.write("target.gck", encode_checkpoint(as_parameter_set(p1.target.adapters), {"target", hash}));
  out.write("merged_init.gck", encode_checkpoint(p1.merged_init, {"merged-init", hash}));
  json summary = {{"phase_hash", hash},
                  {"source", {{"initial_loss", p1.source.initial_loss},
                              {"final_loss", p1.source.final_loss},
                              {"steps", p1.source.steps}}},
                  {"target", {{"initial_loss", p1.target.initial_loss},
                              {"final_loss", p1.target.final_loss},
                              {"steps", p1.target.steps}}}};
  out.write("adapters.json", summary.dump(2) + "\n");
  out.derived()["phase_hash"] = hash;
  out.timing()["seconds"] = seconds;
  out.finish();
  *ctx.msg << "adapters written to " << out.dir().string() << " (source loss "
           << format_real(p1.source.final_loss) << ", target loss "
           << format_real(p1.target.final_loss) << ")\n";
  return {p1.source.final_loss, p1.target.final_loss};
}

struct ControllerCmdResult {
  double p_star = 0.0;
  std::size_t rounds = 0;
  std::size_t commits = 0;
};

inline ControllerCmdResult cmd_controller(const Context& ctx,
                                          std::optional<fs::path> merged_path = std::nullopt) {
  const RunConfig& cfg = ctx.cfg;
  cfg.validate();
  const fs::path merged_file = merged_path.value_or(default_merged_init(ctx));
  const Checkpoint merged =
      load_parent(merged_file, "merged-init", phase_hash(cfg, "adapters"), "train-adapters");
  const GraspInputs in = inputs_for(cfg, merged.params, cfg.controller.microdev);

  PhaseOutput out(ctx, "controller");
  out.parent("merged_init", merged_file, merged.meta.config_hash);
  const std::string hash = phase_hash(cfg, "controller");

  TrainConfig phase2 = cfg.train;
  phase2.epochs = cfg.controller.epochs;
  const std::size_t budget = total_steps(in.train.size(), phase2);
  json header = {{"phase_hash", hash},
                 {"config_hash", config_hash(cfg)},
                 {"total_steps", budget},
                 {"total_steps_rule", "epochs * ceil(n_train / batch_size)"},
                 {"epochs", cfg.controller.epochs},
                 {"n_train", in.train.size()},
                 {"batch_size", cfg.train.batch_size},
                 {"interval", cfg.controller.interval},
                 {"expected_rounds", budget / cfg.controller.interval},
                 {"microdev_m", cfg.controller.microdev},
                 {"importance_scale", in.scale.value()},
                 {"dropout",
                  "off: the toy model is deterministic, lora_dropout is recorded but not applied"}};
  out.write("round_log.header.json", header.dump(2) + "\n");

  PolicyLearningResult res;
  double seconds = 0.0;
  {
    RoundLogWriter log(out.path("round_log.jsonl"));
    PolicyLearningOptions opts{cfg.controller, cfg.train, derive_seed(cfg.seed, "phase2"), false,
                               [&log](const ControllerRecord& r) { log.append(r); }};
    const auto t0 = std::chrono::steady_clock::now();
    res = sparsity_policy_learning(in.merged_init, in.scale, in.train, in.microdev, opts);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  out.record("round_log.jsonl");
  out.write("rounds.csv", round_summary_csv(res.log));

  std::size_t commits = 0;
  for (const auto& r : res.log) commits += r.committed;
  out.timing()["seconds"] = seconds;
  out.timing()["steps"] = res.steps;
  out.timing()["runs"] = 1;
  out.derived()["phase_hash"] = hash;
  out.derived()["rounds"] = res.log.size();
  out.derived()["commits"] = commits;

  if (res.aborted || !std::isfinite(res.p_star)) {
    out.finish();
    throw NumericalError("controller run aborted after " + std::to_string(res.steps) +
                         " steps: " + res.abort_reason + "; partial log kept in " +
                         out.path("round_log.jsonl").string());
  }
  const PStarChoice choice = select_p_star_detail(res.log);
  json pstar = {{"p_star", choice.p},
                {"implied_reward", choice.implied_reward},
                {"round", choice.round},
                {"rounds", res.log.size()},
                {"commits", commits},
                {"phase_hash", hash}};
  out.write("p_star.json", pstar.dump(2) + "\n");
  out.finish();
  *ctx.msg << "p* = " << format_real(choice.p) << " (rounds " << res.log.size() << ", commits "
           << commits << ")\n";
  return {choice.p, res.log.size(), commits};
}

inline double read_p_star(const fs::path& path, const std::string& expected_hash) {
  if (!fs::exists(path)) {
    throw UsageError("p_star file not found at " + path.string() + "; run `controller` first");
  }
  const json j = read_json_file(path, "p_star file");
  if (!j.is_object() || !j.contains("p_star") || !j["p_star"].is_number() ||
      !j.contains("phase_hash") || !j["phase_hash"].is_string()) {
    throw ParseError("p_star file " + path.string() + " is malformed: needs numeric p_star and phase_hash");
  }
  if (j["phase_hash"].get<std::string>() != expected_hash) {
    throw ArtifactMismatchError("p_star file " + path.string() + " was produced with hash " +
                                j["phase_hash"].get<std::string>() +
                                " but the current settings hash to " + expected_hash);
  }
  return j["p_star"].get<double>();
}

struct FinalizeCmdResult {
  double p_star = 0.0;
  double dev_loss = 0.0;
  double test_loss = 0.0;
};

inline FinalizeCmdResult cmd_finalize(const Context& ctx,
                                      std::optional<fs::path> merged_path = std::nullopt,
                                      std::optional<fs::path> p_star_path = std::nullopt,
                                      std::optional<double> p_star_override = std::nullopt) {
  const RunConfig& cfg = ctx.cfg;
  cfg.validate();
  const fs::path merged_file = merged_path.value_or(default_merged_init(ctx));
  const Checkpoint merged =
      load_parent(merged_file, "merged-init", phase_hash(cfg, "adapters"), "train-adapters");
  const std::string hash = phase_hash(cfg, "finalize");
  const fs::path p_file = p_star_path.value_or(ctx.out / "controller" / "p_star.json");
  const double p_star = p_star_override ? *p_star_override : read_p_star(p_file, hash);
  const GraspInputs in = inputs_for(cfg, merged.params, cfg.controller.microdev);

  PhaseOutput out(ctx, "finalize");
  out.parent("merged_init", merged_file, merged.meta.config_hash);
  if (!p_star_override) out.parent("p_star", p_file, hash);

  const auto t0 = std::chrono::steady_clock::now();
  const FinetuneResult fin =
      final_prune_finetune(in.merged_init, p_star, cfg.controller, in.scale, in.train, in.dev,
                           in.test, {cfg.train, derive_seed(cfg.seed, "phase3"), false});
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json extra = {{"p_star", p_star}};
  out.write("final.gck", encode_checkpoint(fin.params, {"final", hash, extra}));
  out.write("mask.csv", mask_csv(fin.mask));
  json fractions = json::array();
  for (std::size_t t = 0; t < fin.mask.tensor_count(); ++t) {
    fractions.push_back({{"tensor_id", t},
                         {"d", fin.mask.keep[t].size()},
                         {"k", fin.mask.k[t]},
                         {"fraction", fin.mask.realized_fraction[t]}});
  }
  json report = {{"p_star", p_star},
                 {"dev_loss_initial", fin.dev_loss_initial},
                 {"dev_loss", fin.dev_loss},
                 {"test_loss", fin.test_loss},
                 {"steps", fin.steps},
                 {"budget_steps", fin.budget_steps},
                 {"stopped_early", fin.stopped_early},
                 {"realized_fraction", fractions},
                 {"start_matches_merged_init", fin.start_checksum == checksum(merged.params)},
                 {"mask_fixed", fin.mask_checksum_first == fin.mask_checksum_last},
                 {"phase_hash", hash}};
  out.write("report.json", report.dump(2) + "\n");
  out.timing()["seconds"] = seconds;
  out.timing()["steps"] = fin.steps;
  out.timing()["runs"] = 1;
  out.derived()["phase_hash"] = hash;
  out.finish();
  *ctx.msg << "final run at p = " << format_real(p_star) << ": dev loss "
           << format_real(fin.dev_loss) << ", test loss " << format_real(fin.test_loss) << "\n";
  return {p_star, fin.dev_loss, fin.test_loss};
}

inline GridResult cmd_grid(const Context& ctx, std::optional<fs::path> merged_path = std::nullopt) {
  const RunConfig& cfg = ctx.cfg;
  cfg.validate();
  const fs::path merged_file = merged_path.value_or(default_merged_init(ctx));
  const Checkpoint merged =
      load_parent(merged_file, "merged-init", phase_hash(cfg, "adapters"), "train-adapters");
  const GraspInputs in = inputs_for(cfg, merged.params, cfg.controller.microdev);

  PhaseOutput out(ctx, "grid");
  out.parent("merged_init", merged_file, merged.meta.config_hash);
  GridResult grid = grid_search(in, cfg.grid, cfg.train, cfg.seed);
  out.write("grid.csv", grid_csv(grid));
  json best = {{"best_p", grid.best_index ? json(grid.best_p) : json(nullptr)},
               {"runs", grid.points.size()},
               {"failed", json::array()},
               {"phase_hash", phase_hash(cfg, "grid")}};
  json per_ratio = json::array();
  for (const auto& pt : grid.points) {
    if (pt.failed) best["failed"].push_back({{"p", pt.p}, {"error", pt.error}});
    per_ratio.push_back({{"p", pt.p}, {"seconds", pt.seconds}});
  }
  out.write("grid.json", best.dump(2) + "\n");
  out.timing()["seconds"] = grid.total_seconds;
  out.timing()["steps"] = grid.total_steps;
  out.timing()["runs"] = grid.points.size();
  out.timing()["per_ratio"] = per_ratio;
  out.derived()["phase_hash"] = phase_hash(cfg, "grid");
  out.finish();
  *ctx.msg << "grid: " << grid.points.size() << " runs, best p = "
           << (grid.best_index ? format_real(grid.best_p) : std::string("none")) << "\n";
  return grid;
}

// "quadratic:<target>" or "noisy-ceiling".
inline RewardLandscape parse_landscape(const std::string& name, double noise_scale = 1.0) {
  if (name == "noisy-ceiling") {
    RewardLandscape l = noisy_ceiling_landscape();
    auto base = l.noise_std;
    l.noise_std = [base, noise_scale](double p) { return base(p) * noise_scale; };
    return l;
  }
  if (name.rfind("quadratic:", 0) == 0) {
    try {
      return quadratic_landscape(detail::parse_real(name.substr(10)), 0.01 * noise_scale);
    } catch (const ConfigError&) {
    }
  }
  throw UsageError("unknown landscape '" + name + "' (expected quadratic:<p> or noisy-ceiling)");
}

struct AblateOptions {
  std::string which = "all";  // all | regularizers | microdev
  std::optional<std::string> landscape;
  std::size_t rounds = 100;
};

inline void cmd_ablate(const Context& ctx, const AblateOptions& opt) {
  const RunConfig& cfg = ctx.cfg;
  cfg.validate();
  if (opt.which != "all" && opt.which != "regularizers" && opt.which != "microdev") {
    throw UsageError("--which must be all, regularizers, or microdev");
  }
  if (opt.landscape) parse_landscape(*opt.landscape);
  PhaseOutput out(ctx, "ablate");
  ToyPipeline toy(cfg.task, cfg.lora, cfg.train);
  const auto t0 = std::chrono::steady_clock::now();

  if (opt.which != "microdev") {
    RegularizerRunner run;
    if (opt.landscape) {
      const RewardLandscape land = parse_landscape(*opt.landscape);
      run = [land, &opt](const ControllerConfig& c, std::uint64_t seed) {
        return CellOutcome{run_controller_on_oracle(land, c, opt.rounds, seed).p_star,
                           std::numeric_limits<double>::quiet_NaN()};
      };
    } else {
      run = [&toy](const ControllerConfig& c, std::uint64_t seed) { return toy.run(c, seed); };
    }
    const RegularizerTable table =
        ablate_regularizers(cfg.controller, cfg.ablation.sweep, cfg.ablation.seeds, run);
    out.write("regularizers.csv", regularizer_csv(table));
    out.derived()["drift_toward_pmax"] =
        table.drift_toward_pmax ? json(*table.drift_toward_pmax) : json(nullptr);
    *ctx.msg << "regularizer sweep: " << table.rows.size() << " rows";
    if (table.drift_toward_pmax) {
      *ctx.msg << ", (0,0) vs default p* drift toward p_max: "
               << (*table.drift_toward_pmax ? "yes" : "no");
    }
    *ctx.msg << "\n";
  }
  if (opt.which != "regularizers") {
    MicrodevRunner run;
    if (opt.landscape) {
      const std::string name = *opt.landscape;
      run = [name, &opt, &cfg](std::size_t m, std::uint64_t seed) {
        ControllerConfig c = cfg.controller;
        c.microdev = m;
        // Reward noise of a mean over m examples scales as 1/sqrt(m).
        const RewardLandscape land = parse_landscape(name, std::sqrt(16.0 / static_cast<double>(m)));
        return CellOutcome{run_controller_on_oracle(land, c, opt.rounds, seed).p_star,
                           std::numeric_limits<double>::quiet_NaN()};
      };
    } else {
      run = [&toy, &cfg](std::size_t m, std::uint64_t seed) {
        ControllerConfig c = cfg.controller;
        c.microdev = m;
        return toy.run(c, seed);
      };
    }
    const auto rows = ablate_microdev(cfg.ablation.microdev_sizes, cfg.ablation.seeds,
                                      cfg.task.microdev_pool_n, cfg.task.target_train_n, run);
    out.write("microdev.csv", microdev_csv(rows));
    *ctx.msg << "micro-dev sweep: " << rows.size() << " rows\n";
  }
  out.derived()["landscape"] = opt.landscape ? json(*opt.landscape) : json("toy");
  out.timing()["seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.finish();
}

struct ReportCmdResult {
  std::pair<RuntimeReport, RuntimeReport> runtime;
  bool serialized = false;
};

inline ReportCmdResult cmd_report(const Context& ctx, std::size_t window = 10) {
  const RunConfig& cfg = ctx.cfg;
  cfg.validate();
  const std::vector<std::pair<fs::path, const char*>> needed = {
      {ctx.out / "adapters" / "manifest.json", "train-adapters"},
      {ctx.out / "controller" / "round_log.jsonl", "controller"},
      {ctx.out / "controller" / "timing.json", "controller"},
      {ctx.out / "finalize" / "timing.json", "finalize"},
      {ctx.out / "grid" / "timing.json", "grid"}};
  std::string missing;
  for (const auto& [path, cmd] : needed) {
    if (!fs::exists(path)) missing += "\n  " + path.string() + " (run `" + cmd + "`)";
  }
  if (!missing.empty()) throw UsageError("report needs outputs that do not exist yet:" + missing);

  // All compared phases must descend from the same merged init.
  std::optional<std::string> merged_digest;
  for (const char* phase : {"controller", "finalize", "grid"}) {
    const json m = read_json_file(ctx.out / phase / "manifest.json", "manifest");
    for (const auto& p : m.at("parents")) {
      if (p.at("role") != "merged_init") continue;
      const std::string d = p.at("digest").get<std::string>();
      if (merged_digest && *merged_digest != d) {
        throw ArtifactMismatchError(std::string("phase ") + phase +
                                    " used a different merged init than the other phases");
      }
      merged_digest = d;
    }
  }

  PhaseOutput out(ctx, "report");
  const json tc = read_json_file(ctx.out / "controller" / "timing.json", "timing file");
  const json tf = read_json_file(ctx.out / "finalize" / "timing.json", "timing file");
  const json tg = read_json_file(ctx.out / "grid" / "timing.json", "timing file");
  MethodCost grasp{2, tc.at("steps").get<std::size_t>() + tf.at("steps").get<std::size_t>(),
                   tc.at("seconds").get<double>() + tf.at("seconds").get<double>()};
  MethodCost grid{tg.at("runs").get<std::size_t>(), tg.at("steps").get<std::size_t>(),
                  tg.at("seconds").get<double>()};
  ReportCmdResult res{runtime_report(grasp, grid, cfg.dataset), false};

  // Serialized on one host: the three timed phases never overlapped.
  std::vector<std::pair<double, double>> spans;
  bool same_host = true;
  for (const json* t : {&tc, &tf, &tg}) {
    spans.emplace_back(t->at("started_at").get<double>(), t->at("finished_at").get<double>());
    same_host = same_host && t->at("host") == tc.at("host");
  }
  std::sort(spans.begin(), spans.end());
  res.serialized = same_host;
  for (std::size_t i = 1; i < spans.size(); ++i)
    res.serialized = res.serialized && spans[i].first >= spans[i - 1].second;

  const auto log = parse_round_log(read_file(ctx.out / "controller" / "round_log.jsonl"));
  if (log.empty()) throw UsageError("controller round log is empty; rerun `controller`");
  out.write("rolling_pcurr.csv", rolling_csv(rolling_pcurr(log, window)));

  const fs::path merged_file = default_merged_init(ctx);
  const Checkpoint merged =
      load_parent(merged_file, "merged-init", phase_hash(cfg, "adapters"), "train-adapters");
  const Checkpoint target = load_parent(ctx.out / "adapters" / "target.gck", "target",
                                        phase_hash(cfg, "adapters"), "train-adapters");
  const GraspInputs in = inputs_for(cfg, merged.params, cfg.controller.microdev);
  out.write("baselines.csv", baselines_csv(run_noprune_baselines(target.params, in, cfg.train, cfg.seed)));

  // Timing-derived, so kept beside the deterministic outputs rather than in
  // the manifest.
  write_file(out.path("runtime.csv"), runtime_csv(res.runtime));
  out.timing()["serialized_on_one_host"] = res.serialized;
  out.timing()["reference_band"] = kReferenceBand;
  out.finish();

  *ctx.msg << runtime_csv(res.runtime);
  char line[160];
  std::snprintf(line, sizeof line, "speedup: %.2f× wall-clock, %.2f× optimizer steps (reference band %s)\n",
                res.runtime.second.speedup, res.runtime.second.step_speedup, kReferenceBand);
  *ctx.msg << line;
  if (!res.serialized) *ctx.msg << "warning: timed phases overlapped or ran on different hosts\n";
  return res;
}

}  // namespace grasp::cli
