// grasp: train adapters, learn a prune ratio, finalize, and run the grid
// search, ablations, and runtime report on the toy task.
//
// Exit codes: 0 ok, 1 internal error, 2 usage, 3 I/O, 4 numerical failure,
// 5 parse error, 6 artifact/config mismatch.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "grasp/commands.hpp"
#include "grasp/config.hpp"
#include "grasp/error.hpp"

namespace {

namespace fs = std::filesystem;

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kIo = 3,
  kNumerical = 4,
  kParse = 5,
  kMismatch = 6,
};

struct GlobalFlags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool force = false;
  std::vector<std::string> overrides;
};

grasp::cli::Context make_context(const GlobalFlags& g) {
  grasp::cli::Context ctx;
  if (g.config) {
    if (fs::exists(*g.config)) {
      ctx.cfg = grasp::parse_config_text(grasp::read_file(*g.config));
    } else {
      std::cerr << "note: config file " << *g.config << " not found, using defaults\n";
    }
  }
  for (const auto& o : g.overrides) grasp::apply_override(ctx.cfg, o);
  if (g.seed) ctx.cfg.seed = *g.seed;
  if (g.out) {
    ctx.out = *g.out;
  } else if (const char* root = std::getenv("GRASP_OUT_ROOT"); root != nullptr && *root != '\0') {
    ctx.out = root;
  } else {
    ctx.out = "grasp_runs";
  }
  ctx.force = g.force;
  return ctx;
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GRASP-LoRA toy pipeline"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "INI config file; missing file means defaults");
  app.add_option("--seed", g.seed, "Run seed (overrides run.seed)");
  app.add_option("--out", g.out, "Output root (default $GRASP_OUT_ROOT or ./grasp_runs)");
  app.add_flag("--force", g.force, "Overwrite existing phase outputs");
  app.add_option("--set", g.overrides, "Override a config key: section.key=value")->take_all();

  auto* train = app.add_subcommand("train-adapters", "Train source/target adapters and merge them");

  std::string merged;
  auto* controller = app.add_subcommand("controller", "Learn p* with interleaved controller rounds");
  controller->add_option("--merged-init", merged, "Merged-init checkpoint");

  std::string p_star_file;
  std::optional<double> p_star;
  auto* finalize = app.add_subcommand("finalize", "Prune once at p* and fine-tune");
  finalize->add_option("--merged-init", merged, "Merged-init checkpoint");
  finalize->add_option("--p-star-file", p_star_file, "p_star.json from the controller phase");
  finalize->add_option("--p-star", p_star, "Use this ratio instead of the p_star file");

  auto* grid = app.add_subcommand("grid", "Grid-search baseline over fixed prune ratios");
  grid->add_option("--merged-init", merged, "Merged-init checkpoint");

  grasp::cli::AblateOptions ablate_opts;
  std::optional<std::string> landscape;
  auto* ablate = app.add_subcommand("ablate", "Regularizer and micro-dev size ablations");
  ablate->add_option("--which", ablate_opts.which, "all, regularizers, or microdev");
  ablate->add_option("--landscape", landscape,
                     "Run on a synthetic reward instead of the toy task: quadratic:<p> or noisy-ceiling");
  ablate->add_option("--rounds", ablate_opts.rounds, "Controller rounds per synthetic-reward cell");

  std::size_t window = 10;
  auto* report = app.add_subcommand("report", "Runtime comparison, rolling p_curr, and baselines");
  report->add_option("--window", window, "Rolling window for p_curr statistics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    grasp::cli::Context ctx = make_context(g);
    if (train->parsed()) {
      grasp::cli::cmd_train_adapters(ctx);
    } else if (controller->parsed()) {
      grasp::cli::cmd_controller(ctx, opt_path(merged));
    } else if (finalize->parsed()) {
      grasp::cli::cmd_finalize(ctx, opt_path(merged), opt_path(p_star_file), p_star);
    } else if (grid->parsed()) {
      grasp::cli::cmd_grid(ctx, opt_path(merged));
    } else if (ablate->parsed()) {
      ablate_opts.landscape = landscape;
      grasp::cli::cmd_ablate(ctx, ablate_opts);
    } else if (report->parsed()) {
      grasp::cli::cmd_report(ctx, window);
    }
  } catch (const grasp::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const grasp::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const grasp::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const grasp::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kParse;
  } catch (const grasp::ArtifactMismatchError& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
