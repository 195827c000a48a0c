#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "grasp/baselines.hpp"
#include "grasp/controller.hpp"
#include "grasp/error.hpp"
#include "grasp/format.hpp"
#include "grasp/harness.hpp"
#include "grasp/hashing.hpp"
#include "grasp/toy_task.hpp"

namespace grasp {

struct AblationSpec {
  std::vector<RegularizerCell> sweep = default_regularizer_sweep();
  std::vector<std::size_t> microdev_sizes{4, 8, 16, 32};
  std::vector<std::uint64_t> seeds{0};
};

// Everything a run depends on. Layering: built-in defaults, then the config
// file, then command-line overrides.
struct RunConfig {
  ToyTaskConfig task;
  LoraConfig lora;
  TrainConfig train;
  ControllerConfig controller;
  GridSpec grid;
  AblationSpec ablation;
  std::uint64_t seed = 0;
  std::string dataset = "toy";

  void validate() const {
    task.validate();
    train.validate();
    controller.validate();
    grid.validate();
    if (lora.rank == 0) throw UsageError("training.lora_rank must be >= 1");
    if (!(lora.alpha > 0.0)) throw UsageError("training.lora_alpha must be > 0");
    if (controller.microdev > task.microdev_pool_n) {
      throw UsageError("controller.m = " + std::to_string(controller.microdev) +
                       " exceeds task.microdev_pool_n = " + std::to_string(task.microdev_pool_n));
    }
    if (ablation.seeds.empty()) throw UsageError("ablation.seeds must not be empty");
  }
};

class ConfigError : public ParseError {
 public:
  using ParseError::ParseError;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    out.push_back(trim(s.substr(pos, next - pos)));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

inline double parse_real(const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return x;
}

inline std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

template <class T>
std::string join(const std::vector<T>& v, const char* sep, std::function<std::string(const T&)> f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += f(v[i]);
  }
  return out;
}

inline std::string variant_label(double beta, double tau) {
  for (const auto& c : default_regularizer_sweep())
    if (c.beta == beta && c.tau == tau) return c.variant;
  return "beta=" + format_real(beta) + " tau=" + format_real(tau);
}

struct ConfigKey {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define GRASP_REAL(sec, name, field)                                            \
  ConfigKey{sec, name, [](const RunConfig& c) { return format_real(c.field); }, \
            [](RunConfig& c, const std::string& v) { c.field = parse_real(v); }}
#define GRASP_UINT(sec, name, field)                                                 \
  ConfigKey{sec, name, [](const RunConfig& c) { return std::to_string(c.field); }, \
            [](RunConfig& c, const std::string& v) {                                  \
              c.field = static_cast<decltype(c.field)>(parse_uint(v));                \
            }}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      GRASP_UINT("task", "d_in", task.d_in),
      GRASP_UINT("task", "d_out", task.d_out),
      GRASP_UINT("task", "n_sites", task.n_sites),
      GRASP_UINT("task", "true_rank", task.true_rank),
      GRASP_REAL("task", "perturbation_rms", task.perturbation_rms),
      GRASP_UINT("task", "source_train_n", task.source_train_n),
      GRASP_UINT("task", "target_train_n", task.target_train_n),
      GRASP_UINT("task", "dev_n", task.dev_n),
      GRASP_UINT("task", "microdev_pool_n", task.microdev_pool_n),
      GRASP_UINT("task", "test_n", task.test_n),
      GRASP_REAL("task", "noise_std", task.noise_std),
      GRASP_REAL("task", "interference", task.interference),

      GRASP_REAL("training", "lr", train.adamw.lr),
      GRASP_REAL("training", "beta1", train.adamw.beta1),
      GRASP_REAL("training", "beta2", train.adamw.beta2),
      GRASP_REAL("training", "eps", train.adamw.eps),
      GRASP_REAL("training", "weight_decay", train.adamw.weight_decay),
      GRASP_UINT("training", "batch_size", train.batch_size),
      GRASP_UINT("training", "epochs", train.epochs),
      GRASP_UINT("training", "patience", train.patience),
      GRASP_UINT("training", "eval_interval", train.eval_interval),
      ConfigKey{"training", "dropout_enabled",
                [](const RunConfig& c) { return std::string(c.train.dropout_enabled ? "true" : "false"); },
                [](RunConfig& c, const std::string& v) { c.train.dropout_enabled = parse_bool(v); }},
      GRASP_UINT("training", "lora_rank", lora.rank),
      GRASP_REAL("training", "lora_alpha", lora.alpha),
      GRASP_REAL("training", "lora_dropout", lora.dropout),

      GRASP_REAL("controller", "p_min", controller.p_min),
      GRASP_REAL("controller", "p_max", controller.p_max),
      GRASP_REAL("controller", "p_init", controller.p_init),
      GRASP_UINT("controller", "K", controller.interval),
      GRASP_UINT("controller", "C", controller.candidates),
      GRASP_UINT("controller", "m", controller.microdev),
      GRASP_REAL("controller", "eta", controller.eta),
      GRASP_REAL("controller", "beta", controller.beta),
      GRASP_REAL("controller", "tau", controller.tau_ent),
      GRASP_REAL("controller", "delta_max", controller.delta_max),
      GRASP_UINT("controller", "epochs", controller.epochs),
      GRASP_REAL("controller", "sigma_floor", controller.sigma_floor),

      ConfigKey{"grid", "ratios",
                [](const RunConfig& c) {
                  return join<double>(c.grid.ratios, ", ", [](const double& x) { return format_real(x); });
                },
                [](RunConfig& c, const std::string& v) {
                  c.grid.ratios.clear();
                  for (const auto& part : split(v, ',')) c.grid.ratios.push_back(parse_real(part));
                }},

      ConfigKey{"ablation", "sweep",
                [](const RunConfig& c) {
                  return join<RegularizerCell>(c.ablation.sweep, ", ", [](const RegularizerCell& x) {
                    return format_real(x.beta) + "/" + format_real(x.tau);
                  });
                },
                [](RunConfig& c, const std::string& v) {
                  c.ablation.sweep.clear();
                  for (const auto& part : split(v, ',')) {
                    const auto bt = split(part, '/');
                    if (bt.size() != 2) throw ConfigError("sweep cells are beta/tau, got '" + part + "'");
                    const double beta = parse_real(bt[0]);
                    const double tau = parse_real(bt[1]);
                    c.ablation.sweep.push_back({variant_label(beta, tau), beta, tau});
                  }
                }},
      ConfigKey{"ablation", "microdev_sizes",
                [](const RunConfig& c) {
                  return join<std::size_t>(c.ablation.microdev_sizes, ", ",
                                           [](const std::size_t& x) { return std::to_string(x); });
                },
                [](RunConfig& c, const std::string& v) {
                  c.ablation.microdev_sizes.clear();
                  for (const auto& part : split(v, ','))
                    c.ablation.microdev_sizes.push_back(static_cast<std::size_t>(parse_uint(part)));
                }},
      ConfigKey{"ablation", "seeds",
                [](const RunConfig& c) {
                  return join<std::uint64_t>(c.ablation.seeds, ", ",
                                             [](const std::uint64_t& x) { return std::to_string(x); });
                },
                [](RunConfig& c, const std::string& v) {
                  c.ablation.seeds.clear();
                  for (const auto& part : split(v, ',')) c.ablation.seeds.push_back(parse_uint(part));
                }},

      GRASP_UINT("run", "seed", seed),
      ConfigKey{"run", "dataset", [](const RunConfig& c) { return c.dataset; },
                [](RunConfig& c, const std::string& v) {
                  if (v.empty() || v.find(',') != std::string::npos) {
                    throw ConfigError("dataset must be a non-empty name without commas");
                  }
                  c.dataset = v;
                }},
  };
  return keys;
}

#undef GRASP_REAL
#undef GRASP_UINT

inline const ConfigKey& find_key(const std::string& section, const std::string& key) {
  for (const auto& k : config_keys())
    if (section == k.section && key == k.key) return k;
  throw ConfigError("unknown config key " + section + "." + key);
}

}  // namespace detail

// Overlays `text` onto `base`. Format: [section] headers, `key = value`
// lines, '#' or ';' comments.
inline RunConfig parse_config_text(std::string_view text, RunConfig base = {}) {
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    auto line = detail::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    auto where = [&] { return "config line " + std::to_string(line_no) + ": "; };
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where() + "unterminated section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
    if (section.empty()) throw ConfigError(where() + "key outside any section");
    const auto key = detail::trim(std::string_view(line).substr(0, eq));
    const auto value = detail::trim(std::string_view(line).substr(eq + 1));
    try {
      detail::find_key(section, key).set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where() + e.what());
    }
  }
  return base;
}

// `section.key=value`, as given to --set.
inline void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
    throw ConfigError("override must look like section.key=value, got '" + std::string(assignment) + "'");
  }
  detail::find_key(detail::trim(assignment.substr(0, dot)),
                   detail::trim(assignment.substr(dot + 1, eq - dot - 1)))
      .set(cfg, detail::trim(assignment.substr(eq + 1)));
}

inline std::string section_text(const RunConfig& cfg, std::string_view section) {
  std::string out = "[" + std::string(section) + "]\n";
  for (const auto& k : detail::config_keys())
    if (section == k.section) out += std::string(k.key) + " = " + k.get(cfg) + "\n";
  return out;
}

inline const std::vector<std::string>& config_sections() {
  static const std::vector<std::string> s{"task", "training", "controller", "grid", "ablation", "run"};
  return s;
}

// Fully resolved config; parsing it back yields the same config.
inline std::string canonical_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& s : config_sections()) {
    if (!out.empty()) out += "\n";
    out += section_text(cfg, s);
  }
  return out;
}

inline std::string config_hash(const RunConfig& cfg) { return to_hex(fnv1a(canonical_text(cfg))); }

// Hash over the settings a phase's outputs depend on. Downstream phases
// compare it against what their parent artifact recorded.
inline std::string phase_hash(const RunConfig& cfg, std::string_view phase) {
  std::string text = section_text(cfg, "task") + section_text(cfg, "training") + "seed = " +
                     std::to_string(cfg.seed) + "\n";
  if (phase == "adapters") return to_hex(fnv1a(text));
  if (phase == "controller" || phase == "finalize") {
    return to_hex(fnv1a(text + section_text(cfg, "controller")));
  }
  if (phase == "grid") return to_hex(fnv1a(text + section_text(cfg, "grid")));
  throw UsageError("phase_hash: unknown phase " + std::string(phase));
}

}  // namespace grasp
