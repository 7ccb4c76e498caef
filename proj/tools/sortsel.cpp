// Command-line front-end: sortsel <simulate|estimate|counterfactual|decompose|bootstrap> [flags]

#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sortsel/pipeline.hpp"

namespace {

using sortsel::ConfigMap;

struct Flags {
  std::string config;
  std::map<std::string, std::string> values;   // config key -> flag value
  std::vector<std::string> zero;
  std::vector<std::string> inputs;
  std::vector<std::string> set;
};

// Flags that map one-to-one onto config keys.
struct ValueFlag {
  std::string flag, key, help;
};
const std::vector<ValueFlag> kValueFlags = {
    {"--grid", "grid", "thresholds per spouse, top level open (default 10)"},
    {"--ghk-draws", "ghk_draws", "GHK draws in the likelihood (default 512)"},
    {"--eval-draws", "eval_draws", "GHK draws for tables and quantiles (default 8192)"},
    {"--bootstrap", "bootstrap", "bootstrap replicates, 0 for none"},
    {"--seed", "seed", "master seed (else SORTSEL_SEED, else 0)"},
    {"--workers", "workers", "worker threads (default: hardware concurrency)"},
    {"--period-bins", "period_bins", "bin width, or inclusive ranges such as 1976-1985,1986-1995"},
    {"--out", "out", "output directory (default out)"},
    {"--fit", "fit", "fit file (default <out>/fit.json)"},
    {"--fz", "fz", "covariate distribution: selected or population"},
    {"--decomp-order", "decomp_order", "block order, e.g. composition,selection,structural,sorting"},
    {"--q", "q", "period supplying the participation equation"},
    {"--r", "r", "period supplying the wage equations"},
    {"--s", "s", "period supplying the wage correlation"},
    {"--base", "base", "base period of the decomposition"},
    {"--statistic", "statistic", "kendall, diag, cell:K,L or ratio"},
    {"--table-size", "table_size", "sorting table size (default 10)"},
    {"--preset", "preset", "simulate: acceptance, identification or cps_like"},
    {"--n", "n", "simulate: households per period"},
    {"--couples", "couples", "couples drawn for the inequality ratio"},
    {"--quant-tol", "quant_tol", "quantile bisection tolerance on the wage scale"}};

void add_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key = value configuration file");
  cmd->add_option("--input", f.inputs, "household CSV file(s)");
  for (const auto& v : kValueFlags) cmd->add_option(v.flag, f.values[v.key], v.help);
  cmd->add_option("--zero", f.zero, "correlation to set to zero (repeatable), e.g. rho_ywyh");
  cmd->add_option("--set", f.set, "any config key as key=value (repeatable)");
  cmd->add_flag("--inequality", "also compute the D8/D2 household-sum ratio");
}

ConfigMap flag_map(const CLI::App* cmd, const Flags& f) {
  ConfigMap out;
  for (const auto& kv : f.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  for (const auto& v : kValueFlags)
    if (cmd->count(v.flag) > 0) out[v.key] = f.values.at(v.key);
  if (!f.inputs.empty()) {
    std::string joined;
    for (const auto& p : f.inputs) joined += (joined.empty() ? "" : ",") + p;
    out["input"] = joined;
  }
  if (!f.zero.empty()) {
    std::string joined;
    for (const auto& z : f.zero) joined += (joined.empty() ? "" : ",") + z;
    out["zero"] = joined;
  }
  if (cmd->count("--inequality") > 0) out["inequality"] = "true";
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint wage distributions of couples with sample selection"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::function<void(const sortsel::RunConfig&)>>> commands = {
      {"simulate", sortsel::run_simulate},
      {"estimate", sortsel::run_estimate},
      {"counterfactual", sortsel::run_counterfactual},
      {"decompose", sortsel::run_decompose},
      {"bootstrap", sortsel::run_bootstrap}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, run] : commands) {
    CLI::App* sub = app.add_subcommand(name);
    add_flags(sub, flags);
    subs.push_back(sub);
  }
  CLI11_PARSE(app, argc, argv);

  try {
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      const ConfigMap file = flags.config.empty() ? ConfigMap{} : sortsel::read_config(flags.config);
      const ConfigMap merged =
          sortsel::merge_config(file, flag_map(subs[i], flags), std::getenv("SORTSEL_SEED"));
      commands[i].second(sortsel::RunConfig::from_map(merged));
    }
  } catch (const std::exception& e) {
    std::cerr << "sortsel: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
