#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "bilevel_reweight/experiments.hpp"

namespace br = bilevel_reweight;
namespace ex = bilevel_reweight::experiments;
namespace fs = std::filesystem;

namespace {

constexpr int kExitError = 1;
constexpr int kExitIncomplete = 3;

struct CommonFlags {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--out", flags.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", flags.seed, "generator seed (overrides the config)");
  cmd->add_option("--jobs", flags.jobs, "concurrent runs in a sweep")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--set", flags.sets, "dotted-path override, e.g. --set solver.eta=0.5")->allow_extra_args(false);
}

br::Json resolve(const std::string& name, const CommonFlags& flags) {
  const br::Json user = flags.config.empty() ? br::Json::object() : ex::load_json_file(flags.config);
  return ex::resolve_config(name, user, flags.sets, flags.seed);
}

ex::RunOptions options(const CommonFlags& flags, const ex::Logger& log) {
  ex::RunOptions opt;
  opt.out = flags.out;
  opt.jobs = flags.jobs;
  opt.logger = &log;
  if (!flags.config.empty()) opt.base_dir = fs::path(flags.config).parent_path();
  return opt;
}

bool completed(const br::Json& summary) { return !summary.contains("status") || summary["status"] == "completed"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel data reweighting: solvers, weight flows and experiment presets."};
  app.require_subcommand(1);

  CommonFlags gen_flags, solve_flags, flow_flags, exp_flags;
  auto* gen = app.add_subcommand("generate", "write synthetic train/test datasets");
  add_common(gen, gen_flags);
  auto* solve = app.add_subcommand("solve", "run one discrete solver (exact | warm | soba | softmax)");
  add_common(solve, solve_flags);
  auto* flow = app.add_subcommand("flow", "integrate a weight flow and report its limit");
  add_common(flow, flow_flags);
  auto* exp = app.add_subcommand("experiment", "run a named preset");
  std::string name;
  std::string names;
  for (const auto& n : ex::experiment_names()) names += (names.empty() ? "" : " | ") + n;
  exp->add_option("name", name, names)->required()->check(CLI::IsMember(ex::experiment_names()));
  add_common(exp, exp_flags);

  CLI11_PARSE(app, argc, argv);

  const ex::Logger log;
  try {
    if (*gen) {
      ex::cmd_generate(resolve("generate", gen_flags), options(gen_flags, log));
      return 0;
    }
    if (*solve) {
      const br::Json summary = ex::cmd_solve(resolve("solve", solve_flags), options(solve_flags, log));
      std::cout << summary.dump(2) << '\n';
      return completed(summary) ? 0 : kExitIncomplete;
    }
    if (*flow) {
      const br::Json summary = ex::cmd_flow(resolve("flow", flow_flags), options(flow_flags, log));
      std::cout << summary.dump(2) << '\n';
      if (summary.contains("closed_form_error"))
        std::cout << "closed-form error: " << br::format_double(summary["closed_form_error"].get<double>()) << '\n';
      return completed(summary) ? 0 : kExitIncomplete;
    }
    const auto result = ex::cmd_experiment(resolve(name, exp_flags), options(exp_flags, log));
    bool all = true;
    for (const auto& row : result.rows) all = all && completed(row);
    std::cout << "wrote " << result.rows.size() << " runs to " << exp_flags.out << '\n';
    return all ? 0 : kExitIncomplete;
  } catch (const br::Error& e) {
    log.error(e.what());
    return kExitError;
  } catch (const std::exception& e) {
    log.error(e.what());
    return kExitError;
  }
}
