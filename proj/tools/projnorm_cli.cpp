// Command-line front end: gen-data, run, stress, report.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "projnorm/error.hpp"
#include "projnorm/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string records;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  auto* opt = cmd->add_option("--config", args.config, "experiment config (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", args.out, "output directory (defaults to the config's output_dir)");
  cmd->add_option("--seed", args.seed, "override the config seed");
}

projnorm::ExperimentConfig resolve_config(const CommonArgs& args) {
  projnorm::ExperimentConfig cfg = projnorm::load_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  return cfg;
}

std::filesystem::path out_dir(const CommonArgs& args, const projnorm::ExperimentConfig& cfg) {
  return args.out.empty() ? std::filesystem::path(cfg.output_dir) : std::filesystem::path(args.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Out-of-distribution error prediction experiments"};
  app.require_subcommand(1);

  CommonArgs args;
  auto* gen = app.add_subcommand("gen-data", "write every shifted dataset as CSV");
  auto* run = app.add_subcommand("run", "evaluate all metrics and write records.csv + report.json");
  auto* stress = app.add_subcommand("stress", "adversarial stress test with calibrated predictions");
  auto* report = app.add_subcommand("report", "render R^2 / rho and residual-correlation tables");
  for (auto* cmd : {gen, run, stress}) add_common(cmd, args, true);
  add_common(report, args, false);
  report->add_option("--records", args.records, "records CSV (defaults to <out>/records.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*report) {
      std::filesystem::path dir = args.out;
      if (dir.empty() && !args.config.empty()) dir = resolve_config(args).output_dir;
      std::filesystem::path records = args.records;
      if (records.empty()) {
        if (dir.empty()) throw projnorm::ConfigError("report needs --records, --out or --config");
        records = dir / "records.csv";
      }
      std::cout << projnorm::cmd_report(records, dir);
      return 0;
    }
    const projnorm::ExperimentConfig cfg = resolve_config(args);
    const auto dir = out_dir(args, cfg);
    if (*gen) {
      projnorm::cmd_gen_data(cfg, dir);
    } else if (*run) {
      projnorm::cmd_run(cfg, dir);
    } else {
      projnorm::cmd_stress(cfg, dir);
    }
    std::cerr << "wrote " << dir.string() << "\n";
    return 0;
  } catch (const projnorm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
