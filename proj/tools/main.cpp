// ftlab command-line entry point. Flags only override output locations and
// seeds; everything else comes from the declarative config file.

#include <string>
#include <vector>

#include <CLI11.hpp>

#include <ftlab/cli.hpp>

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for reward-weighted fine-tuning objectives"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool have_seed = false;

  auto add_common = [&](CLI::App* cmd, bool with_seed) {
    cmd->add_option("-c,--config", config_path, "experiment config file")->required();
    cmd->add_option("-o,--out", out_dir, "override the output directory");
    if (with_seed)
      cmd->add_option("-s,--seed", seed, "override the seed")->each([&](const std::string&) {
        have_seed = true;
      });
  };

  CLI::App* train = app.add_subcommand("train", "train a policy and write the run directory");
  add_common(train, true);
  CLI::App* bounds = app.add_subcommand("bounds", "closed-form objective and bound report");
  add_common(bounds, false);
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference validation of objective gradients");
  add_common(gradcheck, true);

  std::vector<std::string> run_dirs;
  std::string report_out;
  CLI::App* drift = app.add_subcommand("drift-report", "compare aligned training runs");
  drift->add_option("-r,--run", run_dirs, "run directory (repeatable)")->required();
  drift->add_option("-o,--out", report_out, "report output directory")->required();

  CLI11_PARSE(app, argc, argv);

  ftlab::CliOverrides overrides;
  if (!out_dir.empty()) overrides.out_dir = out_dir;
  if (have_seed) overrides.seed = seed;

  if (train->parsed()) return ftlab::cmd_train(config_path, overrides);
  if (bounds->parsed()) return ftlab::cmd_bounds(config_path, overrides);
  if (gradcheck->parsed()) return ftlab::cmd_gradcheck(config_path, overrides);
  return ftlab::cmd_drift_report(run_dirs, report_out);
}
