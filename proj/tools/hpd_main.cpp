// hpd: hierarchical parameterization distillation toolkit, single entry point.

#include <CLI11.hpp>

#include <cstdlib>

#include "hpd/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "hpd - dataset distillation by progressive optimization through the "
      "layer spaces of a small class-conditional generator"};
  app.require_subcommand(1);

  hpd::cli::CliArgs args;
  const char* env_root = std::getenv("HPD_ROOT");
  std::string root = env_root ? env_root : "hpd_data";
  std::string config, run_id, target = "distilled";
  std::vector<std::string> overrides;
  bool force = false;
  int fixed_space = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--root", root,
                    "data/checkpoint/run root (env HPD_ROOT)");
    sub->add_option("--config", config, "JSON config file");
    sub->add_option("--set", overrides,
                    "config override, dotted key=value (repeatable)");
    sub->add_flag("--force", force, "redo work even if outputs exist");
    return sub;
  };
  auto add_run = [&](CLI::App* sub) {
    sub->add_option("--run", run_id, "run id")->required();
    return sub;
  };

  add_common(app.add_subcommand("prepare-data",
                                "ingest or synthesize the configured dataset"));
  add_common(app.add_subcommand("train-generator",
                                "train the class-conditional generator"));
  add_common(app.add_subcommand("train-extractor",
                                "train the frozen proxy classifier"));
  add_common(app.add_subcommand("record-trajectories",
                                "record expert trajectories for trajectory "
                                "matching"));
  auto* distill = add_run(add_common(
      app.add_subcommand("distill", "run progressive distillation")));
  distill->add_option("--fixed-space", fixed_space,
                      "spend the whole budget in one space (block boundary "
                      "index, K = pixel domain)");
  auto* evaluate = add_run(add_common(app.add_subcommand(
      "evaluate", "train fresh models on a synthetic set and score them")));
  evaluate->add_option("--target", target,
                       "distilled | coreset | snapshots");
  add_run(add_common(app.add_subcommand(
      "compare", "pixel-fixed / gan-fixed / progressive comparison table")));
  add_run(add_common(
      app.add_subcommand("report", "summaries and plots from run logs")));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  args.command = app.get_subcommands().front()->get_name();
  args.root = root;
  args.config_path = config;
  args.run_id = run_id;
  args.overrides = overrides;
  args.force = force;
  args.fixed_space = fixed_space;
  args.target = target;
  return hpd::cli::run_command(args);
}
