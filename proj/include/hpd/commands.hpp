#pragma once

// CLI command implementations. The thin binary in tools/ parses flags into
// CliArgs and dispatches here; tests call these directly.

#include <filesystem>
#include <string>
#include <vector>

#include "hpd/serialize.hpp"

namespace hpd::cli {

struct CliArgs {
  std::string command;
  std::filesystem::path root;         // data/checkpoint/run root
  std::filesystem::path config_path;  // optional config file
  std::string run_id;
  std::vector<std::string> overrides;  // dotted key=value config overrides
  bool force = false;
  int fixed_space = -1;   // distill: >=0 runs the fixed-space baseline there
  std::string target = "distilled";  // evaluate: distilled | coreset | snapshots
  bool quiet = false;
};

// exit codes: 0 success, 1 usage/config, 2 runtime failure
int run_command(const CliArgs& args);

void cmd_prepare_data(const CliArgs&);
void cmd_train_generator(const CliArgs&);
void cmd_train_extractor(const CliArgs&);
void cmd_record_trajectories(const CliArgs&);
void cmd_distill(const CliArgs&);
void cmd_evaluate(const CliArgs&);
void cmd_compare(const CliArgs&);
void cmd_report(const CliArgs&);

io::json default_config();
// defaults, overlaid with the config file, overlaid with key=value overrides
io::json resolve_config(const CliArgs& args);

// checkpoint registry (name -> path + content hash)
void registry_put(const std::filesystem::path& root, const std::string& key,
                  const std::filesystem::path& file);
std::filesystem::path registry_resolve(const std::filesystem::path& root,
                                       const std::string& key);

std::filesystem::path dataset_root(const std::filesystem::path& root);
std::filesystem::path run_dir(const std::filesystem::path& root,
                              const std::string& run_id);

}  // namespace hpd::cli
