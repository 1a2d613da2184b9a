// Command-line front end. Flag parsing only; the commands live in
// alignlab/cli/commands.hpp.
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "alignlab/cli/commands.hpp"

int main(int argc, char** argv) {
  using namespace alignlab;
  CLI::App app{"alignlab: weight/data alignment experiments"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  cli::CommandSpec spec;
  std::uint64_t seed = 0;
  std::string arms;
  for (const auto& [name, description] : cli::commands()) {
    auto* sub = app.add_subcommand(name, description);
    sub->add_option("--config", spec.config_path, "key = value config file");
    sub->add_option("--out", spec.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "root seed, overrides the config");
    sub->add_option("--workers", spec.workers, "worker threads")->capture_default_str();
    sub->add_option("--arm", arms, "comma-separated subset of arms");
    sub->add_option("--format", spec.format, "output format (csv)")->capture_default_str();
    sub->add_flag_function(
        "-v,--verbose", [&spec](std::int64_t n) { spec.verbosity = static_cast<int>(n); },
        "progress on stderr; repeat for more");
  }
  CLI11_PARSE(app, argc, argv);

  spec.command = app.get_subcommands().front()->get_name();
  if (app.get_subcommands().front()->count("--seed")) spec.seed = seed;
  for (std::size_t b = 0; b < arms.size();) {
    auto e = arms.find(',', b);
    if (e == std::string::npos) e = arms.size();
    if (e > b) spec.arms.push_back(arms.substr(b, e - b));
    b = e + 1;
  }
  if (const char* dir = std::getenv("ALIGNLAB_DATA_DIR")) spec.data_dir = dir;

  try {
    return cli::run_command(spec);
  } catch (const std::exception& e) {
    std::cerr << "alignlab " << spec.command << ": " << e.what() << '\n';
    return cli::exit_code_for(e);
  }
}
