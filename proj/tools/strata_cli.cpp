#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "strata/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Layered anisotropic EIT toolkit"};
  std::string config, out, command;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  bool verbose = false;
  app.add_option("command", command, "Optional check that the config runs this command");
  app.add_option("--config", config, "Experiment config (JSON)")->required();
  app.add_option("--out", out, "Output directory")->required();
  app.add_option("--seed", seed, "Seed for randomized commands");
  app.add_option("--threads", threads, "Worker threads")->check(CLI::Range(1u, 1024u));
  app.add_flag("--verbose", verbose, "Progress and timings on stderr");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const strata::ExperimentSpec spec = strata::load_experiment(config);
    if (!command.empty() && command != strata::to_string(spec.command))
      throw strata::Error(strata::ErrorKind::ConfigValidation,
                          "command '" + command + "' does not match config command '" +
                              std::string(strata::to_string(spec.command)) + "'");
    strata::RunOptions opt;
    opt.out_dir = out;
    opt.seed = seed;
    opt.threads = threads;
    opt.verbose = verbose;
    opt.log = &std::cerr;
    const strata::RunResult res = strata::run(spec, opt);
    std::cout << res.manifest.string() << '\n';
    return 0;
  } catch (const strata::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return strata::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
