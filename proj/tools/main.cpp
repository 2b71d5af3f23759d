// badseg: command-line front end over the pipeline commands.
//
// Exit codes: 0 success, 1 invalid config or usage, 2 runtime failure.

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "badseg/config.hpp"
#include "badseg/pipeline.hpp"

namespace {

// The library is single-threaded; the cap is validated so a bad value is
// reported rather than ignored.
int thread_cap() {
  const char* v = std::getenv("BADSEG_THREADS");
  if (!v || !*v) return 1;
  try {
    std::size_t used = 0;
    const int n = std::stoi(v, &used);
    if (used != std::string(v).size() || n < 1) throw std::invalid_argument("");
    return n;
  } catch (const std::exception&) {
    throw badseg::config::ConfigError({"BADSEG_THREADS must be a positive integer, got '" + std::string(v) + "'"});
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor laboratory for a toy promptable video segmenter"};
  std::string command, config_path, out_root = "runs";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool print_config = false;

  std::string cmds;
  for (const auto& c : badseg::pipeline::commands()) cmds += (cmds.empty() ? "" : ", ") + c;
  app.add_option("command", command, "One of: " + cmds)->required();
  app.add_option("-c,--config", config_path, "JSON run config (defaults when omitted)");
  app.add_option("--set", overrides, "Override a field, e.g. --set train.s1.lambda1=2.0")->take_all();
  app.add_option("--seed", seed, "Set every seed in the config");
  app.add_option("-o,--out", out_root, "Root directory; outputs go to <out>/<config hash>");
  app.add_flag("--print-config", print_config, "Print the merged config and its hash, then exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const auto& known = badseg::pipeline::commands();
    if (std::find(known.begin(), known.end(), command) == known.end()) {
      std::cerr << "error: unknown command '" << command << "' (expected one of: " << cmds << ")\n";
      return 1;
    }
    const int threads = thread_cap();
    nlohmann::json merged;
    auto cfg = badseg::config::load_config(config_path, overrides, seed, &merged);
    auto ctx = badseg::pipeline::make_context(std::move(cfg), merged, out_root);
    if (print_config) {
      std::cout << merged.dump(2) << "\nconfig hash: " << ctx.hash << "\n";
      return 0;
    }
    if (threads > 1) std::cerr << "note: BADSEG_THREADS=" << threads << "; work runs on one thread\n";
    badseg::pipeline::run_command(command, ctx, std::cout);
    return 0;
  } catch (const badseg::config::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
