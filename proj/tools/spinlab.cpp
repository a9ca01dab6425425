#include <CLI11.hpp>

#include <yaml-cpp/yaml.h>

#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "spinlab/cli/commands.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumeric = 4;

struct Options {
  std::string config;
  std::string seed;
  std::string out;
  std::vector<std::string> overrides;
};

int run(const std::string& name, const Options& o, const std::function<int(spinlab::cli::Context&)>& cmd) {
  try {
    std::vector<std::string> overrides = o.overrides;
    if (!o.seed.empty()) overrides.push_back("seed=" + o.seed);
    if (!o.out.empty()) overrides.push_back("out=" + o.out);
    spinlab::cli::Context ctx(spinlab::cli::load_config(o.config, overrides));
    return cmd(ctx);
  } catch (const spinlab::ConfigError& e) {
    std::cerr << name << ": config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const spinlab::ParseError& e) {
    std::cerr << name << ": parse error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const spinlab::MissingArtifactError& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return kExitMissing;
  } catch (const spinlab::NumericError& e) {
    std::cerr << name << ": numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const YAML::Exception& e) {
    std::cerr << name << ": config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spinlab: model-spinning experiments on a synthetic summarisation task"};
  app.require_subcommand(1);

  Options opts;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen", "generate the synthetic corpus and vocabularies"},
      {"train-main", "train the clean summarisation model"},
      {"train-meta", "train the meta-task classifier"},
      {"spin", "train the spinned model from the clean one"},
      {"poison", "build a poisoned dataset and fine-tune victim and control models"},
      {"eval", "differential test of clean vs spinned model"},
      {"scan", "black-box anomaly scan over candidate triggers"},
      {"grid", "alpha x c evasion grid"},
  };
  const std::map<std::string, std::function<int(spinlab::cli::Context&)>> impl = {
      {"gen", spinlab::cli::cmd_gen},           {"train-main", spinlab::cli::cmd_train_main},
      {"train-meta", spinlab::cli::cmd_train_meta}, {"spin", spinlab::cli::cmd_spin},
      {"poison", spinlab::cli::cmd_poison},     {"eval", spinlab::cli::cmd_eval},
      {"scan", spinlab::cli::cmd_scan},         {"grid", spinlab::cli::cmd_grid},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config, "YAML run configuration");
    sub->add_option("--seed", opts.seed, "global seed (overrides the config)");
    sub->add_option("--out", opts.out, "run directory (overrides the config)");
    sub->add_option("--set", opts.overrides, "override a config key, e.g. spin.alpha=0.95")->take_all();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  for (const auto& [name, help] : commands) {
    if (app.got_subcommand(name)) return run(name, opts, impl.at(name));
  }
  return kExitConfig;
}
