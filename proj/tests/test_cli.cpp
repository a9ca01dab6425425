#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spinlab/cli/commands.hpp"

using namespace spinlab;
namespace fs = std::filesystem;

namespace {

const std::string kTiny = std::string(SPINLAB_TEST_DATA) + "/tiny.yaml";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("spinlab_cli_" + name);
  fs::remove_all(p);
  return p;
}

cli::RunConfig tiny(const fs::path& out, std::vector<std::string> extra = {}) {
  extra.push_back("out=" + out.string());
  return cli::load_config(kTiny, extra);
}

int run_in_process(const cli::RunConfig& cfg, int (*cmd)(cli::Context&)) {
  cli::Context ctx(cfg);
  std::ostringstream sink;
  ctx.log = &sink;
  return cmd(ctx);
}

int run_binary(const std::string& args) {
  const std::string line = std::string(SPINLAB_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(line.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

}  // namespace

TEST(Config, DefaultsMatchDemoRecipe) {
  const cli::RunConfig demo = cli::load_config(std::string(SPINLAB_SAMPLES) + "/demo.yaml");
  cli::RunConfig defaults = cli::load_config("");
  defaults.out = demo.out;
  EXPECT_EQ(cli::to_json(defaults).dump(), cli::to_json(demo).dump());
}

TEST(Config, UnknownKeyReportsLine) {
  const fs::path dir = scratch("badkey");
  fs::create_directories(dir);
  write_text(dir / "bad.yaml", "seed: 1\nmodel:\n  steps: 3\n  stepz: 4\n");
  try {
    cli::load_config((dir / "bad.yaml").string());
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stepz"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
  }
  write_text(dir / "bad.yaml", "model: [1, 2\n");
  EXPECT_THROW(cli::load_config((dir / "bad.yaml").string()), ConfigError);
  EXPECT_THROW(cli::load_config((dir / "missing.yaml").string()), ConfigError);
  fs::remove_all(dir);
}

TEST(Config, Overrides) {
  EXPECT_EQ(*cli::load_config("", {"spin.alpha=0.95"}).spin.alpha, 0.95);
  EXPECT_FALSE(cli::load_config("", {"spin.alpha=mgda"}).spin.alpha.has_value());
  EXPECT_TRUE(std::isinf(cli::load_config("", {"spin.c=inf"}).spin.c));
  EXPECT_EQ(cli::load_config(kTiny, {"model.steps=11"}).model.steps, 11);
  EXPECT_EQ(cli::load_config(kTiny, {"seed=9"}).seed, 9u);
  EXPECT_THROW(cli::load_config("", {"spin.alpha"}), ConfigError);
  EXPECT_THROW(cli::load_config("", {"spin.alpha=1.5"}), ConfigError);
  EXPECT_THROW(cli::load_config("", {"spin.c=0.5"}), ConfigError);
  EXPECT_THROW(cli::load_config("", {"seed.x=1"}), ConfigError);
  EXPECT_THROW(cli::load_config("", {"nosuch.key=1"}), ConfigError);
}

TEST(Config, StageHashesFollowLineage) {
  const cli::RunConfig a = cli::load_config(kTiny);
  const auto h = cli::stage_hashes(a);
  const auto spin = cli::stage_hashes(cli::load_config(kTiny, {"spin.c=8"}));
  EXPECT_EQ(spin.corpus, h.corpus);
  EXPECT_EQ(spin.main, h.main);
  EXPECT_EQ(spin.meta, h.meta);
  EXPECT_NE(spin.spin, h.spin);
  EXPECT_NE(spin.poison, h.poison);
  const auto corpus = cli::stage_hashes(cli::load_config(kTiny, {"corpus.train_size=41"}));
  EXPECT_NE(corpus.main, h.main);
  EXPECT_NE(corpus.meta, h.meta);
  EXPECT_EQ(cli::stage_hashes(cli::load_config(kTiny, {"out=elsewhere"})).spin, h.spin);
  EXPECT_NE(a.derived_seed("spin"), a.derived_seed("eval"));
}

TEST(Commands, PipelineAndHashGuards) {
  const fs::path out = scratch("pipeline");
  const cli::RunConfig cfg = tiny(out);
  EXPECT_THROW(run_in_process(cfg, cli::cmd_train_main), MissingArtifactError);
  ASSERT_EQ(run_in_process(cfg, cli::cmd_gen), 0);
  ASSERT_EQ(run_in_process(cfg, cli::cmd_train_main), 0);
  EXPECT_THROW(run_in_process(cfg, cli::cmd_spin), MissingArtifactError);
  ASSERT_EQ(run_in_process(cfg, cli::cmd_train_meta), 0);
  ASSERT_EQ(run_in_process(cfg, cli::cmd_spin), 0);
  ASSERT_EQ(run_in_process(cfg, cli::cmd_eval), 0);
  ASSERT_EQ(run_in_process(cfg, cli::cmd_scan), 0);
  ASSERT_EQ(run_in_process(cfg, cli::cmd_poison), 0);
  for (const char* f : {"corpus.json", "theta.ckpt", "phi.ckpt", "theta_star.ckpt", "eval/report.csv",
                        "eval/table.txt", "scan/anomaly.csv", "scan/verdict.txt", "poison/poisoned.jsonl",
                        "poison/report.json", "spin.csv", "config/spin.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }

  // Checkpoints from one configuration are refused under another.
  EXPECT_THROW(run_in_process(tiny(out, {"model.steps=7"}), cli::cmd_spin), ConfigError);
  EXPECT_THROW(run_in_process(tiny(out, {"spin.c=8"}), cli::cmd_eval), ConfigError);
  EXPECT_THROW(run_in_process(tiny(out, {"corpus.test_size=13"}), cli::cmd_train_meta), ConfigError);
  EXPECT_NO_THROW(run_in_process(tiny(out, {"eval.model=clean"}), cli::cmd_eval));

  // A tampered corpus file is caught by its manifest digest.
  {
    std::ofstream app(out / "test.jsonl", std::ios::app);
    app << "{\"src\":[5],\"tgt\":[5]}\n";
  }
  EXPECT_THROW(run_in_process(cfg, cli::cmd_eval), ConfigError);
  fs::remove_all(out);
}

TEST(Commands, GridCoversEveryCell) {
  const fs::path out = scratch("grid");
  const cli::RunConfig cfg = tiny(out);
  for (auto cmd : {cli::cmd_gen, cli::cmd_train_main, cli::cmd_train_meta, cli::cmd_grid}) {
    ASSERT_EQ(run_in_process(cfg, cmd), 0);
  }
  std::ifstream in(out / "grid/grid.csv");
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 1 + 2);
  fs::remove_all(out);
}

TEST(Binary, ExitCodes) {
  const fs::path out = scratch("exit");
  const std::string base = "--config " + kTiny + " --out " + out.string();
  EXPECT_EQ(run_binary("train-main " + base), 3);
  EXPECT_EQ(run_binary("gen " + base + " --set corpus.stepz=1"), 2);
  EXPECT_EQ(run_binary("gen " + base + " --set spin.alpha=2"), 2);
  EXPECT_EQ(run_binary("gen --bogus"), 2);
  EXPECT_EQ(run_binary("frobnicate"), 2);
  EXPECT_EQ(run_binary("gen " + base), 0);
  EXPECT_EQ(run_binary("train-main " + base + " --seed 4"), 2);  // corpus was generated under seed 3
  EXPECT_EQ(run_binary("train-main " + base + " --set model.lr=1e300 model.clip_norm=1e300"), 4);
  EXPECT_EQ(run_binary("train-main " + base), 0);
  fs::remove_all(out);
}
