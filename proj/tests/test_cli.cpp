#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

Outcome fdi(const std::string& args) {
  const std::string cmd = std::string(FDI_CLI) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return o;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) o.out += buf.data();
  const int status = ::pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string fixture(const std::string& name) { return std::string(FDI_FIXTURES) + "/" + name; }

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("fdi_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream b;
  b << in.rdbuf();
  return b.str();
}

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

/// Default experiment with an absolute case path, optionally edited.
fs::path write_config(const fs::path& dir, const std::function<void(nlohmann::json&)>& edit = {}) {
  auto j = nlohmann::json::parse(slurp(fixture("pjm5_experiment.json")));
  j["case"] = fixture("pjm5.json");
  if (edit) edit(j);
  fs::create_directories(dir);
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

TEST(Cli, CaseInfoSummary) {
  const auto o = fdi("case-info " + fixture("pjm5.json"));
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_TRUE(contains(o.out, "5 buses, 6 branches, 11 meters, rank(H)=4")) << o.out;
  EXPECT_TRUE(contains(o.out, "stealth subspace dimension: 4")) << o.out;
}

TEST(Cli, CaseInfoWithLineListsGroups) {
  const auto o = fdi("case-info " + fixture("pjm5.json") + " --line 2 3");
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_TRUE(contains(o.out, "G for line 2-3")) << o.out;
  EXPECT_TRUE(contains(o.out, "z4    0.280566  K")) << o.out;
  EXPECT_TRUE(contains(o.out, "z1   -0.018903  L")) << o.out;
}

TEST(Cli, CaseInfoMissingFile) {
  const auto o = fdi("case-info /nonexistent/case.json");
  EXPECT_EQ(o.code, 2);
  EXPECT_TRUE(contains(o.out, "error:")) << o.out;
}

TEST(Cli, CaseInfoMalformedJsonReportsLine) {
  const auto dir = scratch("malformed");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << "{\"buses\":\n  [1,\n}";
  const auto o = fdi("case-info " + (dir / "bad.json").string());
  EXPECT_EQ(o.code, 2);
  EXPECT_TRUE(contains(o.out, "bad.json:3")) << o.out;
  fs::remove_all(dir);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(fdi("").code, 1);
  EXPECT_EQ(fdi("no-such-command").code, 1);
  EXPECT_EQ(fdi("run").code, 1);  // --config is required
  EXPECT_EQ(fdi("--help").code, 0);
}

TEST(Cli, SolveGameTableTwo) {
  const auto dir = scratch("table2");
  const auto o = fdi("solve-game " + fixture("table2.csv") + " --out " + dir.string());
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_TRUE(contains(o.out, "no pure strategy; minimax=7.71 maximin=0.00")) << o.out;
  EXPECT_TRUE(contains(o.out, "game value: 4.3838 MW")) << o.out;
  ASSERT_TRUE(fs::exists(dir / "strategies.json"));
  const auto j = nlohmann::json::parse(slurp(dir / "strategies.json"));
  double sum = 0.0;
  for (const auto& [k, v] : j["attacker"]["probabilities"].items()) sum += v.get<double>();
  EXPECT_NEAR(sum, 1.0, 1e-9);
  fs::remove_all(dir);
}

TEST(Cli, SolveGameTableThree) {
  const auto o = fdi("solve-game " + fixture("table3.csv"));
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_TRUE(contains(o.out, "no pure strategy")) << o.out;
}

TEST(Cli, SolveGameSaddle) {
  const auto dir = scratch("saddle");
  fs::create_directories(dir);
  std::ofstream(dir / "one.csv") << "def\\att,a\nr,5\n";
  const auto o = fdi("solve-game " + (dir / "one.csv").string());
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_TRUE(contains(o.out, "saddle point")) << o.out;
  EXPECT_TRUE(contains(o.out, "value=5.00")) << o.out;
  fs::remove_all(dir);
}

TEST(Cli, SolveGameBadMatrix) {
  const auto dir = scratch("badmatrix");
  fs::create_directories(dir);
  std::ofstream(dir / "m.csv") << "def\\att,a,b\nr,1,x\n";
  EXPECT_EQ(fdi("solve-game " + (dir / "m.csv").string()).code, 2);
  EXPECT_EQ(fdi("solve-game " + (dir / "missing.csv").string()).code, 2);
  fs::remove_all(dir);
}

TEST(Cli, RunIsReproducibleAndRefusesOverwrite) {
  const auto root = scratch("run");
  const auto cfg = write_config(root / "cfg");
  const auto a = root / "a";
  const auto b = root / "b";
  const auto ra = fdi("run --config " + cfg.string() + " --seed 7 --out " + a.string());
  ASSERT_EQ(ra.code, 0) << ra.out;
  const auto rb = fdi("run --config " + cfg.string() + " --seed 7 --out " + b.string());
  ASSERT_EQ(rb.code, 0) << rb.out;
  for (const char* f : {"manifest.json", "game_se.csv", "game_mlp.csv", "calibration.csv", "awareness.csv",
                        "strategies.json", "mlp.json"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest["master_seed"], 7u);
  EXPECT_FALSE(fs::exists(a / "FAILED"));

  const auto before = slurp(a / "manifest.json");
  const auto again = fdi("run --config " + cfg.string() + " --seed 7 --out " + a.string());
  EXPECT_EQ(again.code, 2);
  EXPECT_TRUE(contains(again.out, "--force")) << again.out;
  EXPECT_EQ(slurp(a / "manifest.json"), before);

  const auto forced = fdi("run --config " + cfg.string() + " --seed 7 --out " + a.string() + " --force");
  EXPECT_EQ(forced.code, 0) << forced.out;
  EXPECT_EQ(slurp(a / "manifest.json"), before);
  fs::remove_all(root);
}

TEST(Cli, SeOnlyGameBuild) {
  const auto root = scratch("seonly");
  const auto cfg = write_config(root / "cfg");
  const auto out = root / "out";
  const auto o = fdi("game-build --config " + cfg.string() + " --detector se-only --out " + out.string());
  ASSERT_EQ(o.code, 0) << o.out;
  EXPECT_TRUE(fs::exists(out / "game_se.csv"));
  EXPECT_FALSE(fs::exists(out / "game_mlp.csv"));
  EXPECT_FALSE(fs::exists(out / "awareness.csv"));
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(manifest["detector"], "se");
  fs::remove_all(root);
}

TEST(Cli, StageFailureLeavesMarker) {
  const auto root = scratch("failed");
  const auto cfg = write_config(root / "cfg", [](nlohmann::json& j) {
    j["se_thresholds"] = {{"mode", "fixed"}, {"values", {{"z1", 8.54}}}};
  });
  const auto out = root / "out";
  const auto o = fdi("game-build --config " + cfg.string() + " --detector se-only --out " + out.string());
  EXPECT_EQ(o.code, 2) << o.out;
  EXPECT_TRUE(contains(o.out, "no SE threshold")) << o.out;
  ASSERT_TRUE(fs::exists(out / "FAILED"));
  EXPECT_TRUE(contains(slurp(out / "FAILED"), "no SE threshold"));
  EXPECT_TRUE(fs::exists(out / "manifest.json"));  // partial outputs kept
  fs::remove_all(root);
}

TEST(Cli, BadConfigExitsTwo) {
  const auto root = scratch("badcfg");
  const auto cfg = write_config(root / "cfg", [](nlohmann::json& j) { j["bogus"] = 1; });
  const auto o = fdi("calibrate --config " + cfg.string() + " --out " + (root / "out").string());
  EXPECT_EQ(o.code, 2);
  EXPECT_TRUE(contains(o.out, "bogus")) << o.out;
  fs::remove_all(root);
}

TEST(Cli, TomlAndJsonConfigsAgree) {
  const auto root = scratch("toml");
  const auto j = fdi("calibrate --config " + fixture("pjm5_experiment.json") + " --out " + (root / "j").string());
  ASSERT_EQ(j.code, 0) << j.out;
  const auto t = fdi("calibrate --config " + fixture("pjm5_experiment.toml") + " --out " + (root / "t").string());
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_EQ(slurp(root / "j" / "calibration.csv"), slurp(root / "t" / "calibration.csv"));
  fs::remove_all(root);
}

TEST(Cli, AttackCommand) {
  const auto o = fdi("attack --config " + fixture("pjm5_experiment.json") + " --support z5,z10 --zeta 9.48 --detector se");
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_TRUE(contains(o.out, "utility")) << o.out;
}

}  // namespace
