// Command-line front end: one subcommand per pipeline stage plus `run`.
//
// Exit codes: 0 success, 1 usage, 2 input/config/parse, 3 numerical,
// 4 LP/solver.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fdi/fdi.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;

const std::vector<std::string> kRunArtifacts = {
    "calibration.csv", "game_se.csv",  "game_mlp.csv", "strategies.json", "awareness.csv",
    "manifest.json",   "mlp.json",     "FAILED",       "attack.json",     "plotdata/training_loss.csv",
    "plotdata/game_se_long.csv", "plotdata/game_mlp_long.csv", "plotdata/strategies_long.csv",
    "plotdata/awareness_long.csv"};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<double> noise_sigma;
  std::string detector = "both";
};

fdi::ExperimentConfig load_with_overrides(const std::string& path, const Overrides& o) {
  auto cfg = fdi::load_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (o.noise_sigma) {
    if (!(*o.noise_sigma > 0.0)) throw fdi::ConfigError("--noise-sigma must be positive");
    cfg.noise_sigma = *o.noise_sigma;
  }
  return cfg;
}

// An output directory holding earlier results is only reused with --force;
// then our own artifacts are cleared so stale files cannot survive.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw fdi::ConfigError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw fdi::ConfigError(dir.string() + " already exists; pass --force to overwrite");
      for (const auto& name : kRunArtifacts) fs::remove(dir / name);
    }
  }
  fs::create_directories(dir);
}

void write_failed_marker(const fs::path& dir, const std::string& what) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream out(dir / "FAILED");
  out << what << "\n";
}

int run_stages(const std::string& config, const std::string& out, bool force, const Overrides& o,
               fdi::PipelineOptions opt) {
  const auto cfg = load_with_overrides(config, o);
  opt.detector = fdi::detector_choice_from_string(o.detector);
  const fs::path dir(out);
  prepare_out_dir(dir, force);
  try {
    const auto r = fdi::run_full_pipeline(cfg, opt, [&](const fdi::PipelineResult& partial, fdi::Stage) {
      fdi::write_run_directory(partial, dir);
    });
    fdi::write_run_directory(r, dir);
    if (r.training) {
      std::printf("detector: train accuracy %.4f, held-out accuracy %.4f\n", r.training->train_accuracy,
                  r.training->holdout_accuracy);
    }
    for (const auto& c : r.calibration) {
      std::printf("zeta(%s) = %.3f MW  (FA mlp %.4f, se %.4f)\n", c.support.c_str(), c.zeta_mw, c.fa_mlp, c.fa_se);
    }
    if (r.se_game) std::printf("average attacker utility, SE game:  %.4f MW\n", r.se_game->average_utility);
    if (r.mlp_game) std::printf("average attacker utility, MLP game: %.4f MW\n", r.mlp_game->average_utility);
    if (r.awareness) {
      for (const auto* c : r.awareness->cells()) {
        std::printf("detection %s BDD, %s attacker: %.4f\n", c->bdd.c_str(), c->awareness.c_str(), c->detection_rate);
      }
    }
    std::printf("wrote %s (config digest %s)\n", dir.string().c_str(), r.digest.c_str());
  } catch (const std::exception& e) {
    write_failed_marker(dir, e.what());
    throw;
  }
  return 0;
}

int cmd_case_info(const std::string& path, const std::optional<std::vector<int>>& line, double sigma) {
  const auto g = fdi::load_case(path);
  const auto h = fdi::build_jacobian(g, g.meters);
  const auto rank = static_cast<std::size_t>(fdi::numerical_rank(h));
  std::printf("%zu buses, %zu branches, %zu meters, rank(H)=%zu\n", g.buses.size(), g.branches.size(),
              g.meters.size(), rank);
  std::printf("stealth subspace dimension: %zu\n", rank);
  std::printf("slack bus: %d, base: %.1f MVA\n", g.slack_bus, g.base_mva);
  if (line) {
    if (line->size() != 2) throw fdi::ConfigError("--line needs two bus ids");
    const auto model = fdi::build_estimator(h, sigma);
    const auto ls = fdi::line_sensitivity(model, g, (*line)[0], (*line)[1]);
    const auto part = fdi::classify_meters(ls.G, fdi::default_neutral_tolerance(ls.G));
    const auto labels = g.meters.labels();
    std::printf("G for line %d-%d:\n", (*line)[0], (*line)[1]);
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const char* group = std::find(part.K.begin(), part.K.end(), k) != part.K.end()   ? "K"
                          : std::find(part.L.begin(), part.L.end(), k) != part.L.end() ? "L"
                                                                                       : "-";
      std::printf("  %-4s % .6f  %s\n", labels[k].c_str(), ls.G(static_cast<Eigen::Index>(k)), group);
    }
  }
  return 0;
}

std::string fmt_strategy(const fdi::MixedStrategy& m, const std::vector<std::string>& labels) {
  std::string s;
  char buf[64];
  for (std::size_t k = 0; k < labels.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%s%s=%.4f", k ? " " : "", labels[k].c_str(),
                  m.probabilities(static_cast<Eigen::Index>(k)));
    s += buf;
  }
  return s;
}

int cmd_solve_game(const std::string& path, const std::string& out, bool force) {
  const auto g = fdi::load_game_csv(path);
  const auto sol = fdi::solve_game(g.S);
  if (sol.pure.saddle) {
    const auto& sp = *sol.pure.saddle;
    std::printf("saddle point at defense %s / attack %s; value=%.2f\n", g.rows[static_cast<std::size_t>(sp.row)].c_str(),
                g.cols[static_cast<std::size_t>(sp.col)].c_str(), sp.value);
  } else {
    std::printf("no pure strategy; minimax=%.2f maximin=%.2f\n", sol.pure.minimax, sol.pure.maximin);
  }
  std::printf("defender: %s\n", fmt_strategy(sol.defender, g.rows).c_str());
  std::printf("attacker: %s\n", fmt_strategy(sol.attacker, g.cols).c_str());
  std::printf("game value: %.4f MW (duality gap %.2e)\n", sol.defender.game_value, sol.check.duality_gap);
  std::printf("average attacker utility: %.4f MW\n", fdi::average_attacker_utility(g.S));
  if (!out.empty()) {
    const fs::path dir(out);
    fs::create_directories(dir);
    const auto target = dir / "strategies.json";
    if (fs::exists(target) && !force) throw fdi::ConfigError(target.string() + " exists; pass --force to overwrite");
    fdi::SolvedGame solved{g, sol, fdi::average_attacker_utility(g.S)};
    nlohmann::json j = fdi::solved_game_json(solved);
    j["source"] = fs::path(path).filename().string();
    std::ofstream(target) << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_attack(const std::string& config, const Overrides& o, const std::vector<std::string>& support,
               std::optional<double> zeta, const std::string& out, bool force) {
  const auto cfg = load_with_overrides(config, o);
  const auto choice = fdi::detector_choice_from_string(o.detector);
  if (choice == fdi::DetectorChoice::kBoth) throw fdi::ConfigError("attack needs --detector se or mlp");
  const auto ctx = fdi::prepare_context(cfg);
  const auto idx = fdi::detail::resolve(support, ctx.labels);
  const std::string key = fdi::support_key(idx, ctx.labels);

  std::shared_ptr<const fdi::MlpDetector> mlp;
  fdi::ThresholdTable thresholds = cfg.thresholds;
  if (choice == fdi::DetectorChoice::kMlp || (!zeta && !cfg.fixed_thresholds)) {
    mlp = std::make_shared<const fdi::MlpDetector>(fdi::train_detector(ctx, cfg));
  }
  if (zeta) {
    thresholds[key] = *zeta;
  } else if (!cfg.fixed_thresholds) {
    thresholds[key] = fdi::calibrate_threshold(*mlp, *ctx.model, key, ctx.z_nominal, cfg.noise_sigma,
                                               cfg.calibration_samples, fdi::derive_seed(cfg.seed, "calibration"))
                          .zeta_mw;
  }
  const auto engine = choice == fdi::DetectorChoice::kSe ? fdi::se_engine(ctx, cfg, thresholds)
                                                         : fdi::mlp_engine(ctx, cfg, mlp, thresholds);
  const auto result = fdi::solve_cell_attack(engine, idx);
  fdi::AttackProblem p;
  if (choice == fdi::DetectorChoice::kSe) {
    p = fdi::make_attack_problem(ctx.line.G, idx, fdi::SeBudget{fdi::detail::lookup_threshold(thresholds, key)});
  } else {
    p = fdi::make_attack_problem(ctx.line.G, idx, fdi::MlpBoundary{mlp, ctx.z_baseline});
  }
  auto report = fdi::attack_report(p, result, ctx.labels, choice == fdi::DetectorChoice::kMlp ? "trained" : "");
  report["config_digest"] = fdi::config_digest(cfg);
  report["seed"] = cfg.seed;
  std::printf("%s\n", report.dump(2).c_str());
  if (!out.empty()) {
    const fs::path dir(out);
    fs::create_directories(dir);
    const auto target = dir / "attack.json";
    if (fs::exists(target) && !force) throw fdi::ConfigError(target.string() + " exists; pass --force to overwrite");
    std::ofstream(target) << report.dump(2) << "\n";
  }
  return 0;
}

int exit_code(const fdi::Error& e) { return fdi::exit_code_for(e.category()); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"False data injection attacks, bad data detectors and the defender/attacker game"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fdi::kVersion));

  Overrides ov;
  std::string config;
  std::string out;
  bool force = false;
  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", config, "experiment config (.json or .toml)")->required();
    auto* o = sub->add_option("--out", out, "output directory");
    if (needs_out) o->required();
    sub->add_flag("--force", force, "overwrite existing outputs");
    sub->add_option("--seed", ov.seed, "master seed override");
    sub->add_option("--threads", ov.threads, "worker thread cap")->check(CLI::PositiveNumber);
    sub->add_option("--noise-sigma", ov.noise_sigma, "measurement noise std dev (MW)");
    sub->add_option("--detector", ov.detector, "se, mlp or both")
        ->check(CLI::IsMember({"se", "mlp", "both", "se-only", "mlp-only"}));
  };

  std::string case_path;
  std::optional<std::vector<int>> line;
  double sigma = 1.0;
  auto* info = app.add_subcommand("case-info", "summarise a grid case");
  info->add_option("case", case_path, "case JSON")->required();
  info->add_option("--line", line, "also print sensitivities for the line FROM TO")->expected(2);
  info->add_option("--noise-sigma", sigma, "noise std dev used for the estimator (MW)");

  auto* calibrate = app.add_subcommand("calibrate", "train the MLP and calibrate SE thresholds");
  add_common(calibrate, true);

  std::vector<std::string> support;
  std::optional<double> zeta;
  auto* attack = app.add_subcommand("attack", "optimal attack on one support");
  add_common(attack, false);
  attack->add_option("--support", support, "attacked meter labels")->required()->delimiter(',');
  attack->add_option("--zeta", zeta, "SE threshold override (MW)");

  auto* build = app.add_subcommand("game-build", "build and solve the payoff games");
  add_common(build, true);

  std::string matrix;
  auto* solve = app.add_subcommand("solve-game", "pure and mixed strategies of a payoff matrix CSV");
  solve->add_option("matrix", matrix, "payoff matrix CSV")->required();
  solve->add_option("--out", out, "directory for strategies.json");
  solve->add_flag("--force", force, "overwrite existing outputs");

  auto* aware = app.add_subcommand("awareness", "adversary-aware vs unaware detection study");
  add_common(aware, true);

  auto* run = app.add_subcommand("run", "full pipeline");
  add_common(run, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*info) return cmd_case_info(case_path, line, sigma);
    if (*solve) return cmd_solve_game(matrix, out, force);
    if (*attack) return cmd_attack(config, ov, support, zeta, out, force);
    if (*calibrate) return run_stages(config, out, force, ov, {fdi::DetectorChoice::kBoth, false, false});
    if (*build) return run_stages(config, out, force, ov, {fdi::DetectorChoice::kBoth, true, false});
    if (*aware) return run_stages(config, out, force, ov, {fdi::DetectorChoice::kBoth, false, true});
    if (*run) return run_stages(config, out, force, ov, {});
  } catch (const fdi::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return fdi::exit_code_for(fdi::ErrorCategory::kInput);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return fdi::exit_code_for(fdi::ErrorCategory::kNumerical);
  }
  return kExitUsage;
}
