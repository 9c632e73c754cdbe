#pragma once

// End-to-end experiments on a configured grid: detector training, false-alarm
// matched calibration, both payoff games and the adversary-awareness study.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fdi/attack.hpp"
#include "fdi/bdd.hpp"
#include "fdi/errors.hpp"
#include "fdi/game.hpp"
#include "fdi/grid_model.hpp"
#include "fdi/parallel.hpp"
#include "fdi/rng.hpp"
#include "json.hpp"
#include "toml.hpp"

namespace fdi {

inline constexpr const char* kVersion = "0.3.0";

enum class DetectorChoice { kSe, kMlp, kBoth };

inline DetectorChoice detector_choice_from_string(const std::string& s) {
  if (s == "se" || s == "se-only") return DetectorChoice::kSe;
  if (s == "mlp" || s == "mlp-only") return DetectorChoice::kMlp;
  if (s == "both") return DetectorChoice::kBoth;
  throw ConfigError("detector must be se, mlp or both (got '" + s + "')");
}

inline const char* to_string(DetectorChoice c) {
  switch (c) {
    case DetectorChoice::kSe:
      return "se";
    case DetectorChoice::kMlp:
      return "mlp";
    case DetectorChoice::kBoth:
      return "both";
  }
  return "?";
}

struct ExperimentConfig {
  std::filesystem::path case_path;
  int target_from = 0;
  int target_to = 0;
  std::vector<std::string> candidate_meters;
  std::vector<MeterGroup> defenses;  // empty: all 2-subsets of candidates
  std::vector<MeterGroup> attacks;   // empty: all 2-subsets of candidates
  std::vector<double> load_profile_mw;
  std::vector<double> x0;  // reduced angles; overrides the load profile
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;

  std::size_t dataset_size = 10000;
  double zeta_anchor_mw = 4.0;
  std::vector<std::size_t> training_support_sizes{1, 2};
  MlpTrainConfig mlp;

  std::size_t calibration_samples = 2000;
  bool fixed_thresholds = false;
  ThresholdTable thresholds;  // used when fixed_thresholds

  std::string baseline = "nominal";  // or "noisy"
  double alpha_factor = 10.0;
  MlpAttackConfig mlp_attack;

  std::size_t awareness_trials = 1000;
  int threads = 1;
};

namespace detail {

inline nlohmann::json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    nlohmann::json j = nlohmann::json::object();
    for (auto&& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (const auto* a = node.as_array()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  std::ostringstream os;
  node.visit([&os](const auto& v) { os << v; });
  return os.str();
}

template <typename T>
T field(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has wrong type");
  }
}

inline std::vector<MeterGroup> all_pairs(const std::vector<std::string>& meters) {
  std::vector<MeterGroup> out;
  for (std::size_t a = 0; a < meters.size(); ++a) {
    for (std::size_t b = a + 1; b < meters.size(); ++b) out.push_back({meters[a], meters[b]});
  }
  return out;
}

}  // namespace detail

inline ThresholdTable read_threshold_csv(std::istream& in, const std::string& source) {
  ThresholdTable t;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    const auto cells = detail::split_csv_line(line);
    if (!header) {
      header = true;
      continue;
    }
    if (cells.size() < 2) throw ParseError(source + ":" + std::to_string(lineno) + ": expected support,zeta_mw");
    try {
      t[cells[0]] = std::stod(cells[1]);
    } catch (const std::exception&) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": bad threshold '" + cells[1] + "'");
    }
  }
  return t;
}

inline ThresholdTable load_threshold_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open threshold table " + path.string());
  return read_threshold_csv(in, path.string());
}

/// Builds a config from an already-parsed document. Relative paths resolve
/// against `base_dir`.
inline ExperimentConfig config_from_json(const nlohmann::json& j,
                                         const std::filesystem::path& base_dir = {}) {
  static const std::set<std::string> known{
      "case", "target_line", "candidate_meters", "defenses", "attacks", "load_profile_mw", "x0",
      "noise_sigma", "seed", "dataset", "mlp", "calibration", "se_thresholds", "attack",
      "awareness", "threads", "name"};
  if (!j.is_object()) throw ConfigError("config must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  using detail::field;
  ExperimentConfig c;
  if (!j.contains("case")) throw ConfigError("config needs 'case'");
  c.case_path = field<std::string>(j, "case", "");
  if (c.case_path.is_relative() && !base_dir.empty()) c.case_path = base_dir / c.case_path;
  const auto line = field<std::vector<int>>(j, "target_line", {});
  if (line.size() != 2) throw ConfigError("target_line must be [from, to]");
  c.target_from = line[0];
  c.target_to = line[1];
  c.candidate_meters = field<std::vector<std::string>>(j, "candidate_meters", {});
  c.defenses = field<std::vector<MeterGroup>>(j, "defenses", {});
  c.attacks = field<std::vector<MeterGroup>>(j, "attacks", {});
  if (j.contains("attacks") && c.attacks.empty()) throw ConfigError("attack list is empty");
  if (j.contains("defenses") && c.defenses.empty()) throw ConfigError("defense list is empty");
  if (c.defenses.empty()) c.defenses = detail::all_pairs(c.candidate_meters);
  if (c.attacks.empty()) c.attacks = detail::all_pairs(c.candidate_meters);
  c.load_profile_mw = field<std::vector<double>>(j, "load_profile_mw", {});
  c.x0 = field<std::vector<double>>(j, "x0", {});
  c.noise_sigma = field<double>(j, "noise_sigma", c.noise_sigma);
  c.seed = field<std::uint64_t>(j, "seed", c.seed);
  c.threads = field<int>(j, "threads", c.threads);

  const auto data = j.value("dataset", nlohmann::json::object());
  c.dataset_size = field<std::size_t>(data, "n_total", c.dataset_size);
  c.zeta_anchor_mw = field<double>(data, "zeta_anchor_mw", c.zeta_anchor_mw);
  c.training_support_sizes = field<std::vector<std::size_t>>(data, "support_sizes", c.training_support_sizes);

  const auto mlp = j.value("mlp", nlohmann::json::object());
  c.mlp.hidden = field<std::vector<int>>(mlp, "hidden", c.mlp.hidden);
  c.mlp.hidden_activation = activation_from_string(field<std::string>(mlp, "activation", "sigmoid"));
  c.mlp.learning_rate = field<double>(mlp, "learning_rate", c.mlp.learning_rate);
  c.mlp.epochs = field<int>(mlp, "epochs", c.mlp.epochs);
  c.mlp.batch_size = field<int>(mlp, "batch_size", c.mlp.batch_size);
  c.mlp.normalize = field<bool>(mlp, "normalize", c.mlp.normalize);

  const auto cal = j.value("calibration", nlohmann::json::object());
  c.calibration_samples = field<std::size_t>(cal, "n_samples", c.calibration_samples);

  const auto thr = j.value("se_thresholds", nlohmann::json::object());
  const auto mode = field<std::string>(thr, "mode", "calibrated");
  if (mode == "fixed") {
    c.fixed_thresholds = true;
    if (thr.contains("csv")) {
      std::filesystem::path p = field<std::string>(thr, "csv", "");
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      c.thresholds = load_threshold_csv(p);
    }
    const auto values = thr.value("values", nlohmann::json::object());
    if (!values.is_object()) throw ConfigError("se_thresholds.values must be an object");
    for (const auto& [k, v] : values.items()) {
      if (!v.is_number()) throw ConfigError("threshold for '" + k + "' must be a number");
      c.thresholds[k] = v.get<double>();
    }
    if (c.thresholds.empty()) throw ConfigError("fixed SE thresholds need 'values' or 'csv'");
  } else if (mode != "calibrated") {
    throw ConfigError("se_thresholds.mode must be calibrated or fixed");
  }

  const auto atk = j.value("attack", nlohmann::json::object());
  c.baseline = field<std::string>(atk, "baseline", c.baseline);
  c.alpha_factor = field<double>(atk, "alpha_factor", c.alpha_factor);
  c.mlp_attack.refine = field<bool>(atk, "refine", c.mlp_attack.refine);
  c.mlp_attack.barrier_rounds = field<int>(atk, "barrier_rounds", c.mlp_attack.barrier_rounds);
  c.mlp_attack.steps_per_round = field<int>(atk, "steps_per_round", c.mlp_attack.steps_per_round);
  c.mlp_attack.step_size = field<double>(atk, "step_size", c.mlp_attack.step_size);

  const auto aw = j.value("awareness", nlohmann::json::object());
  c.awareness_trials = field<std::size_t>(aw, "n_trials", c.awareness_trials);

  if (c.candidate_meters.empty() && (j.count("defenses") == 0 || j.count("attacks") == 0)) {
    throw ConfigError("candidate_meters needed to derive the action lists");
  }
  if (c.attacks.empty() || c.defenses.empty()) throw ConfigError("action lists must be nonempty");
  if (c.baseline != "nominal" && c.baseline != "noisy") throw ConfigError("attack.baseline must be nominal or noisy");
  if (!(c.noise_sigma > 0.0)) throw ConfigError("noise_sigma must be positive");
  if (c.load_profile_mw.empty() && c.x0.empty()) throw ConfigError("config needs load_profile_mw or x0");
  return c;
}

/// Parses a JSON or TOML config (TOML when the extension is .toml).
inline nlohmann::json read_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  if (path.extension() == ".toml") {
    try {
      return detail::toml_to_json(toml::parse(text, path.string()));
    } catch (const toml::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(e.source().begin.line) + ": " +
                       std::string(e.description()));
    }
  }
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ":" + std::to_string(detail::line_of_offset(text, e.byte)) +
                     ": malformed JSON (" + e.what() + ")");
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return config_from_json(read_config_document(path), path.parent_path());
}

/// Canonical JSON of the effective configuration; hashed into every report.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["case"] = c.case_path.filename().string();
  j["target_line"] = {c.target_from, c.target_to};
  j["candidate_meters"] = c.candidate_meters;
  j["defenses"] = c.defenses;
  j["attacks"] = c.attacks;
  j["load_profile_mw"] = c.load_profile_mw;
  j["x0"] = c.x0;
  j["noise_sigma"] = c.noise_sigma;
  j["seed"] = c.seed;
  j["dataset"] = {{"n_total", c.dataset_size},
                  {"zeta_anchor_mw", c.zeta_anchor_mw},
                  {"support_sizes", c.training_support_sizes}};
  j["mlp"] = {{"hidden", c.mlp.hidden},
              {"activation", to_string(c.mlp.hidden_activation)},
              {"learning_rate", c.mlp.learning_rate},
              {"epochs", c.mlp.epochs},
              {"batch_size", c.mlp.batch_size},
              {"normalize", c.mlp.normalize}};
  j["calibration"] = {{"n_samples", c.calibration_samples}};
  j["se_thresholds"] = {{"mode", c.fixed_thresholds ? "fixed" : "calibrated"}};
  if (c.fixed_thresholds) j["se_thresholds"]["values"] = c.thresholds;
  j["attack"] = {{"baseline", c.baseline},
                 {"alpha_factor", c.alpha_factor},
                 {"refine", c.mlp_attack.refine},
                 {"barrier_rounds", c.mlp_attack.barrier_rounds},
                 {"steps_per_round", c.mlp_attack.steps_per_round},
                 {"step_size", c.mlp_attack.step_size}};
  j["awareness"] = {{"n_trials", c.awareness_trials}};
  return j;
}

inline std::string config_digest(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(config_to_json(c).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Stages

struct ScenarioContext {
  GridCase grid;
  std::shared_ptr<const EstimatorModel> model;
  LineSensitivity line;
  MeterPartition partition;
  std::vector<std::string> labels;
  std::vector<std::size_t> candidates;  // attackable meter indices
  Eigen::VectorXd x0;
  Eigen::VectorXd z_nominal;
  Eigen::VectorXd z_baseline;  // attack baseline for the MLP constraint
};

inline ScenarioContext prepare_context(const ExperimentConfig& cfg) {
  ScenarioContext ctx;
  ctx.grid = load_case(cfg.case_path);
  const auto h = build_jacobian(ctx.grid, ctx.grid.meters);
  ctx.model = std::make_shared<const EstimatorModel>(build_estimator(h, cfg.noise_sigma));
  ctx.line = line_sensitivity(*ctx.model, ctx.grid, cfg.target_from, cfg.target_to);
  ctx.partition = classify_meters(ctx.line.G, default_neutral_tolerance(ctx.line.G));
  ctx.labels = ctx.grid.meters.labels();
  for (const auto& l : cfg.candidate_meters) {
    const auto idx = ctx.grid.meters.index_of(l);
    if (!idx) throw ConfigError("unknown candidate meter '" + l + "'");
    ctx.candidates.push_back(*idx);
  }
  for (const auto& groups : {cfg.defenses, cfg.attacks}) {
    for (const auto& g : groups) {
      for (const auto& l : g) {
        if (!ctx.grid.meters.index_of(l)) throw ConfigError("unknown meter label '" + l + "'");
      }
    }
  }
  if (!cfg.x0.empty()) {
    if (cfg.x0.size() != ctx.grid.state_dim()) throw ConfigError("x0 has wrong length");
    ctx.x0 = Eigen::Map<const Eigen::VectorXd>(cfg.x0.data(), static_cast<Eigen::Index>(cfg.x0.size()));
  } else {
    ctx.x0 = dc_operating_point(ctx.grid, cfg.load_profile_mw);
  }
  ctx.z_nominal = ctx.model->H * ctx.x0;
  ctx.z_baseline = ctx.z_nominal;
  if (cfg.baseline == "noisy") {
    auto rng = make_rng(derive_seed(cfg.seed, "baseline"));
    add_gaussian_noise(ctx.z_baseline, cfg.noise_sigma, rng);
  }
  return ctx;
}

struct TrainingSummary {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double holdout_accuracy = 0.0;
  std::uint64_t dataset_seed = 0;
  std::uint64_t training_seed = 0;
};

inline DatasetScenario training_scenario(const ScenarioContext& ctx, const ExperimentConfig& cfg,
                                         std::size_t n_total) {
  DatasetScenario sc;
  sc.x0 = ctx.x0;
  sc.noise_sigma = cfg.noise_sigma;
  sc.n_total = n_total;
  sc.attack_generator = make_training_attack_generator(
      ctx.model, ctx.line.G, ctx.candidates, cfg.training_support_sizes, 0.5 * cfg.zeta_anchor_mw,
      2.0 * cfg.zeta_anchor_mw);
  return sc;
}

inline MlpDetector train_detector(const ScenarioContext& ctx, const ExperimentConfig& cfg,
                                  TrainingSummary* summary = nullptr) {
  TrainingSummary local;
  auto& s = summary ? *summary : local;
  s.dataset_seed = derive_seed(cfg.seed, "dataset");
  s.training_seed = derive_seed(cfg.seed, "training");
  const auto data = generate_dataset(*ctx.model, training_scenario(ctx, cfg, cfg.dataset_size), s.dataset_seed);
  MlpTrainConfig tc = cfg.mlp;
  tc.seed = s.training_seed;
  auto det = mlp_train(data, tc, &s.epoch_loss);
  s.train_accuracy = classification_accuracy(det, data);
  std::size_t holdout = std::max<std::size_t>(2, cfg.dataset_size / 5);
  holdout += holdout % 2;
  const auto fresh = generate_dataset(*ctx.model, training_scenario(ctx, cfg, holdout),
                                      derive_seed(cfg.seed, "holdout"));
  s.holdout_accuracy = classification_accuracy(det, fresh);
  return det;
}

/// Every effective support that a game cell or the awareness study needs.
inline std::vector<std::vector<std::size_t>> required_supports(const ScenarioContext& ctx,
                                                               const ExperimentConfig& cfg) {
  std::set<std::vector<std::size_t>> out;
  for (const auto& a : cfg.attacks) {
    const auto att = detail::resolve(a, ctx.labels);
    out.insert(att);
    for (const auto& d : cfg.defenses) {
      const auto def = detail::resolve(d, ctx.labels);
      std::vector<std::size_t> eff;
      std::set_difference(att.begin(), att.end(), def.begin(), def.end(), std::back_inserter(eff));
      if (!eff.empty()) out.insert(eff);
    }
  }
  // Keep Table-style ordering: smaller supports first, then by meter index.
  std::vector<std::vector<std::size_t>> v(out.begin(), out.end());
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.size() < b.size(); });
  return v;
}

inline std::vector<ThresholdCalibration> calibrate_supports(const ScenarioContext& ctx,
                                                            const ExperimentConfig& cfg,
                                                            const MlpDetector& mlp) {
  const auto supports = required_supports(ctx, cfg);
  std::vector<ThresholdCalibration> out(supports.size());
  const auto seed = derive_seed(cfg.seed, "calibration");
  parallel_for(supports.size(), cfg.threads, [&](std::size_t k) {
    out[k] = calibrate_threshold(mlp, *ctx.model, support_key(supports[k], ctx.labels), ctx.z_nominal,
                                 cfg.noise_sigma, cfg.calibration_samples, seed);
  });
  return out;
}

inline ThresholdTable threshold_table(const std::vector<ThresholdCalibration>& cal) {
  ThresholdTable t;
  for (const auto& c : cal) t[c.support] = c.zeta_mw;
  return t;
}

inline GameEngine se_engine(const ScenarioContext& ctx, const ExperimentConfig& cfg,
                            const ThresholdTable& thresholds) {
  return GameEngine{ctx.model, ctx.line.G, ctx.labels, SeGameDetector{thresholds}, cfg.threads};
}

inline GameEngine mlp_engine(const ScenarioContext& ctx, const ExperimentConfig& cfg,
                             std::shared_ptr<const MlpDetector> mlp, const ThresholdTable& thresholds) {
  MlpGameDetector d;
  d.detector = std::move(mlp);
  d.z0 = ctx.z_baseline;
  d.attack = cfg.mlp_attack;
  d.se_thresholds = thresholds;
  d.alpha_factor = cfg.alpha_factor;
  return GameEngine{ctx.model, ctx.line.G, ctx.labels, d, cfg.threads};
}

inline double average_attacker_utility(const Eigen::MatrixXd& s) {
  if (s.size() == 0) throw ConfigError("empty game matrix");
  return s.mean();
}

// ---------------------------------------------------------------------------
// Adversary awareness

struct AwarenessCell {
  std::string bdd;        // "mlp" or "se"
  std::string awareness;  // "aware" or "unaware"
  double detection_rate = 0.0;
  std::size_t n_trials = 0;
  double mean_attack_norm = 0.0;  // MW
  double mean_utility = 0.0;      // MW
};

struct AwarenessReport {
  AwarenessCell mlp_aware;
  AwarenessCell mlp_unaware;
  AwarenessCell se_aware;
  AwarenessCell se_unaware;
  double fa_mlp = 0.0;
  double fa_se = 0.0;  // mean over the attacked supports' thresholds
  std::uint64_t seed = 0;

  std::vector<const AwarenessCell*> cells() const { return {&mlp_aware, &mlp_unaware, &se_aware, &se_unaware}; }
};

/// Aware attackers target the deployed detector; unaware attackers optimise
/// against the other detector family at its own calibrated parameters. All
/// four cells share the same noise draws.
inline AwarenessReport awareness_experiment(const ScenarioContext& ctx, const ExperimentConfig& cfg,
                                            std::shared_ptr<const MlpDetector> mlp,
                                            const ThresholdTable& thresholds, std::size_t n_trials,
                                            std::uint64_t seed, double attack_scale = 1.0) {
  if (n_trials == 0) throw ConfigError("awareness needs at least one trial");
  std::vector<std::vector<std::size_t>> supports;
  for (const auto& a : cfg.attacks) supports.push_back(detail::resolve(a, ctx.labels));

  AwarenessReport rep;
  rep.seed = seed;
  const auto safe = draw_safe_samples(ctx.z_nominal, cfg.noise_sigma,
                                      std::max<std::size_t>(cfg.calibration_samples, 100),
                                      derive_seed(seed, "false-alarm"));
  rep.fa_mlp = false_alarm_rate(*mlp, safe);
  std::vector<double> zetas;
  for (const auto& s : supports) {
    const double zeta = detail::lookup_threshold(thresholds, support_key(s, ctx.labels));
    zetas.push_back(zeta);
    const double fa_se = false_alarm_rate(SeDetector(ctx.model, zeta), safe);
    if (std::abs(fa_se - rep.fa_mlp) > 0.05) {
      throw CalibrationMismatchError("false-alarm mismatch on " + support_key(s, ctx.labels) + ": se " +
                                     std::to_string(fa_se) + " vs mlp " + std::to_string(rep.fa_mlp));
    }
    rep.fa_se += fa_se / static_cast<double>(supports.size());
  }

  const auto engine_mlp = mlp_engine(ctx, cfg, mlp, thresholds);
  const auto engine_se = se_engine(ctx, cfg, thresholds);
  std::vector<Eigen::VectorXd> se_attack(supports.size());
  std::vector<Eigen::VectorXd> mlp_attack(supports.size());
  parallel_for(supports.size(), cfg.threads, [&](std::size_t k) {
    se_attack[k] = attack_scale * solve_cell_attack(engine_se, supports[k]).z_a;
    mlp_attack[k] = attack_scale * solve_cell_attack(engine_mlp, supports[k]).z_a;
  });

  std::vector<int> hits(4 * n_trials, 0);
  parallel_for(n_trials, cfg.threads, [&](std::size_t t) {
    const std::size_t k = t % supports.size();
    auto rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    Eigen::VectorXd z = ctx.z_nominal;
    add_gaussian_noise(z, cfg.noise_sigma, rng);
    const SeDetector se(ctx.model, zetas[k]);
    hits[4 * t + 0] = flags(*mlp, z + mlp_attack[k]);
    hits[4 * t + 1] = flags(*mlp, z + se_attack[k]);
    hits[4 * t + 2] = flags(se, z + se_attack[k]);
    hits[4 * t + 3] = flags(se, z + mlp_attack[k]);
  });

  auto fill = [&](AwarenessCell& cell, const char* bdd, const char* aw, int slot,
                  const std::vector<Eigen::VectorXd>& attacks) {
    cell.bdd = bdd;
    cell.awareness = aw;
    cell.n_trials = n_trials;
    std::size_t h = 0;
    double norm = 0.0;
    double util = 0.0;
    for (std::size_t t = 0; t < n_trials; ++t) {
      h += static_cast<std::size_t>(hits[4 * t + static_cast<std::size_t>(slot)]);
      norm += attacks[t % supports.size()].norm();
      util += attack_utility(ctx.line.G, attacks[t % supports.size()]);
    }
    cell.detection_rate = static_cast<double>(h) / static_cast<double>(n_trials);
    cell.mean_attack_norm = norm / static_cast<double>(n_trials);
    cell.mean_utility = util / static_cast<double>(n_trials);
  };
  fill(rep.mlp_aware, "mlp", "aware", 0, mlp_attack);
  fill(rep.mlp_unaware, "mlp", "unaware", 1, se_attack);
  fill(rep.se_aware, "se", "aware", 2, se_attack);
  fill(rep.se_unaware, "se", "unaware", 3, mlp_attack);
  return rep;
}

// ---------------------------------------------------------------------------
// Full pipeline

struct SolvedGame {
  GameMatrix matrix;
  GameSolution solution;
  double average_utility = 0.0;
};

struct PipelineResult {
  ExperimentConfig config;
  DetectorChoice choice = DetectorChoice::kBoth;
  std::string digest;
  std::optional<TrainingSummary> training;
  std::shared_ptr<const MlpDetector> mlp;
  std::vector<ThresholdCalibration> calibration;
  ThresholdTable thresholds;
  std::optional<SolvedGame> se_game;
  std::optional<SolvedGame> mlp_game;
  std::optional<AwarenessReport> awareness;
};

enum class Stage { kTraining, kCalibration, kSeGame, kMlpGame, kAwareness };

using StageCallback = std::function<void(const PipelineResult&, Stage)>;

inline SolvedGame solve_built_game(GameMatrix m) {
  SolvedGame g;
  g.solution = solve_game(m.S);
  g.average_utility = average_attacker_utility(m.S);
  g.matrix = std::move(m);
  return g;
}

/// Which stages to run; later stages reuse the earlier ones' outputs.
struct PipelineOptions {
  DetectorChoice detector = DetectorChoice::kBoth;
  bool games = true;
  bool awareness = true;
};

inline PipelineResult run_full_pipeline(const ExperimentConfig& cfg, const PipelineOptions& opt = {},
                                        const StageCallback& on_stage = {}) {
  const DetectorChoice choice = opt.detector;
  if (cfg.attacks.empty() || cfg.defenses.empty()) throw ConfigError("action lists must be nonempty");
  PipelineResult r;
  r.config = cfg;
  r.choice = choice;
  r.digest = config_digest(cfg);
  auto notify = [&](Stage s) {
    if (on_stage) on_stage(r, s);
  };
  const auto ctx = prepare_context(cfg);

  // The MLP is needed for calibration and awareness even when only the SE
  // game is requested.
  const bool need_mlp = choice != DetectorChoice::kSe || !cfg.fixed_thresholds || opt.awareness;
  if (need_mlp) {
    TrainingSummary summary;
    r.mlp = std::make_shared<const MlpDetector>(train_detector(ctx, cfg, &summary));
    r.training = std::move(summary);
    notify(Stage::kTraining);
  }
  if (cfg.fixed_thresholds) {
    r.thresholds = cfg.thresholds;
  } else {
    r.calibration = calibrate_supports(ctx, cfg, *r.mlp);
    r.thresholds = threshold_table(r.calibration);
  }
  notify(Stage::kCalibration);

  if (opt.games && choice != DetectorChoice::kMlp) {
    r.se_game = solve_built_game(build_game_matrix(se_engine(ctx, cfg, r.thresholds), cfg.defenses, cfg.attacks));
    notify(Stage::kSeGame);
  }
  if (opt.games && choice != DetectorChoice::kSe) {
    r.mlp_game = solve_built_game(
        build_game_matrix(mlp_engine(ctx, cfg, r.mlp, r.thresholds), cfg.defenses, cfg.attacks));
    notify(Stage::kMlpGame);
  }
  if (opt.awareness) {
    r.awareness = awareness_experiment(ctx, cfg, r.mlp, r.thresholds, cfg.awareness_trials,
                                       derive_seed(cfg.seed, "awareness"));
    notify(Stage::kAwareness);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string provenance_line(const PipelineResult& r) {
  return "config_digest=" + r.digest + " seed=" + std::to_string(r.config.seed) + " version=" + kVersion;
}

inline nlohmann::json solved_game_json(const SolvedGame& g) {
  const auto& s = g.solution;
  nlohmann::json pure = {{"minimax_mw", s.pure.minimax}, {"maximin_mw", s.pure.maximin}};
  if (s.pure.saddle) {
    pure["saddle"] = {{"defense", g.matrix.rows[static_cast<std::size_t>(s.pure.saddle->row)]},
                      {"attack", g.matrix.cols[static_cast<std::size_t>(s.pure.saddle->col)]},
                      {"value_mw", s.pure.saddle->value}};
  } else {
    pure["saddle"] = nullptr;
  }
  return {{"pure", pure},
          {"defender", strategy_json(s.defender, g.matrix.rows, s.check.duality_gap)},
          {"attacker", strategy_json(s.attacker, g.matrix.cols, s.check.duality_gap)},
          {"average_utility_mw", g.average_utility}};
}

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << text;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

/// Writes whatever stages `r` holds. Safe to call repeatedly while the
/// pipeline progresses.
inline void write_run_directory(const PipelineResult& r, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "plotdata");
  const std::string prov = "# " + provenance_line(r) + "\n";
  nlohmann::json files = nlohmann::json::object();
  auto emit = [&](const std::string& name, const std::string& text) {
    detail::write_text(dir / name, text);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(text)));
    files[name] = buf;
  };

  if (r.training) {
    std::ostringstream loss;
    loss << prov << "epoch,loss\n";
    for (std::size_t e = 0; e < r.training->epoch_loss.size(); ++e) {
      loss << e + 1 << "," << detail::fmt(r.training->epoch_loss[e]) << "\n";
    }
    emit("plotdata/training_loss.csv", loss.str());
    emit("mlp.json", to_json(*r.mlp).dump(2) + "\n");
  }
  if (!r.calibration.empty() || r.config.fixed_thresholds) {
    std::ostringstream cal;
    cal << prov;
    if (r.config.fixed_thresholds) {
      cal << "support,zeta_mw\n";
      for (const auto& [k, v] : r.thresholds) cal << k << "," << detail::fmt(v) << "\n";
    } else {
      write_calibration_csv(cal, r.calibration);
    }
    emit("calibration.csv", cal.str());
  }

  nlohmann::json strategies = {{"provenance", provenance_line(r)}};
  auto game_files = [&](const std::optional<SolvedGame>& g, const std::string& name) {
    if (!g) return;
    std::ostringstream csv;
    write_game_csv(csv, g->matrix, provenance_line(r));
    emit(name + ".csv", csv.str());
    std::ostringstream lng;
    lng << prov << "defense,attack,utility_mw\n";
    for (std::size_t i = 0; i < g->matrix.rows.size(); ++i) {
      for (std::size_t j = 0; j < g->matrix.cols.size(); ++j) {
        lng << g->matrix.rows[i] << "," << g->matrix.cols[j] << ","
            << detail::fmt(g->matrix.S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << "\n";
      }
    }
    emit("plotdata/" + name + "_long.csv", lng.str());
    strategies[name == "game_se" ? "se" : "mlp"] = solved_game_json(*g);
  };
  game_files(r.se_game, "game_se");
  game_files(r.mlp_game, "game_mlp");
  if (r.se_game || r.mlp_game) {
    emit("strategies.json", strategies.dump(2) + "\n");
    std::ostringstream lng;
    lng << prov << "game,side,action,probability\n";
    for (const auto& [name, g] : {std::pair{"se", &r.se_game}, std::pair{"mlp", &r.mlp_game}}) {
      if (!*g) continue;
      const auto& sol = (*g)->solution;
      for (std::size_t i = 0; i < (*g)->matrix.rows.size(); ++i) {
        lng << name << ",defender," << (*g)->matrix.rows[i] << ","
            << detail::fmt(sol.defender.probabilities(static_cast<Eigen::Index>(i))) << "\n";
      }
      for (std::size_t j = 0; j < (*g)->matrix.cols.size(); ++j) {
        lng << name << ",attacker," << (*g)->matrix.cols[j] << ","
            << detail::fmt(sol.attacker.probabilities(static_cast<Eigen::Index>(j))) << "\n";
      }
    }
    emit("plotdata/strategies_long.csv", lng.str());
  }
  if (r.awareness) {
    std::ostringstream aw;
    aw << prov << "bdd,awareness,detection_rate,n_trials,mean_attack_norm_mw,mean_utility_mw,false_alarm_rate\n";
    for (const auto* c : r.awareness->cells()) {
      aw << c->bdd << "," << c->awareness << "," << detail::fmt(c->detection_rate) << "," << c->n_trials << ","
         << detail::fmt(c->mean_attack_norm) << "," << detail::fmt(c->mean_utility) << ","
         << detail::fmt(c->bdd == "mlp" ? r.awareness->fa_mlp : r.awareness->fa_se) << "\n";
    }
    emit("awareness.csv", aw.str());
    emit("plotdata/awareness_long.csv", aw.str());
  }

  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["config_digest"] = r.digest;
  manifest["master_seed"] = r.config.seed;
  manifest["config"] = config_to_json(r.config);
  manifest["detector"] = to_string(r.choice);
  if (r.choice != DetectorChoice::kBoth && (r.se_game || r.mlp_game)) {
    manifest["restriction"] = std::string("only the ") + (r.choice == DetectorChoice::kSe ? "SE" : "MLP") +
                              " game was built";
  }
  manifest["seeds"] = {{"dataset", derive_seed(r.config.seed, "dataset")},
                       {"training", derive_seed(r.config.seed, "training")},
                       {"calibration", derive_seed(r.config.seed, "calibration")},
                       {"awareness", derive_seed(r.config.seed, "awareness")}};
  if (r.training) {
    manifest["training"] = {{"train_accuracy", r.training->train_accuracy},
                            {"holdout_accuracy", r.training->holdout_accuracy},
                            {"final_loss", r.training->epoch_loss.empty() ? 0.0 : r.training->epoch_loss.back()}};
  }
  if (r.se_game) manifest["average_utility_se_mw"] = r.se_game->average_utility;
  if (r.mlp_game) manifest["average_utility_mlp_mw"] = r.mlp_game->average_utility;
  manifest["files"] = files;
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace fdi
