#pragma once

// Attacker/defender zero-sum game: payoff construction, saddle-point test and
// mixed strategies via linear programming.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "fdi/attack.hpp"
#include "fdi/errors.hpp"
#include "fdi/grid_model.hpp"
#include "fdi/lp.hpp"
#include "fdi/parallel.hpp"
#include "json.hpp"

namespace fdi {

/// Rows are defended meter sets, columns attacked meter sets; entries are the
/// attacker's utility in MW.
struct GameMatrix {
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  Eigen::MatrixXd S;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto first = cell.find_first_not_of(" \t\r");
    const auto last = cell.find_last_not_of(" \t\r");
    out.push_back(first == std::string::npos ? "" : cell.substr(first, last - first + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Header row holds the attack labels (first cell ignored); each following row
/// is a defense label and its utilities. Lines starting with '#' are comments.
inline GameMatrix read_game_csv(std::istream& in, const std::string& source = "<stream>") {
  GameMatrix g;
  std::vector<std::vector<double>> values;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    auto cells = detail::split_csv_line(line);
    if (!header) {
      if (cells.size() < 2) throw ParseError(source + ":" + std::to_string(lineno) + ": header needs attack labels");
      g.cols.assign(cells.begin() + 1, cells.end());
      header = true;
      continue;
    }
    if (cells.size() != g.cols.size() + 1) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(g.cols.size() + 1) + " fields");
    }
    g.rows.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t k = 1; k < cells.size(); ++k) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cells[k], &used));
        if (used != cells[k].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParseError(source + ":" + std::to_string(lineno) + ": bad number '" + cells[k] + "'");
      }
      if (!std::isfinite(row.back())) {
        throw ParseError(source + ":" + std::to_string(lineno) + ": non-finite entry");
      }
    }
    values.push_back(std::move(row));
  }
  if (!header || values.empty()) throw ParseError(source + ": game matrix is empty");
  g.S.resize(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(g.cols.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = 0; j < g.cols.size(); ++j) {
      g.S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i][j];
    }
  }
  return g;
}

inline GameMatrix load_game_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open game matrix " + path.string());
  return read_game_csv(in, path.string());
}

inline void write_game_csv(std::ostream& out, const GameMatrix& g,
                           const std::string& comment = "") {
  if (!comment.empty()) out << "# " << comment << "\n";
  out << "def\\att";
  for (const auto& c : g.cols) out << "," << c;
  out << "\n";
  char buf[64];
  for (Eigen::Index i = 0; i < g.S.rows(); ++i) {
    out << g.rows[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < g.S.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), ",%.6f", g.S(i, j));
      out << buf;
    }
    out << "\n";
  }
}

struct SaddlePoint {
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double value = 0.0;
};

struct PureStrategyAnalysis {
  double minimax = 0.0;  // min over rows of the row maximum
  double maximin = 0.0;  // max over columns of the column minimum
  std::optional<SaddlePoint> saddle;
};

inline PureStrategyAnalysis find_pure_strategy(const Eigen::MatrixXd& s) {
  if (s.size() == 0) throw ConfigError("empty game matrix");
  PureStrategyAnalysis out;
  Eigen::Index best_row = 0;
  out.minimax = s.row(0).maxCoeff();
  for (Eigen::Index i = 1; i < s.rows(); ++i) {
    const double v = s.row(i).maxCoeff();
    if (v < out.minimax) {
      out.minimax = v;
      best_row = i;
    }
  }
  Eigen::Index best_col = 0;
  out.maximin = s.col(0).minCoeff();
  for (Eigen::Index j = 1; j < s.cols(); ++j) {
    const double v = s.col(j).minCoeff();
    if (v > out.maximin) {
      out.maximin = v;
      best_col = j;
    }
  }
  if (std::abs(out.minimax - out.maximin) <= 1e-12 * (1.0 + std::abs(out.minimax))) {
    out.saddle = SaddlePoint{best_row, best_col, s(best_row, best_col)};
  }
  return out;
}

enum class Side { kDefender, kAttacker };

inline const char* to_string(Side s) { return s == Side::kDefender ? "defender" : "attacker"; }

struct MixedStrategy {
  Side side = Side::kDefender;
  Eigen::VectorXd probabilities;
  double game_value = 0.0;  // MW, shift removed
  Eigen::VectorXd scaled;   // LP solution before normalisation
  double scale = 0.0;       // 1 / sum(scaled): the shifted game value
  double shift = 0.0;       // constant added to S before solving
  bool alternative_optima = false;
};

namespace detail {

inline double positivity_shift(const Eigen::MatrixXd& s) { return 1.0 + std::abs(s.minCoeff()); }

inline MixedStrategy normalise(Side side, const LpSolution& sol, double shift) {
  if (sol.status != LpStatus::kOptimal) {
    throw DegenerateGameError(std::string("game LP ended ") + to_string(sol.status));
  }
  const double total = sol.x.sum();
  if (!(total > 1e-12)) throw DegenerateGameError("game LP returned a zero solution");
  MixedStrategy m;
  m.side = side;
  m.scaled = sol.x;
  m.probabilities = (sol.x / total).cwiseMax(0.0);
  m.probabilities /= m.probabilities.sum();
  m.scale = 1.0 / total;
  m.shift = shift;
  m.game_value = m.scale - shift;
  m.alternative_optima = sol.alternative_optima;
  return m;
}

}  // namespace detail

/// Row player (defender, minimiser): max 1'q~ s.t. S'q~ <= 1, q~ >= 0 on the
/// shifted matrix, then q = q~ / 1'q~.
inline MixedStrategy defender_mixed_strategy(const Eigen::MatrixXd& s) {
  if (s.size() == 0) throw ConfigError("empty game matrix");
  const double shift = detail::positivity_shift(s);
  const Eigen::MatrixXd a = s.array() + shift;
  LpProblem lp;
  lp.sense = ObjectiveSense::kMaximize;
  lp.objective = Eigen::VectorXd::Ones(a.rows());
  lp.A = a.transpose();
  lp.row_sense.assign(static_cast<std::size_t>(a.cols()), Sense::kLessEqual);
  lp.rhs = Eigen::VectorXd::Ones(a.cols());
  return detail::normalise(Side::kDefender, solve_lp(lp), shift);
}

/// Column player (attacker, maximiser): min 1'u~ s.t. S u~ >= 1, u~ >= 0.
inline MixedStrategy attacker_mixed_strategy(const Eigen::MatrixXd& s) {
  if (s.size() == 0) throw ConfigError("empty game matrix");
  const double shift = detail::positivity_shift(s);
  const Eigen::MatrixXd a = s.array() + shift;
  LpProblem lp;
  lp.sense = ObjectiveSense::kMinimize;
  lp.objective = Eigen::VectorXd::Ones(a.cols());
  lp.A = a;
  lp.row_sense.assign(static_cast<std::size_t>(a.rows()), Sense::kGreaterEqual);
  lp.rhs = Eigen::VectorXd::Ones(a.rows());
  return detail::normalise(Side::kAttacker, solve_lp(lp), shift);
}

struct GameValueCheck {
  double v_def = 0.0;     // best attacker response to q
  double v_att = 0.0;     // best defender response to u
  double duality_gap = 0.0;
  double expected = 0.0;  // q' S u
};

inline GameValueCheck game_value_check(const Eigen::MatrixXd& s, const Eigen::VectorXd& q,
                                       const Eigen::VectorXd& u) {
  if (q.size() != s.rows() || u.size() != s.cols()) throw DimensionError("strategy length mismatch");
  GameValueCheck c;
  c.v_def = (q.transpose() * s).maxCoeff();
  c.v_att = (s * u).minCoeff();
  c.duality_gap = c.v_def - c.v_att;
  c.expected = q.dot(s * u);
  return c;
}

inline nlohmann::json strategy_json(const MixedStrategy& m, const std::vector<std::string>& labels,
                                    double duality_gap) {
  return {{"side", to_string(m.side)},
          {"labels", labels},
          {"probabilities",
           std::vector<double>(m.probabilities.data(), m.probabilities.data() + m.probabilities.size())},
          {"value_mw", m.game_value},
          {"duality_gap", duality_gap},
          {"shift_applied", m.shift},
          {"alternative_optima", m.alternative_optima}};
}

struct GameSolution {
  PureStrategyAnalysis pure;
  MixedStrategy defender;
  MixedStrategy attacker;
  GameValueCheck check;
};

inline GameSolution solve_game(const Eigen::MatrixXd& s) {
  GameSolution g;
  g.pure = find_pure_strategy(s);
  g.defender = defender_mixed_strategy(s);
  g.attacker = attacker_mixed_strategy(s);
  g.check = game_value_check(s, g.defender.probabilities, g.attacker.probabilities);
  return g;
}

// ---------------------------------------------------------------------------
// Payoff construction

using MeterGroup = std::vector<std::string>;

inline std::string group_key(const MeterGroup& group) {
  std::string key;
  for (const auto& l : group) key += l;
  return key;
}

/// Per-support SE thresholds keyed by the concatenated labels in meter order.
using ThresholdTable = std::map<std::string, double>;

struct SeGameDetector {
  ThresholdTable thresholds;
};

struct MlpGameDetector {
  std::shared_ptr<const MlpDetector> detector;
  Eigen::VectorXd z0;
  MlpAttackConfig attack;
  ThresholdTable se_thresholds;  // anchors alpha_max when present
  double alpha_factor = 10.0;
};

struct GameEngine {
  std::shared_ptr<const EstimatorModel> model;
  Eigen::VectorXd G;
  std::vector<std::string> labels;  // meter labels in measurement order
  std::variant<SeGameDetector, MlpGameDetector> detector;
  int threads = 1;
};

namespace detail {

inline std::vector<std::size_t> resolve(const MeterGroup& group, const std::vector<std::string>& labels) {
  std::vector<std::size_t> out;
  for (const auto& l : group) {
    const auto it = std::find(labels.begin(), labels.end(), l);
    if (it == labels.end()) throw ConfigError("unknown meter label '" + l + "'");
    out.push_back(static_cast<std::size_t>(it - labels.begin()));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline double lookup_threshold(const ThresholdTable& t, const std::string& key) {
  const auto it = t.find(key);
  if (it == t.end()) throw MissingThresholdError("no SE threshold for support " + key);
  return it->second;
}

}  // namespace detail

/// Optimal attack for one effective support (already stripped of defended meters).
inline AttackResult solve_cell_attack(const GameEngine& e, const std::vector<std::size_t>& support) {
  const std::string key = support_key(support, e.labels);
  if (const auto* se = std::get_if<SeGameDetector>(&e.detector)) {
    const double zeta = detail::lookup_threshold(se->thresholds, key);
    return solve_attack_se(*e.model, make_attack_problem(e.G, support, SeBudget{zeta}));
  }
  const auto& ml = std::get<MlpGameDetector>(e.detector);
  MlpAttackConfig cfg = ml.attack;
  if (!ml.se_thresholds.empty()) {
    const double zeta = detail::lookup_threshold(ml.se_thresholds, key);
    const auto se = solve_attack_se(*e.model, make_attack_problem(e.G, support, SeBudget{zeta}));
    cfg.alpha_max = ml.alpha_factor * std::max(se.objective, 1e-9);
  } else if (!(cfg.alpha_max > 0.0)) {
    throw MissingThresholdError("MLP attack on " + key + " needs alpha_max or SE thresholds");
  }
  return solve_attack_mlp(*e.model, make_attack_problem(e.G, support, MlpBoundary{ml.detector, ml.z0}),
                          cfg);
}

inline GameMatrix build_game_matrix(const GameEngine& e, const std::vector<MeterGroup>& defenses,
                                    const std::vector<MeterGroup>& attacks) {
  if (!e.model) throw ConfigError("game engine needs an estimator model");
  if (defenses.empty() || attacks.empty()) throw ConfigError("game needs defense and attack actions");
  GameMatrix g;
  for (const auto& d : defenses) g.rows.push_back(group_key(d));
  for (const auto& a : attacks) g.cols.push_back(group_key(a));
  g.S = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(defenses.size()),
                              static_cast<Eigen::Index>(attacks.size()));
  std::vector<std::vector<std::size_t>> def_idx;
  std::vector<std::vector<std::size_t>> att_idx;
  for (const auto& d : defenses) def_idx.push_back(detail::resolve(d, e.labels));
  for (const auto& a : attacks) att_idx.push_back(detail::resolve(a, e.labels));

  // Thresholds are checked up front so a gap in the table fails before any
  // attack is solved.
  const ThresholdTable* table = nullptr;
  if (const auto* se = std::get_if<SeGameDetector>(&e.detector)) table = &se->thresholds;
  if (const auto* ml = std::get_if<MlpGameDetector>(&e.detector); ml && !ml->se_thresholds.empty()) {
    table = &ml->se_thresholds;
  }
  if (table) {
    for (const auto& d : def_idx) {
      for (const auto& a : att_idx) {
        std::vector<std::size_t> eff;
        std::set_difference(a.begin(), a.end(), d.begin(), d.end(), std::back_inserter(eff));
        if (!eff.empty()) detail::lookup_threshold(*table, support_key(eff, e.labels));
      }
    }
  }

  const std::size_t cols = attacks.size();
  parallel_for(defenses.size() * cols, e.threads, [&](std::size_t cell) {
    const std::size_t i = cell / cols;
    const std::size_t j = cell % cols;
    std::vector<std::size_t> eff;
    std::set_difference(att_idx[j].begin(), att_idx[j].end(), def_idx[i].begin(), def_idx[i].end(),
                        std::back_inserter(eff));
    if (eff.empty()) return;
    try {
      // The attack maximises c'z_a, which can still move the flow the wrong
      // way on mixed-sign supports; z_a = 0 is feasible, so it abstains.
      g.S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::max(0.0, solve_cell_attack(e, eff).utility);
    } catch (const Error& err) {
      throw GameCellError(err, i, j, "[def " + g.rows[i] + " / att " + g.cols[j] + "]");
    }
  });
  return g;
}

}  // namespace fdi
