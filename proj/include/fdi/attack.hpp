#pragma once

// Stealth injection synthesis against the two detectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "fdi/bdd.hpp"
#include "fdi/errors.hpp"
#include "fdi/grid_model.hpp"
#include "fdi/rng.hpp"
#include "json.hpp"

namespace fdi {

/// Meters whose positive injection raises (K) or lowers (L) the estimated
/// target-line flow.
struct MeterPartition {
  std::vector<std::size_t> K;
  std::vector<std::size_t> L;
  std::vector<std::size_t> neutral;
};

inline double default_neutral_tolerance(const Eigen::VectorXd& g) {
  return g.size() == 0 ? 0.0 : 1e-9 * g.cwiseAbs().maxCoeff();
}

inline MeterPartition classify_meters(const Eigen::VectorXd& g, double eps) {
  if (!(eps >= 0.0)) throw ConfigError("partition tolerance must be >= 0");
  MeterPartition p;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (g(i) > eps) {
      p.K.push_back(k);
    } else if (g(i) < -eps) {
      p.L.push_back(k);
    } else {
      p.neutral.push_back(k);
    }
  }
  return p;
}

/// +1 on K, -1 on L, 0 on neutral meters.
inline Eigen::VectorXd objective_signs(const MeterPartition& p, Eigen::Index m) {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(m);
  for (auto k : p.K) c(static_cast<Eigen::Index>(k)) = 1.0;
  for (auto k : p.L) c(static_cast<Eigen::Index>(k)) = -1.0;
  return c;
}

struct SeBudget {
  double zeta = 0.0;  // MW
};

struct MlpBoundary {
  std::shared_ptr<const MlpDetector> detector;
  Eigen::VectorXd z0;  // baseline measurement the injection is added to
};

struct AttackProblem {
  std::vector<std::size_t> support;  // attackable meter indices, sorted
  Eigen::VectorXd c;                 // objective signs over all meters
  Eigen::VectorXd G;                 // target-line sensitivity (for the utility)
  std::variant<SeBudget, MlpBoundary> constraint;
};

/// Builds a problem with the default partition tolerance.
inline AttackProblem make_attack_problem(const Eigen::VectorXd& g,
                                         std::vector<std::size_t> support,
                                         std::variant<SeBudget, MlpBoundary> constraint) {
  std::sort(support.begin(), support.end());
  support.erase(std::unique(support.begin(), support.end()), support.end());
  for (auto k : support) {
    if (static_cast<Eigen::Index>(k) >= g.size()) throw DimensionError("support index out of range");
  }
  AttackProblem p;
  p.support = std::move(support);
  p.c = objective_signs(classify_meters(g, default_neutral_tolerance(g)), g.size());
  p.G = g;
  p.constraint = std::move(constraint);
  return p;
}

struct AttackDiagnostics {
  std::string method;
  int iterations = 0;
  double bracket_lo = 0.0;  // bisection bounds on the step along the direction
  double bracket_hi = 0.0;
  double alpha_max = 0.0;
  bool capped = false;  // MLP never rejected along the search direction
  bool refined = false;  // barrier phase improved on bisection
};

struct AttackResult {
  Eigen::VectorXd z_a;
  double objective = 0.0;  // c' z_a
  double utility = 0.0;    // G' z_a, change in estimated line flow (MW)
  bool feasible = true;
  double detector_margin = 0.0;  // zeta - ||W z_a||  or  0.5 - score
  AttackDiagnostics diagnostics;
};

/// Attacker utility; the defender's is its negation.
inline double attack_utility(const Eigen::VectorXd& g, const Eigen::VectorXd& z_a) {
  if (g.size() != z_a.size()) throw DimensionError("sensitivity/injection length mismatch");
  return g.dot(z_a);
}

namespace detail {

struct Restricted {
  Eigen::MatrixXd B;  // A' A with A = W restricted to support columns
  Eigen::VectorXd c;  // objective signs on the support
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig;
  double null_tol = 0.0;
};

inline Restricted restrict_to_support(const EstimatorModel& model, const AttackProblem& p) {
  if (p.c.size() != model.meter_count()) throw DimensionError("objective vector length mismatch");
  if (p.G.size() != model.meter_count()) throw DimensionError("sensitivity length mismatch");
  if (p.support.empty()) throw ConfigError("attack support is empty");
  const auto s = static_cast<Eigen::Index>(p.support.size());
  Eigen::MatrixXd a(model.meter_count(), s);
  Restricted r;
  r.c.resize(s);
  for (Eigen::Index k = 0; k < s; ++k) {
    const auto idx = static_cast<Eigen::Index>(p.support[static_cast<std::size_t>(k)]);
    if (idx >= model.meter_count()) throw DimensionError("support index out of range");
    a.col(k) = model.W.col(idx);
    r.c(k) = p.c(idx);
  }
  r.B = a.transpose() * a;
  r.eig.compute(r.B);
  r.null_tol = 1e-10 * std::max(1.0, r.eig.eigenvalues().cwiseAbs().maxCoeff());
  return r;
}

inline Eigen::VectorXd embed(const AttackProblem& p, const Eigen::VectorXd& y, Eigen::Index m) {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(m);
  for (std::size_t k = 0; k < p.support.size(); ++k) {
    z(static_cast<Eigen::Index>(p.support[k])) = y(static_cast<Eigen::Index>(k));
  }
  return z;
}

// Throws UnboundedError if B has a null direction along which c grows.
inline void check_bounded(const Restricted& r, const AttackProblem& p, Eigen::Index m) {
  const double cnorm = r.c.norm();
  for (Eigen::Index i = 0; i < r.eig.eigenvalues().size(); ++i) {
    if (r.eig.eigenvalues()(i) > r.null_tol) continue;
    Eigen::VectorXd v = r.eig.eigenvectors().col(i);
    const double gain = r.c.dot(v);
    if (std::abs(gain) > 1e-9 * std::max(1.0, cnorm)) {
      if (gain < 0) v = -v;
      throw UnboundedError("support contains a stealth direction: the SE attack is unbounded",
                           embed(p, v, m));
    }
  }
}

inline double se_budget(const AttackProblem& p) {
  const auto* budget = std::get_if<SeBudget>(&p.constraint);
  if (!budget) throw ConfigError("problem does not carry an SE budget");
  if (!(budget->zeta >= 0.0)) throw ConfigError("zeta must be >= 0");
  return budget->zeta;
}

inline AttackResult finish_se(const EstimatorModel& model, const AttackProblem& p,
                              Eigen::VectorXd z_a, double zeta) {
  AttackResult r;
  r.objective = p.c.dot(z_a);
  r.utility = attack_utility(p.G, z_a);
  const double res = (model.W * z_a).norm();
  r.detector_margin = zeta - res;
  r.feasible = res <= zeta + 1e-6;
  r.z_a = std::move(z_a);
  return r;
}

}  // namespace detail

/// Closed-form optimum of max c'z_a s.t. ||W z_a|| <= zeta, z_a = 0 off support.
inline AttackResult solve_attack_se(const EstimatorModel& model, const AttackProblem& p) {
  const double zeta = detail::se_budget(p);
  const auto r = detail::restrict_to_support(model, p);
  detail::check_bounded(r, p, model.meter_count());

  // Pseudo-inverse on the range of B; c is orthogonal to its null space here.
  const auto& vals = r.eig.eigenvalues();
  const auto& vecs = r.eig.eigenvectors();
  Eigen::VectorXd binv_c = Eigen::VectorXd::Zero(r.c.size());
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    if (vals(i) <= r.null_tol) continue;
    binv_c += vecs.col(i) * (vecs.col(i).dot(r.c) / vals(i));
  }
  const double quad = r.c.dot(binv_c);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(r.c.size());
  if (quad > 0.0) y = zeta * (binv_c / std::sqrt(quad));
  auto res = detail::finish_se(model, p, detail::embed(p, y, model.meter_count()), zeta);
  res.diagnostics.method = "se_closed_form";
  return res;
}

/// Projected gradient ascent on the same problem; an independent check of
/// solve_attack_se. `start`, when non-empty, is the initial injection.
inline AttackResult solve_attack_se_iterative(const EstimatorModel& model,
                                              const AttackProblem& p, int steps, double tol,
                                              const Eigen::VectorXd& start = {}) {
  const double zeta = detail::se_budget(p);
  const auto r = detail::restrict_to_support(model, p);
  const auto m = model.meter_count();
  const Eigen::Index s = r.c.size();

  if (zeta == 0.0 || r.c.isZero(0.0)) {
    auto res = detail::finish_se(model, p, Eigen::VectorXd::Zero(m), zeta);
    res.diagnostics.method = "se_projected_gradient";
    return res;
  }
  Eigen::VectorXd y = Eigen::VectorXd::Zero(s);
  if (start.size() == m) {
    for (Eigen::Index k = 0; k < s; ++k) {
      y(k) = start(static_cast<Eigen::Index>(p.support[static_cast<std::size_t>(k)]));
    }
  }

  const auto& vals = r.eig.eigenvalues();
  const auto& vecs = r.eig.eigenvectors();
  // Euclidean projection onto {y : y'By <= zeta^2}: y = (I + mu B)^-1 v.
  auto project = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    if (v.dot(r.B * v) <= zeta * zeta) return v;
    const Eigen::VectorXd vt = vecs.transpose() * v;
    auto excess = [&](double mu) {
      double q = 0.0;
      for (Eigen::Index i = 0; i < s; ++i) {
        const double lam = std::max(vals(i), 0.0);
        const double d = 1.0 + mu * lam;
        q += lam * vt(i) * vt(i) / (d * d);
      }
      return q - zeta * zeta;
    };
    double lo = 0.0;
    double hi = 1.0;
    while (excess(hi) > 0.0) {
      lo = hi;
      hi *= 2.0;
      if (hi > 1e300) throw NonconvergenceError("ellipsoid projection did not bracket");
    }
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (excess(mid) > 0.0 ? lo : hi) = mid;
    }
    Eigen::VectorXd out = vt;
    for (Eigen::Index i = 0; i < s; ++i) out(i) /= 1.0 + hi * std::max(vals(i), 0.0);
    return vecs * out;
  };

  const double lam_min = std::max(vals.minCoeff(), 1e-300);
  const double step = 10.0 * zeta / (r.c.norm() * std::sqrt(lam_min));
  y = project(y);
  for (int it = 1; it <= steps; ++it) {
    const Eigen::VectorXd next = project(y + step * r.c);
    if (!next.allFinite()) break;
    const double moved = (next - y).norm();
    y = next;
    if (moved <= tol * (1.0 + y.norm())) {
      auto res = detail::finish_se(model, p, detail::embed(p, y, m), zeta);
      res.diagnostics.method = "se_projected_gradient";
      res.diagnostics.iterations = it;
      return res;
    }
  }
  throw NonconvergenceError("projected gradient did not converge in " + std::to_string(steps) +
                            " steps");
}

struct MlpAttackConfig {
  double alpha_max = 0.0;  // cap on the objective gained along the search direction
  double score_tol = 1e-6;
  int max_bisection = 200;
  bool refine = true;
  int barrier_rounds = 5;
  int steps_per_round = 200;
  double step_size = 1e-2;  // relative to the bisection injection magnitude
};

/// max c'z_a s.t. score(z0 + z_a) <= 0.5, z_a = 0 off support.
/// Phase 1 bisects along the SE-optimal direction; phase 2 runs a log-barrier
/// projected gradient ascent from there. The better feasible point wins.
inline AttackResult solve_attack_mlp(const EstimatorModel& model, const AttackProblem& p,
                                     const MlpAttackConfig& cfg) {
  const auto* boundary = std::get_if<MlpBoundary>(&p.constraint);
  if (!boundary || !boundary->detector) throw ConfigError("problem does not carry an MLP boundary");
  const MlpDetector& det = *boundary->detector;
  const Eigen::VectorXd& z0 = boundary->z0;
  const auto m = model.meter_count();
  if (z0.size() != m) throw DimensionError("baseline length mismatch");
  if (!(cfg.alpha_max > 0.0)) throw ConfigError("alpha_max must be positive");

  const double base_score = mlp_forward(det, z0);
  if (base_score > 0.5) throw InfeasibleBaseline("baseline measurement is already flagged");

  auto finish = [&](Eigen::VectorXd z_a) {
    AttackResult r;
    const double score = mlp_forward(det, z0 + z_a);
    r.objective = p.c.dot(z_a);
    r.utility = attack_utility(p.G, z_a);
    r.detector_margin = 0.5 - score;
    r.feasible = score <= 0.5 + 1e-6;
    r.z_a = std::move(z_a);
    r.diagnostics.method = "mlp_bisection";
    r.diagnostics.alpha_max = cfg.alpha_max;
    return r;
  };

  const auto restricted = detail::restrict_to_support(model, p);
  if (restricted.c.isZero(0.0)) return finish(Eigen::VectorXd::Zero(m));

  // Unit-gain search direction: the SE optimum, or c itself if unbounded.
  Eigen::VectorXd dir;
  try {
    AttackProblem unit = p;
    unit.constraint = SeBudget{1.0};
    const auto se = solve_attack_se(model, unit);
    dir = se.z_a / se.objective;
  } catch (const UnboundedError&) {
    dir = detail::embed(p, restricted.c / restricted.c.squaredNorm(), m);
  }

  auto score_at = [&](double alpha) { return mlp_forward(det, z0 + alpha * dir); };
  double lo = 0.0;
  double hi = cfg.alpha_max;
  int iterations = 0;
  if (score_at(hi) <= 0.5) {
    auto r = finish(hi * dir);
    r.diagnostics.capped = true;
    r.diagnostics.bracket_lo = hi;
    r.diagnostics.bracket_hi = hi;
    return r;
  }
  while (iterations < cfg.max_bisection) {
    ++iterations;
    const double mid = 0.5 * (lo + hi);
    (score_at(mid) <= 0.5 ? lo : hi) = mid;
    if (0.5 - score_at(lo) <= cfg.score_tol || hi - lo <= 1e-14 * cfg.alpha_max) break;
  }
  auto best = finish(lo * dir);
  best.diagnostics.iterations = iterations;
  best.diagnostics.bracket_lo = lo;
  best.diagnostics.bracket_hi = hi;
  if (!cfg.refine || lo <= 0.0) return best;

  // Barrier refinement on the support coordinates.
  auto support_grad = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(m);
    for (auto k : p.support) out(static_cast<Eigen::Index>(k)) = v(static_cast<Eigen::Index>(k));
    return out;
  };
  Eigen::VectorXd z = 0.98 * lo * dir;
  const double scale = cfg.step_size * std::max(best.z_a.norm(), 1e-9);
  double weight = 0.1 * std::max(best.objective, 1e-3);
  Eigen::VectorXd refined_best = best.z_a;
  double refined_obj = best.objective;
  for (int round = 0; round < cfg.barrier_rounds; ++round, weight *= 0.1) {
    auto merit = [&](const Eigen::VectorXd& v, double score) {
      return p.c.dot(v) + weight * std::log(0.5 - score);
    };
    double score = mlp_forward(det, z0 + z);
    for (int step = 0; step < cfg.steps_per_round; ++step) {
      ++iterations;
      const Eigen::VectorXd g =
          support_grad(p.c - weight * mlp_gradient(det, z0 + z) / (0.5 - score));
      const double gnorm = g.norm();
      if (!(gnorm > 0.0) || !std::isfinite(gnorm)) break;
      const double current = merit(z, score);
      double h = scale;
      bool moved = false;
      for (int halving = 0; halving < 30; ++halving, h *= 0.5) {
        const Eigen::VectorXd trial = z + (h / gnorm) * g;
        const double ts = mlp_forward(det, z0 + trial);
        if (ts < 0.5 && merit(trial, ts) > current) {
          z = trial;
          score = ts;
          moved = true;
          break;
        }
      }
      if (!moved) break;
      if (score <= 0.5 && p.c.dot(z) > refined_obj) {
        refined_obj = p.c.dot(z);
        refined_best = z;
      }
    }
  }
  if (refined_obj > best.objective) {
    const auto bracket = std::make_pair(best.diagnostics.bracket_lo, best.diagnostics.bracket_hi);
    best = finish(refined_best);
    best.diagnostics.bracket_lo = bracket.first;
    best.diagnostics.bracket_hi = bracket.second;
    best.diagnostics.refined = true;
    best.diagnostics.method = "mlp_bisection+barrier";
  }
  best.diagnostics.iterations = iterations;
  return best;
}

/// Training-set attacks: a random support of the allowed sizes drawn from
/// `candidates`, with the SE-optimal injection for a budget drawn uniformly
/// from [zeta_lo, zeta_hi].
inline AttackGenerator make_training_attack_generator(
    std::shared_ptr<const EstimatorModel> model, Eigen::VectorXd g,
    std::vector<std::size_t> candidates, std::vector<std::size_t> support_sizes,
    double zeta_lo, double zeta_hi) {
  if (candidates.empty()) throw ConfigError("no attackable meters for training attacks");
  if (support_sizes.empty()) throw ConfigError("no support sizes for training attacks");
  for (auto s : support_sizes) {
    if (s == 0 || s > candidates.size()) throw ConfigError("support size out of range");
  }
  if (!(zeta_lo >= 0.0) || zeta_hi < zeta_lo) throw ConfigError("bad training budget range");
  return [model = std::move(model), g = std::move(g), candidates = std::move(candidates),
          sizes = std::move(support_sizes), zeta_lo, zeta_hi](Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick_size(0, sizes.size() - 1);
    const std::size_t size = sizes[pick_size(rng)];
    std::vector<std::size_t> pool = candidates;
    std::vector<std::size_t> support;
    for (std::size_t k = 0; k < size; ++k) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      const auto at = pick(rng);
      support.push_back(pool[at]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(at));
    }
    std::uniform_real_distribution<double> budget(zeta_lo, zeta_hi);
    const double zeta = budget(rng);
    return solve_attack_se(*model, make_attack_problem(g, support, SeBudget{zeta})).z_a;
  };
}

inline std::string support_key(const std::vector<std::size_t>& support,
                               const std::vector<std::string>& labels) {
  std::string key;
  for (auto k : support) key += labels.at(k);
  return key;
}

inline nlohmann::json attack_report(const AttackProblem& p, const AttackResult& r,
                                    const std::vector<std::string>& labels,
                                    const std::string& detector_id = "") {
  auto vec = [](const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  nlohmann::json j;
  std::vector<std::string> support_labels;
  for (auto k : p.support) support_labels.push_back(labels.at(k));
  j["support"] = support_labels;
  j["c"] = vec(p.c);
  if (const auto* b = std::get_if<SeBudget>(&p.constraint)) {
    j["detector"] = "se";
    j["zeta_mw"] = b->zeta;
  } else {
    j["detector"] = "mlp";
    j["mlp_id"] = detector_id;
  }
  j["z_a_mw"] = vec(r.z_a);
  j["objective_mw"] = r.objective;
  j["utility_mw"] = r.utility;
  j["feasible"] = r.feasible;
  j["detector_margin"] = r.detector_margin;
  j["diagnostics"] = {{"method", r.diagnostics.method},
                      {"iterations", r.diagnostics.iterations},
                      {"bracket_lo", r.diagnostics.bracket_lo},
                      {"bracket_hi", r.diagnostics.bracket_hi},
                      {"alpha_max", r.diagnostics.alpha_max},
                      {"capped", r.diagnostics.capped},
                      {"refined", r.diagnostics.refined}};
  return j;
}

}  // namespace fdi
