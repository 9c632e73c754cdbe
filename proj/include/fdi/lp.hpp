#pragma once

// Dense-tableau two-phase primal simplex with Bland's anti-cycling rule.
// Intended for the small LPs of matrix games (a few dozen columns at most).

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fdi/errors.hpp"

namespace fdi {

enum class Sense { kLessEqual, kGreaterEqual, kEqual };
enum class ObjectiveSense { kMaximize, kMinimize };
enum class LpStatus { kOptimal, kUnbounded, kInfeasible };

inline const char* to_string(LpStatus s) {
  switch (s) {
    case LpStatus::kOptimal:
      return "optimal";
    case LpStatus::kUnbounded:
      return "unbounded";
    case LpStatus::kInfeasible:
      return "infeasible";
  }
  return "?";
}

struct LpProblem {
  ObjectiveSense sense = ObjectiveSense::kMaximize;
  Eigen::VectorXd objective;       // n
  Eigen::MatrixXd A;               // rows x n
  std::vector<Sense> row_sense;    // one per row
  Eigen::VectorXd rhs;             // rows
  Eigen::VectorXd lower;           // n, empty = all zero; -inf allowed
  Eigen::VectorXd upper;           // n, empty = all +inf
};

struct LpSolution {
  LpStatus status = LpStatus::kInfeasible;
  Eigen::VectorXd x;
  double objective_value = 0.0;
  // Unbounded: an improving ray in x-space. Infeasible: phase-one multipliers
  // (one per standard-form row) proving the rows cannot all hold.
  Eigen::VectorXd certificate;
  bool alternative_optima = false;  // some nonbasic column has zero reduced cost
  int pivots = 0;
};

namespace detail {

constexpr double kPivotTol = 1e-11;
constexpr double kCostTol = 1e-10;

class Tableau {
 public:
  // Standard form: max cost'x, rows (A x = b), x >= 0, b >= 0, initial basis given.
  Tableau(Eigen::MatrixXd t, std::vector<Eigen::Index> basis)
      : t_(std::move(t)), basis_(std::move(basis)) {}

  Eigen::Index rows() const { return t_.rows(); }
  Eigen::Index cols() const { return t_.cols() - 1; }
  double rhs(Eigen::Index i) const { return t_(i, cols()); }
  double at(Eigen::Index i, Eigen::Index j) const { return t_(i, j); }
  const std::vector<Eigen::Index>& basis() const { return basis_; }
  int pivots() const { return pivots_; }

  double reduced_cost(const Eigen::VectorXd& cost, Eigen::Index j) const {
    double r = cost(j);
    for (Eigen::Index i = 0; i < rows(); ++i) r -= cost(basis_[static_cast<std::size_t>(i)]) * t_(i, j);
    return r;
  }

  double objective(const Eigen::VectorXd& cost) const {
    double v = 0.0;
    for (Eigen::Index i = 0; i < rows(); ++i) v += cost(basis_[static_cast<std::size_t>(i)]) * rhs(i);
    return v;
  }

  void pivot(Eigen::Index row, Eigen::Index col) {
    const double p = t_(row, col);
    if (std::abs(p) < kPivotTol) throw NumericalError("simplex pivot below tolerance");
    t_.row(row) /= p;
    for (Eigen::Index i = 0; i < rows(); ++i) {
      if (i == row) continue;
      const double f = t_(i, col);
      if (f != 0.0) t_.row(i) -= f * t_.row(row);
    }
    basis_[static_cast<std::size_t>(row)] = col;
    ++pivots_;
  }

  // Runs Bland's rule until optimal; returns the entering column of an
  // unbounded ray, or -1 when optimal.
  Eigen::Index optimize(const Eigen::VectorXd& cost, const std::vector<bool>& allowed) {
    for (int guard = 0; guard < 100000; ++guard) {
      Eigen::Index enter = -1;
      for (Eigen::Index j = 0; j < cols(); ++j) {
        if (!allowed[static_cast<std::size_t>(j)] || is_basic(j)) continue;
        if (reduced_cost(cost, j) > kCostTol) {
          enter = j;
          break;
        }
      }
      if (enter < 0) return -1;
      Eigen::Index leave = -1;
      double best_ratio = std::numeric_limits<double>::infinity();
      double largest = 0.0;
      for (Eigen::Index i = 0; i < rows(); ++i) {
        const double a = t_(i, enter);
        largest = std::max(largest, a);
        if (a <= kPivotTol) continue;
        const double ratio = rhs(i) / a;
        if (ratio < best_ratio - 1e-12 ||
            (std::abs(ratio - best_ratio) <= 1e-12 &&
             basis_[static_cast<std::size_t>(i)] < basis_[static_cast<std::size_t>(leave)])) {
          best_ratio = ratio;
          leave = i;
        }
      }
      if (leave < 0) {
        if (largest > 1e-13) throw NumericalError("ratio test only found near-zero pivots");
        return enter;
      }
      pivot(leave, enter);
    }
    throw NumericalError("simplex iteration limit reached");
  }

  bool is_basic(Eigen::Index j) const {
    for (auto b : basis_) {
      if (b == j) return true;
    }
    return false;
  }

  Eigen::VectorXd values() const {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(cols());
    for (Eigen::Index i = 0; i < rows(); ++i) x(basis_[static_cast<std::size_t>(i)]) = rhs(i);
    return x;
  }

  // Simplex multipliers y' = c_B' B^-1, read from the initial identity columns.
  Eigen::VectorXd duals(const Eigen::VectorXd& cost, const std::vector<Eigen::Index>& init) const {
    Eigen::VectorXd y(rows());
    for (Eigen::Index k = 0; k < rows(); ++k) {
      double v = 0.0;
      for (Eigen::Index i = 0; i < rows(); ++i) {
        v += cost(basis_[static_cast<std::size_t>(i)]) * t_(i, init[static_cast<std::size_t>(k)]);
      }
      y(k) = v;
    }
    return y;
  }

 private:
  Eigen::MatrixXd t_;
  std::vector<Eigen::Index> basis_;
  int pivots_ = 0;
};

}  // namespace detail

inline LpSolution solve_lp(const LpProblem& p) {
  const Eigen::Index n = p.objective.size();
  const Eigen::Index m = p.A.rows();
  if (p.A.cols() != n || p.rhs.size() != m || static_cast<Eigen::Index>(p.row_sense.size()) != m) {
    throw DimensionError("LP dimensions are inconsistent");
  }
  if (!p.A.allFinite() || !p.rhs.allFinite() || !p.objective.allFinite()) {
    throw ConfigError("LP coefficients must be finite");
  }
  const double inf = std::numeric_limits<double>::infinity();
  const Eigen::VectorXd lower = p.lower.size() == n ? p.lower : Eigen::VectorXd::Zero(n);
  const Eigen::VectorXd upper = p.upper.size() == n ? p.upper : Eigen::VectorXd::Constant(n, inf);

  // Variable substitution: x_j = offset_j + sum_k sign * y_k over standard columns.
  struct Map {
    double offset = 0.0;
    Eigen::Index pos = -1;  // y column with +1
    Eigen::Index neg = -1;  // y column with -1
  };
  std::vector<Map> map(static_cast<std::size_t>(n));
  Eigen::Index ny = 0;
  std::vector<std::pair<Eigen::Index, double>> extra_upper;  // (y column, bound)
  for (Eigen::Index j = 0; j < n; ++j) {
    auto& mj = map[static_cast<std::size_t>(j)];
    if (lower(j) > upper(j)) {
      LpSolution s;
      s.status = LpStatus::kInfeasible;
      return s;
    }
    if (std::isfinite(lower(j))) {
      mj.offset = lower(j);
      mj.pos = ny++;
      if (std::isfinite(upper(j))) extra_upper.emplace_back(mj.pos, upper(j) - lower(j));
    } else if (std::isfinite(upper(j))) {
      mj.offset = upper(j);
      mj.neg = ny++;
    } else {
      mj.pos = ny++;
      mj.neg = ny++;
    }
  }

  // Rows over y: A_y y (sense) b - A offset.
  const Eigen::Index rows = m + static_cast<Eigen::Index>(extra_upper.size());
  Eigen::MatrixXd ay = Eigen::MatrixXd::Zero(rows, ny);
  Eigen::VectorXd b(rows);
  std::vector<Sense> sense(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < m; ++i) {
    double shift = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& mj = map[static_cast<std::size_t>(j)];
      shift += p.A(i, j) * mj.offset;
      if (mj.pos >= 0) ay(i, mj.pos) += p.A(i, j);
      if (mj.neg >= 0) ay(i, mj.neg) -= p.A(i, j);
    }
    b(i) = p.rhs(i) - shift;
    sense[static_cast<std::size_t>(i)] = p.row_sense[static_cast<std::size_t>(i)];
  }
  for (std::size_t k = 0; k < extra_upper.size(); ++k) {
    const auto i = m + static_cast<Eigen::Index>(k);
    ay(i, extra_upper[k].first) = 1.0;
    b(i) = extra_upper[k].second;
    sense[static_cast<std::size_t>(i)] = Sense::kLessEqual;
  }
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (b(i) < 0.0) {
      ay.row(i) *= -1.0;
      b(i) = -b(i);
      auto& s = sense[static_cast<std::size_t>(i)];
      if (s == Sense::kLessEqual) {
        s = Sense::kGreaterEqual;
      } else if (s == Sense::kGreaterEqual) {
        s = Sense::kLessEqual;
      }
    }
  }

  // Columns: y | slack/surplus | artificial.
  Eigen::Index n_slack = 0;
  Eigen::Index n_art = 0;
  for (auto s : sense) {
    if (s != Sense::kEqual) ++n_slack;
    if (s != Sense::kLessEqual) ++n_art;
  }
  const Eigen::Index total = ny + n_slack + n_art;
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(rows, total + 1);
  t.leftCols(ny) = ay;
  t.col(total) = b;
  std::vector<Eigen::Index> basis(static_cast<std::size_t>(rows));
  std::vector<bool> artificial(static_cast<std::size_t>(total), false);
  Eigen::Index next_slack = ny;
  Eigen::Index next_art = ny + n_slack;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto s = sense[static_cast<std::size_t>(i)];
    if (s == Sense::kLessEqual) {
      t(i, next_slack) = 1.0;
      basis[static_cast<std::size_t>(i)] = next_slack++;
    } else {
      if (s == Sense::kGreaterEqual) t(i, next_slack++) = -1.0;
      t(i, next_art) = 1.0;
      artificial[static_cast<std::size_t>(next_art)] = true;
      basis[static_cast<std::size_t>(i)] = next_art++;
    }
  }
  const std::vector<Eigen::Index> initial_basis = basis;
  detail::Tableau tab(std::move(t), basis);
  LpSolution sol;

  std::vector<bool> everything(static_cast<std::size_t>(total), true);
  if (n_art > 0) {
    Eigen::VectorXd phase1 = Eigen::VectorXd::Zero(total);
    for (Eigen::Index j = 0; j < total; ++j) {
      if (artificial[static_cast<std::size_t>(j)]) phase1(j) = -1.0;
    }
    tab.optimize(phase1, everything);
    const double infeasibility = -tab.objective(phase1);
    if (infeasibility > 1e-9 * std::max(1.0, b.cwiseAbs().maxCoeff())) {
      sol.status = LpStatus::kInfeasible;
      sol.certificate = tab.duals(phase1, initial_basis);
      sol.pivots = tab.pivots();
      return sol;
    }
    // Drive zero-valued artificials out of the basis where possible.
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (!artificial[static_cast<std::size_t>(tab.basis()[static_cast<std::size_t>(i)])]) continue;
      for (Eigen::Index j = 0; j < total; ++j) {
        if (!artificial[static_cast<std::size_t>(j)] && std::abs(tab.at(i, j)) > detail::kPivotTol) {
          tab.pivot(i, j);
          break;
        }
      }
    }
  }

  const double dir = p.sense == ObjectiveSense::kMaximize ? 1.0 : -1.0;
  Eigen::VectorXd cost = Eigen::VectorXd::Zero(total);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& mj = map[static_cast<std::size_t>(j)];
    if (mj.pos >= 0) cost(mj.pos) += dir * p.objective(j);
    if (mj.neg >= 0) cost(mj.neg) -= dir * p.objective(j);
  }
  std::vector<bool> allowed(static_cast<std::size_t>(total));
  for (Eigen::Index j = 0; j < total; ++j) allowed[static_cast<std::size_t>(j)] = !artificial[static_cast<std::size_t>(j)];

  auto to_x = [&](const Eigen::VectorXd& y, bool ray) {
    Eigen::VectorXd x(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& mj = map[static_cast<std::size_t>(j)];
      double v = ray ? 0.0 : mj.offset;
      if (mj.pos >= 0) v += y(mj.pos);
      if (mj.neg >= 0) v -= y(mj.neg);
      x(j) = v;
    }
    return x;
  };

  const Eigen::Index ray_col = tab.optimize(cost, allowed);
  sol.pivots = tab.pivots();
  if (ray_col >= 0) {
    Eigen::VectorXd d = Eigen::VectorXd::Zero(total);
    d(ray_col) = 1.0;
    for (Eigen::Index i = 0; i < rows; ++i) d(tab.basis()[static_cast<std::size_t>(i)]) = -tab.at(i, ray_col);
    sol.status = LpStatus::kUnbounded;
    sol.certificate = to_x(d.head(ny), true);
    return sol;
  }
  sol.status = LpStatus::kOptimal;
  sol.x = to_x(tab.values().head(ny), false);
  sol.objective_value = p.objective.dot(sol.x);
  for (Eigen::Index j = 0; j < total; ++j) {
    if (!allowed[static_cast<std::size_t>(j)] || tab.is_basic(j)) continue;
    if (std::abs(tab.reduced_cost(cost, j)) <= detail::kCostTol) {
      sol.alternative_optima = true;
      break;
    }
  }
  return sol;
}

}  // namespace fdi
