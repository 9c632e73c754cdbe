#pragma once

// Shared helpers for the unit and acceptance tests.

#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fdi/fdi.hpp"

namespace fdi::testing {

inline std::string fixture(const std::string& name) { return std::string(FDI_FIXTURES) + "/" + name; }

inline GridCase pjm5() { return load_case(fixture("pjm5.json")); }

inline std::shared_ptr<const EstimatorModel> pjm5_model(double sigma = 1.0) {
  const auto g = pjm5();
  return std::make_shared<const EstimatorModel>(build_estimator(build_jacobian(g, g.meters), sigma));
}

/// Random connected case: a random spanning tree plus a few chords, every
/// branch metered for flow and every bus for injection.
inline GridCase random_connected_case(Rng& rng) {
  std::uniform_int_distribution<int> size(3, 9);
  std::uniform_real_distribution<double> x(0.005, 0.2);
  const int n = size(rng);
  GridCase c;
  c.base_mva = 100.0;
  for (int i = 1; i <= n; ++i) c.buses.push_back({i, "b" + std::to_string(i)});
  for (int i = 2; i <= n; ++i) {
    std::uniform_int_distribution<int> parent(1, i - 1);
    c.branches.push_back({parent(rng), i, x(rng)});
  }
  std::uniform_int_distribution<int> any(1, n);
  const int chords = n / 2;
  for (int k = 0; k < chords; ++k) {
    const int a = any(rng);
    const int b = any(rng);
    if (a != b && !c.branch_between(a, b)) c.branches.push_back({a, b, x(rng)});
  }
  c.slack_bus = any(rng);
  for (std::size_t k = 0; k < c.branches.size(); ++k) {
    c.meters.meters.push_back({MeterKind::kLineFlow, static_cast<int>(k), "f" + std::to_string(k + 1)});
  }
  for (int i = 1; i <= n; ++i) c.meters.meters.push_back({MeterKind::kBusInjection, i, "p" + std::to_string(i)});
  validate_case(c);
  return c;
}

/// Two-bus, one-branch case with base 1 MVA so H entries equal 1/x.
inline GridCase two_bus(double x, MeterKind kind, int ref) {
  GridCase c;
  c.base_mva = 1.0;
  c.slack_bus = 1;
  c.buses = {{1, "a"}, {2, "b"}};
  c.branches = {{1, 2, x}};
  c.meters.meters = {{kind, ref, "m1"}};
  validate_case(c);
  return c;
}

inline double inf_norm(const Eigen::MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

inline MlpDetector random_network(Rng& rng, int in, std::vector<int> hidden, Activation act, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  MlpDetector d;
  int prev = in;
  hidden.push_back(1);
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    DenseLayer layer;
    layer.weights = Eigen::MatrixXd::NullaryExpr(hidden[l], prev, [&] { return n(rng); });
    layer.biases = Eigen::VectorXd::NullaryExpr(hidden[l], [&] { return n(rng); });
    layer.activation = l + 1 == hidden.size() ? Activation::kSigmoid : act;
    d.layers.push_back(std::move(layer));
    prev = hidden[l];
  }
  d.input_offset = Eigen::VectorXd::Zero(in);
  d.input_scale = Eigen::VectorXd::Ones(in);
  return d;
}

struct EquilibriumOracle {
  Eigen::VectorXd q;  // row player (minimiser)
  Eigen::VectorXd u;  // column player (maximiser)
  double value = 0.0;
  int equilibria = 0;  // distinct support pairs that passed
};

/// Support enumeration: for every pair of equal-size row/column supports,
/// solve the indifference equations and keep the pair that satisfies the
/// best-response conditions against all pure strategies.
inline EquilibriumOracle enumerate_equilibria(const Eigen::MatrixXd& s, double tol = 1e-10) {
  const auto r = s.rows();
  const auto c = s.cols();
  EquilibriumOracle out;
  auto subsets = [](Eigen::Index n, Eigen::Index k) {
    std::vector<std::vector<Eigen::Index>> all;
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
      if (__builtin_popcount(mask) != k) continue;
      std::vector<Eigen::Index> v;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (mask & (1u << i)) v.push_back(i);
      }
      all.push_back(v);
    }
    return all;
  };
  for (Eigen::Index k = 1; k <= std::min(r, c); ++k) {
    for (const auto& rows : subsets(r, k)) {
      for (const auto& cols : subsets(c, k)) {
        Eigen::MatrixXd sub(k, k);
        for (Eigen::Index a = 0; a < k; ++a) {
          for (Eigen::Index b = 0; b < k; ++b) sub(a, b) = s(rows[a], cols[b]);
        }
        // [sub' -1; 1' 0] [q; v] = [0; 1] and [sub -1; 1' 0] [u; v] = [0; 1].
        Eigen::MatrixXd kq = Eigen::MatrixXd::Zero(k + 1, k + 1);
        Eigen::MatrixXd ku = Eigen::MatrixXd::Zero(k + 1, k + 1);
        kq.topLeftCorner(k, k) = sub.transpose();
        ku.topLeftCorner(k, k) = sub;
        kq.topRightCorner(k, 1).setConstant(-1.0);
        ku.topRightCorner(k, 1).setConstant(-1.0);
        kq.bottomLeftCorner(1, k).setOnes();
        ku.bottomLeftCorner(1, k).setOnes();
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k + 1);
        rhs(k) = 1.0;
        Eigen::FullPivLU<Eigen::MatrixXd> lq(kq);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(ku);
        if (!lq.isInvertible() || !lu.isInvertible()) continue;
        const Eigen::VectorXd sq = lq.solve(rhs);
        const Eigen::VectorXd su = lu.solve(rhs);
        if (std::abs(sq(k) - su(k)) > 1e-9) continue;
        if (sq.head(k).minCoeff() < -tol || su.head(k).minCoeff() < -tol) continue;
        Eigen::VectorXd q = Eigen::VectorXd::Zero(r);
        Eigen::VectorXd u = Eigen::VectorXd::Zero(c);
        for (Eigen::Index a = 0; a < k; ++a) {
          q(rows[a]) = sq(a);
          u(cols[a]) = su(a);
        }
        const double v = sq(k);
        if ((q.transpose() * s).maxCoeff() > v + 1e-9) continue;
        if ((s * u).minCoeff() < v - 1e-9) continue;
        ++out.equilibria;
        out.q = q;
        out.u = u;
        out.value = v;
      }
    }
  }
  return out;
}

}  // namespace fdi::testing
