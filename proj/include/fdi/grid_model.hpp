#pragma once

// DC measurement model: case files, Jacobian, weighted least-squares
// estimator, residual projector and target-line sensitivity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "fdi/errors.hpp"
#include "fdi/rng.hpp"
#include "json.hpp"

namespace fdi {

struct Bus {
  int id = 0;
  std::string name;
};

struct Branch {
  int from_bus = 0;
  int to_bus = 0;
  double reactance_pu = 0.0;
};

enum class MeterKind { kLineFlow, kBusInjection };

struct Meter {
  MeterKind kind = MeterKind::kLineFlow;
  int ref = 0;  // branch index for line flows, bus id for injections
  std::string label;
};

/// Ordered meter list; position defines the measurement-vector index.
struct MeterSet {
  std::vector<Meter> meters;

  std::size_t size() const { return meters.size(); }

  std::optional<std::size_t> index_of(std::string_view label) const {
    for (std::size_t k = 0; k < meters.size(); ++k) {
      if (meters[k].label == label) return k;
    }
    return std::nullopt;
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    out.reserve(meters.size());
    for (const auto& m : meters) out.push_back(m.label);
    return out;
  }
};

struct GridCase {
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  int slack_bus = 0;
  double base_mva = 100.0;
  MeterSet meters;

  std::size_t bus_count() const { return buses.size(); }
  std::size_t state_dim() const { return buses.empty() ? 0 : buses.size() - 1; }

  bool has_bus(int id) const {
    return std::any_of(buses.begin(), buses.end(),
                       [id](const Bus& b) { return b.id == id; });
  }

  /// Column of bus `id` in the reduced state vector; nullopt for the slack.
  std::optional<std::size_t> state_index(int id) const {
    std::size_t col = 0;
    for (const auto& b : buses) {
      if (b.id == slack_bus) continue;
      if (b.id == id) return col;
      ++col;
    }
    return std::nullopt;
  }

  std::optional<std::size_t> branch_between(int i, int j) const {
    for (std::size_t k = 0; k < branches.size(); ++k) {
      const auto& br = branches[k];
      if ((br.from_bus == i && br.to_bus == j) ||
          (br.from_bus == j && br.to_bus == i)) {
        return k;
      }
    }
    return std::nullopt;
  }
};

namespace detail {

inline std::size_t line_of_offset(std::string_view text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(
                 std::count(text.begin(), text.begin() + byte, '\n'));
}

inline const nlohmann::json& require(const nlohmann::json& obj,
                                     const std::string& key,
                                     const std::string& path) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ParseError("missing field '" + path + key + "'");
  }
  return obj.at(key);
}

template <typename T>
T require_as(const nlohmann::json& obj, const std::string& key,
             const std::string& path) {
  const auto& v = require(obj, key, path);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError("field '" + path + key + "' has wrong type: " + v.dump());
  }
}

}  // namespace detail

/// Checks every structural invariant of a case (and its meters).
inline void validate_case(const GridCase& c) {
  if (c.buses.size() < 2) throw ValidationError("case needs at least 2 buses");
  if (!(c.base_mva > 0.0) || !std::isfinite(c.base_mva)) {
    throw ValidationError("base_mva must be positive");
  }
  std::unordered_map<int, std::size_t> pos;
  for (std::size_t k = 0; k < c.buses.size(); ++k) {
    if (!pos.emplace(c.buses[k].id, k).second) {
      throw ValidationError("duplicate bus id " + std::to_string(c.buses[k].id));
    }
  }
  if (!pos.count(c.slack_bus)) {
    throw ValidationError("slack bus " + std::to_string(c.slack_bus) +
                          " does not exist");
  }
  std::vector<std::vector<std::size_t>> adj(c.buses.size());
  for (std::size_t k = 0; k < c.branches.size(); ++k) {
    const auto& br = c.branches[k];
    const std::string where = "branch " + std::to_string(k);
    if (!pos.count(br.from_bus) || !pos.count(br.to_bus)) {
      throw ValidationError(where + " references an unknown bus");
    }
    if (br.from_bus == br.to_bus) throw ValidationError(where + " is a self-loop");
    if (!(br.reactance_pu > 0.0) || !std::isfinite(br.reactance_pu)) {
      throw ValidationError(where + " has nonpositive reactance");
    }
    adj[pos[br.from_bus]].push_back(pos[br.to_bus]);
    adj[pos[br.to_bus]].push_back(pos[br.from_bus]);
  }
  std::vector<bool> seen(c.buses.size(), false);
  std::queue<std::size_t> frontier;
  frontier.push(0);
  seen[0] = true;
  std::size_t reached = 1;
  while (!frontier.empty()) {
    auto u = frontier.front();
    frontier.pop();
    for (auto v : adj[u]) {
      if (!seen[v]) {
        seen[v] = true;
        ++reached;
        frontier.push(v);
      }
    }
  }
  if (reached != c.buses.size()) throw ValidationError("branch graph is disconnected");

  std::unordered_set<std::string> labels;
  for (const auto& m : c.meters.meters) {
    if (!labels.insert(m.label).second) {
      throw ValidationError("duplicate meter label '" + m.label + "'");
    }
    if (m.kind == MeterKind::kLineFlow) {
      if (m.ref < 0 || static_cast<std::size_t>(m.ref) >= c.branches.size()) {
        throw ValidationError("meter '" + m.label + "' references unknown branch");
      }
    } else if (!pos.count(m.ref)) {
      throw ValidationError("meter '" + m.label + "' references unknown bus");
    }
  }
}

/// Parses the JSON case schema. `source` only decorates error messages.
inline GridCase parse_case(std::string_view text,
                           std::string_view source = "<memory>") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string(source) + ":" +
                     std::to_string(detail::line_of_offset(text, e.byte)) +
                     ": malformed JSON (" + e.what() + ")");
  }
  GridCase c;
  try {
    using detail::require;
    using detail::require_as;
    c.base_mva = require_as<double>(doc, "base_mva", "");
    c.slack_bus = require_as<int>(doc, "slack_bus", "");
    const auto& buses = require(doc, "buses", "");
    if (!buses.is_array()) throw ParseError("field 'buses' must be an array");
    for (std::size_t k = 0; k < buses.size(); ++k) {
      const std::string path = "buses[" + std::to_string(k) + "].";
      Bus b;
      b.id = require_as<int>(buses[k], "id", path);
      b.name = buses[k].value("name", "bus" + std::to_string(b.id));
      c.buses.push_back(std::move(b));
    }
    const auto& branches = require(doc, "branches", "");
    if (!branches.is_array()) throw ParseError("field 'branches' must be an array");
    for (std::size_t k = 0; k < branches.size(); ++k) {
      const std::string path = "branches[" + std::to_string(k) + "].";
      Branch br;
      br.from_bus = require_as<int>(branches[k], "from", path);
      br.to_bus = require_as<int>(branches[k], "to", path);
      br.reactance_pu = require_as<double>(branches[k], "reactance_pu", path);
      c.branches.push_back(br);
    }
    if (doc.contains("meters")) {
      const auto& meters = doc.at("meters");
      if (!meters.is_array()) throw ParseError("field 'meters' must be an array");
      for (std::size_t k = 0; k < meters.size(); ++k) {
        const std::string path = "meters[" + std::to_string(k) + "].";
        Meter m;
        const auto kind = require_as<std::string>(meters[k], "kind", path);
        if (kind == "line_flow") {
          m.kind = MeterKind::kLineFlow;
        } else if (kind == "bus_injection") {
          m.kind = MeterKind::kBusInjection;
        } else {
          throw ParseError("field '" + path + "kind' must be line_flow or bus_injection");
        }
        m.ref = require_as<int>(meters[k], "ref", path);
        m.label = require_as<std::string>(meters[k], "label", path);
        c.meters.meters.push_back(std::move(m));
      }
    }
  } catch (const ParseError& e) {
    throw ParseError(std::string(source) + ": " + e.what());
  }
  validate_case(c);
  return c;
}

inline GridCase load_case(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open case file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_case(buffer.str(), path.string());
}

inline Eigen::Index numerical_rank(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  return qr.rank();
}

/// Measurement Jacobian in MW per radian, slack column removed.
inline Eigen::MatrixXd build_jacobian(const GridCase& c, const MeterSet& meters) {
  const auto n = static_cast<Eigen::Index>(c.state_dim());
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(meters.size()), n);

  auto add_flow = [&](Eigen::Index row, int from, int to, double x) {
    const double b = c.base_mva / x;
    if (auto col = c.state_index(from)) h(row, static_cast<Eigen::Index>(*col)) += b;
    if (auto col = c.state_index(to)) h(row, static_cast<Eigen::Index>(*col)) -= b;
  };

  for (std::size_t k = 0; k < meters.size(); ++k) {
    const auto& m = meters.meters[k];
    const auto row = static_cast<Eigen::Index>(k);
    if (m.kind == MeterKind::kLineFlow) {
      if (m.ref < 0 || static_cast<std::size_t>(m.ref) >= c.branches.size()) {
        throw ValidationError("meter '" + m.label + "' references unknown branch");
      }
      const auto& br = c.branches[static_cast<std::size_t>(m.ref)];
      add_flow(row, br.from_bus, br.to_bus, br.reactance_pu);
    } else {
      if (!c.has_bus(m.ref)) {
        throw ValidationError("meter '" + m.label + "' references unknown bus");
      }
      for (const auto& br : c.branches) {
        if (br.from_bus == m.ref) add_flow(row, br.from_bus, br.to_bus, br.reactance_pu);
        if (br.to_bus == m.ref) add_flow(row, br.to_bus, br.from_bus, br.reactance_pu);
      }
    }
  }
  if (numerical_rank(h) < n) {
    throw DegenerateError("Jacobian rank " + std::to_string(numerical_rank(h)) +
                          " < " + std::to_string(n) + ": system is unobservable");
  }
  return h;
}

struct EstimatorModel {
  Eigen::MatrixXd H;               // m x (n-1), MW/rad
  Eigen::VectorXd noise_variance;  // diagonal of the noise covariance, MW^2
  Eigen::MatrixXd M;               // (n-1) x m
  Eigen::MatrixXd W;               // m x m, I - H M
  Eigen::Index state_dim = 0;

  Eigen::Index meter_count() const { return H.rows(); }
  Eigen::MatrixXd noise_cov() const { return noise_variance.asDiagonal(); }
};

inline EstimatorModel build_estimator(const Eigen::MatrixXd& h,
                                      const Eigen::VectorXd& noise_variance) {
  if (noise_variance.size() != h.rows()) {
    throw DimensionError("noise covariance has " +
                         std::to_string(noise_variance.size()) +
                         " entries for " + std::to_string(h.rows()) + " meters");
  }
  for (Eigen::Index k = 0; k < noise_variance.size(); ++k) {
    if (!(noise_variance(k) > 0.0) || !std::isfinite(noise_variance(k))) {
      throw ConfigError("noise variances must be strictly positive");
    }
  }
  const Eigen::MatrixXd ht_winv = h.transpose() * noise_variance.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd gain = ht_winv * h;
  if (gain.rows() == 0) throw SingularError("empty state vector");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gain, Eigen::EigenvaluesOnly);
  const double lmax = eig.eigenvalues().maxCoeff();
  const double lmin = eig.eigenvalues().minCoeff();
  if (!(lmax > 0.0) || lmin / lmax < 1e-12) {
    throw SingularError("gain matrix H^T L^-1 H is numerically singular");
  }

  EstimatorModel model;
  model.H = h;
  model.noise_variance = noise_variance;
  model.state_dim = h.cols();
  model.M = gain.ldlt().solve(ht_winv);
  model.W = Eigen::MatrixXd::Identity(h.rows(), h.rows()) - h * model.M;
  return model;
}

/// Convenience for the isotropic noise model L = sigma^2 I.
inline EstimatorModel build_estimator(const Eigen::MatrixXd& h, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("noise sigma must be positive");
  return build_estimator(h, Eigen::VectorXd::Constant(h.rows(), sigma * sigma));
}

/// Estimated flow on one line as a linear functional of z.
struct LineSensitivity {
  int from_bus = 0;
  int to_bus = 0;
  std::size_t branch = 0;
  Eigen::VectorXd G;
};

inline LineSensitivity line_sensitivity(const EstimatorModel& model,
                                        const GridCase& c, int from, int to) {
  const auto branch = c.branch_between(from, to);
  if (!branch) {
    throw UnknownBranchError("no branch between buses " + std::to_string(from) +
                             " and " + std::to_string(to));
  }
  const double x = c.branches[*branch].reactance_pu;
  const auto m = model.meter_count();
  auto row_of = [&](int bus) -> Eigen::VectorXd {
    if (auto col = c.state_index(bus)) {
      return model.M.row(static_cast<Eigen::Index>(*col)).transpose();
    }
    return Eigen::VectorXd::Zero(m);
  };
  LineSensitivity s;
  s.from_bus = from;
  s.to_bus = to;
  s.branch = *branch;
  s.G = (row_of(from) - row_of(to)) * (c.base_mva / x);
  if (s.G.cwiseAbs().maxCoeff() <= 1e-12) {
    throw DegenerateError("line sensitivity vanishes: buses are electrically identical");
  }
  return s;
}

struct MeasurementSample {
  Eigen::VectorXd z;
  std::optional<std::string> attack_id;  // nullopt for a safe sample
  std::uint64_t seed = 0;

  bool is_safe() const { return !attack_id.has_value(); }
};

inline void add_gaussian_noise(Eigen::VectorXd& z, double sigma, Rng& rng) {
  if (sigma == 0.0) return;
  std::normal_distribution<double> noise(0.0, sigma);
  for (Eigen::Index k = 0; k < z.size(); ++k) z(k) += noise(rng);
}

inline MeasurementSample simulate_measurements(const Eigen::MatrixXd& h,
                                               const Eigen::VectorXd& x,
                                               double noise_sigma,
                                               std::uint64_t seed) {
  if (x.size() != h.cols()) {
    throw DimensionError("state has " + std::to_string(x.size()) +
                         " entries, expected " + std::to_string(h.cols()));
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  MeasurementSample s;
  s.seed = seed;
  s.z = h * x;
  auto rng = make_rng(seed);
  add_gaussian_noise(s.z, noise_sigma, rng);
  return s;
}

inline MeasurementSample simulate_measurements(const GridCase& c,
                                               const MeterSet& meters,
                                               const Eigen::VectorXd& x,
                                               double noise_sigma,
                                               std::uint64_t seed) {
  return simulate_measurements(build_jacobian(c, meters), x, noise_sigma, seed);
}

namespace detail {
inline void check_length(const EstimatorModel& model, const Eigen::VectorXd& z) {
  if (z.size() != model.meter_count()) {
    throw DimensionError("measurement vector has " + std::to_string(z.size()) +
                         " entries, expected " +
                         std::to_string(model.meter_count()));
  }
}
}  // namespace detail

inline Eigen::VectorXd estimate_state(const EstimatorModel& model,
                                      const Eigen::VectorXd& z) {
  detail::check_length(model, z);
  return model.M * z;
}

struct Residual {
  Eigen::VectorXd rho;
  double norm = 0.0;
};

inline Residual residual(const EstimatorModel& model, const Eigen::VectorXd& z) {
  detail::check_length(model, z);
  Residual r;
  r.rho = model.W * z;
  r.norm = r.rho.norm();
  return r;
}

inline double estimated_line_power(const Eigen::VectorXd& g,
                                   const Eigen::VectorXd& z) {
  if (g.size() != z.size()) throw DimensionError("sensitivity/measurement length mismatch");
  return g.dot(z);
}

/// DC power flow: reduced bus angles (radians) for net injections in MW,
/// given per bus in case order. The slack absorbs any mismatch.
inline Eigen::VectorXd dc_operating_point(const GridCase& c,
                                          const std::vector<double>& injections_mw) {
  if (injections_mw.size() != c.bus_count()) {
    throw DimensionError("load profile needs one injection per bus");
  }
  const auto n = static_cast<Eigen::Index>(c.state_dim());
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, n);
  for (const auto& br : c.branches) {
    const double y = c.base_mva / br.reactance_pu;
    const auto i = c.state_index(br.from_bus);
    const auto j = c.state_index(br.to_bus);
    if (i) b(static_cast<Eigen::Index>(*i), static_cast<Eigen::Index>(*i)) += y;
    if (j) b(static_cast<Eigen::Index>(*j), static_cast<Eigen::Index>(*j)) += y;
    if (i && j) {
      b(static_cast<Eigen::Index>(*i), static_cast<Eigen::Index>(*j)) -= y;
      b(static_cast<Eigen::Index>(*j), static_cast<Eigen::Index>(*i)) -= y;
    }
  }
  Eigen::VectorXd p(n);
  for (std::size_t k = 0; k < c.buses.size(); ++k) {
    if (auto col = c.state_index(c.buses[k].id)) {
      p(static_cast<Eigen::Index>(*col)) = injections_mw[k];
    }
  }
  return b.ldlt().solve(p);
}

}  // namespace fdi
