#pragma once

// Bad-data detectors: the residual-threshold state estimator and a small
// feed-forward MLP, plus dataset generation and false-alarm calibration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fdi/errors.hpp"
#include "fdi/grid_model.hpp"
#include "fdi/rng.hpp"
#include "json.hpp"

namespace fdi {

enum class Verdict { kSafe, kCompromised };

inline const char* to_string(Verdict v) {
  return v == Verdict::kSafe ? "safe" : "compromised";
}

// ---------------------------------------------------------------------------
// State-estimator detector

struct SeDetector {
  std::shared_ptr<const EstimatorModel> model;
  double zeta = 0.0;  // MW

  SeDetector(std::shared_ptr<const EstimatorModel> m, double threshold)
      : model(std::move(m)), zeta(threshold) {
    if (!model) throw ConfigError("SeDetector needs an estimator model");
    if (!(zeta >= 0.0)) throw ConfigError("zeta must be >= 0");
  }
};

struct SeDecision {
  Verdict verdict = Verdict::kSafe;
  double residual_norm = 0.0;
};

inline SeDecision se_detect(const SeDetector& det, const Eigen::VectorXd& z) {
  const double norm = residual(*det.model, z).norm;
  // Equality is safe: the attacker's constraint is ||W z_a|| <= zeta.
  return {norm > det.zeta ? Verdict::kCompromised : Verdict::kSafe, norm};
}

// ---------------------------------------------------------------------------
// MLP detector

enum class Activation { kSigmoid, kRelu, kTanh };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::kSigmoid:
      return "sigmoid";
    case Activation::kRelu:
      return "relu";
    case Activation::kTanh:
      return "tanh";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& name) {
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation '" + name + "'");
}

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Derived>
Eigen::MatrixXd activate(const Eigen::MatrixBase<Derived>& pre, Activation a) {
  switch (a) {
    case Activation::kSigmoid:
      return pre.unaryExpr([](double v) { return sigmoid(v); });
    case Activation::kRelu:
      return pre.cwiseMax(0.0);
    case Activation::kTanh:
      return pre.array().tanh().matrix();
  }
  return pre;
}

// Derivative expressed through the pre-activation and the activation output.
inline Eigen::MatrixXd activation_slope(const Eigen::MatrixXd& pre,
                                        const Eigen::MatrixXd& out,
                                        Activation a) {
  switch (a) {
    case Activation::kSigmoid:
      return (out.array() * (1.0 - out.array())).matrix();
    case Activation::kRelu:
      return pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::kTanh:
      return (1.0 - out.array().square()).matrix();
  }
  return Eigen::MatrixXd::Ones(pre.rows(), pre.cols());
}

}  // namespace detail

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd biases;   // out
  Activation activation = Activation::kSigmoid;
};

struct MlpTrainConfig {
  std::vector<int> hidden{16, 8};
  Activation hidden_activation = Activation::kSigmoid;
  double learning_rate = 0.05;
  int epochs = 200;
  int batch_size = 32;
  bool normalize = true;  // min-max scale inputs to [0, 1] over the training set
  std::uint64_t seed = 0;
};

struct MlpDetector {
  std::vector<DenseLayer> layers;
  // Input normalisation applied before the first layer: (z - offset) .* scale.
  Eigen::VectorXd input_offset;
  Eigen::VectorXd input_scale;
  std::optional<MlpTrainConfig> provenance;

  Eigen::Index input_dim() const {
    return layers.empty() ? 0 : layers.front().weights.cols();
  }

  /// Identity normalisation for hand-built networks.
  void reset_normalization() {
    input_offset = Eigen::VectorXd::Zero(input_dim());
    input_scale = Eigen::VectorXd::Ones(input_dim());
  }

  void validate() const {
    if (layers.empty()) throw ConfigError("MLP has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      if (layer.biases.size() != layer.weights.rows()) {
        throw ConfigError("layer " + std::to_string(l) + " bias size mismatch");
      }
      if (l > 0 && layer.weights.cols() != layers[l - 1].weights.rows()) {
        throw ConfigError("layer " + std::to_string(l) + " does not chain");
      }
    }
    if (layers.back().weights.rows() != 1 ||
        layers.back().activation != Activation::kSigmoid) {
      throw ConfigError("MLP output layer must be a single sigmoid unit");
    }
    if (input_offset.size() != input_dim() || input_scale.size() != input_dim()) {
      throw ConfigError("MLP normalisation vectors do not match input size");
    }
  }
};

inline double mlp_forward(const MlpDetector& det, const Eigen::VectorXd& z) {
  if (z.size() != det.input_dim()) {
    throw DimensionError("MLP expects " + std::to_string(det.input_dim()) +
                         " inputs, got " + std::to_string(z.size()));
  }
  Eigen::VectorXd a = (z - det.input_offset).cwiseProduct(det.input_scale);
  for (const auto& layer : det.layers) {
    a = detail::activate(layer.weights * a + layer.biases, layer.activation);
  }
  return a(0);
}

inline Verdict mlp_classify(double score) {
  // A score of exactly 0.5 is safe, matching the attacker's <= 0.5 constraint.
  return score > 0.5 ? Verdict::kCompromised : Verdict::kSafe;
}

/// d score / d z by reverse-mode differentiation.
inline Eigen::VectorXd mlp_gradient(const MlpDetector& det, const Eigen::VectorXd& z) {
  if (z.size() != det.input_dim()) {
    throw DimensionError("MLP expects " + std::to_string(det.input_dim()) +
                         " inputs, got " + std::to_string(z.size()));
  }
  const std::size_t depth = det.layers.size();
  std::vector<Eigen::MatrixXd> pre(depth);
  std::vector<Eigen::MatrixXd> out(depth + 1);
  out[0] = (z - det.input_offset).cwiseProduct(det.input_scale);
  for (std::size_t l = 0; l < depth; ++l) {
    const auto& layer = det.layers[l];
    pre[l] = layer.weights * out[l] + layer.biases;
    out[l + 1] = detail::activate(pre[l], layer.activation);
  }
  Eigen::MatrixXd delta = Eigen::MatrixXd::Ones(1, 1);
  for (std::size_t l = depth; l-- > 0;) {
    delta = delta.cwiseProduct(
        detail::activation_slope(pre[l], out[l + 1], det.layers[l].activation));
    delta = det.layers[l].weights.transpose() * delta;
  }
  return delta.col(0).cwiseProduct(det.input_scale);
}

// ---------------------------------------------------------------------------
// Datasets and training

struct LabeledSample {
  Eigen::VectorXd z;
  int label = 0;  // 0 safe, 1 compromised
};

struct LabeledDataset {
  std::vector<LabeledSample> samples;
  std::uint64_t seed = 0;

  std::size_t count(int label) const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(),
                      [label](const LabeledSample& s) { return s.label == label; }));
  }
};

/// Draws one injection vector z_a.
using AttackGenerator = std::function<Eigen::VectorXd(Rng&)>;

struct DatasetScenario {
  Eigen::VectorXd x0;  // operating point, reduced angles
  double noise_sigma = 1.0;
  AttackGenerator attack_generator;
  std::size_t n_total = 10000;
};

/// First half safe (label 0), second half attacked (label 1). Every sample
/// has its own derived seed so the dataset is reproducible piecewise.
inline LabeledDataset generate_dataset(const EstimatorModel& model,
                                       const DatasetScenario& scenario,
                                       std::uint64_t seed) {
  if (scenario.n_total == 0 || scenario.n_total % 2 != 0) {
    throw ConfigError("n_total must be a positive even number");
  }
  if (!scenario.attack_generator) throw ConfigError("dataset needs an attack generator");
  if (!(scenario.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (scenario.x0.size() != model.state_dim) throw DimensionError("x0 has wrong length");

  const Eigen::VectorXd nominal = model.H * scenario.x0;
  const std::size_t half = scenario.n_total / 2;
  const std::uint64_t attack_stream = derive_seed(seed, "attack");
  LabeledDataset data;
  data.seed = seed;
  data.samples.reserve(scenario.n_total);
  for (std::size_t k = 0; k < scenario.n_total; ++k) {
    auto rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    LabeledSample s{nominal, k < half ? 0 : 1};
    add_gaussian_noise(s.z, scenario.noise_sigma, rng);
    if (s.label == 1) {
      auto arng = make_rng(derive_seed(attack_stream, static_cast<std::uint64_t>(k)));
      const Eigen::VectorXd za = scenario.attack_generator(arng);
      if (za.size() != s.z.size()) throw DimensionError("attack generator length mismatch");
      s.z += za;
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

/// Mini-batch SGD on binary cross-entropy. Deterministic given config.seed.
/// If `epoch_loss` is given it receives the mean batch loss of every epoch.
inline MlpDetector mlp_train(const LabeledDataset& data, const MlpTrainConfig& config,
                             std::vector<double>* epoch_loss = nullptr) {
  if (config.epochs <= 0) throw ConfigError("epochs must be positive");
  if (!(config.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (config.batch_size <= 0) throw ConfigError("batch size must be positive");
  for (int h : config.hidden) {
    if (h <= 0) throw ConfigError("hidden layer sizes must be positive");
  }
  if (data.samples.empty()) throw DegenerateDataError("empty training set");
  const std::size_t positives = data.count(1);
  if (positives == 0 || positives == data.samples.size()) {
    throw DegenerateDataError("training set contains a single class");
  }

  const auto dim = data.samples.front().z.size();
  const auto n = static_cast<Eigen::Index>(data.samples.size());
  Eigen::MatrixXd inputs(dim, n);
  Eigen::RowVectorXd labels(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& s = data.samples[static_cast<std::size_t>(k)];
    if (s.z.size() != dim) throw DimensionError("inconsistent sample lengths");
    inputs.col(k) = s.z;
    labels(k) = s.label;
  }

  MlpDetector det;
  det.provenance = config;
  det.input_offset = Eigen::VectorXd::Zero(dim);
  det.input_scale = Eigen::VectorXd::Ones(dim);
  if (config.normalize) {
    det.input_offset = inputs.rowwise().minCoeff();
    const Eigen::VectorXd range = inputs.rowwise().maxCoeff() - det.input_offset;
    for (Eigen::Index i = 0; i < dim; ++i) {
      det.input_scale(i) = range(i) > 0.0 ? 1.0 / range(i) : 1.0;
    }
  }
  const Eigen::MatrixXd x =
      det.input_scale.asDiagonal() * (inputs.colwise() - det.input_offset);

  auto rng = make_rng(config.seed);
  std::vector<int> widths{static_cast<int>(dim)};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(1);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l];
    const int fan_out = widths[l + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> init(-limit, limit);
    DenseLayer layer;
    layer.weights.resize(fan_out, fan_in);
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = init(rng);
    }
    layer.biases = Eigen::VectorXd::Zero(fan_out);
    layer.activation = l + 2 == widths.size() ? Activation::kSigmoid : config.hidden_activation;
    det.layers.push_back(std::move(layer));
  }

  const std::size_t depth = det.layers.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::vector<Eigen::MatrixXd> pre(depth);
  std::vector<Eigen::MatrixXd> act(depth + 1);
  if (epoch_loss) epoch_loss->clear();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (Eigen::Index start = 0; start < n; start += config.batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(config.batch_size, n - start);
      act[0].resize(dim, b);
      Eigen::RowVectorXd y(b);
      for (Eigen::Index k = 0; k < b; ++k) {
        const auto idx = order[static_cast<std::size_t>(start + k)];
        act[0].col(k) = x.col(idx);
        y(k) = labels(idx);
      }
      for (std::size_t l = 0; l < depth; ++l) {
        pre[l] = (det.layers[l].weights * act[l]).colwise() + det.layers[l].biases;
        act[l + 1] = detail::activate(pre[l], det.layers[l].activation);
      }
      const Eigen::RowVectorXd p = act[depth].row(0);
      double loss = 0.0;
      for (Eigen::Index k = 0; k < b; ++k) {
        const double pk = std::clamp(p(k), 1e-12, 1.0 - 1e-12);
        loss -= y(k) * std::log(pk) + (1.0 - y(k)) * std::log(1.0 - pk);
      }
      loss_sum += loss / static_cast<double>(b);
      ++batches;

      // Sigmoid output with cross-entropy: dL/dpre = p - y.
      Eigen::MatrixXd delta = (p - y) / static_cast<double>(b);
      for (std::size_t l = depth; l-- > 0;) {
        const Eigen::MatrixXd grad_w = delta * act[l].transpose();
        const Eigen::VectorXd grad_b = delta.rowwise().sum();
        if (l > 0) {
          delta = (det.layers[l].weights.transpose() * delta)
                      .cwiseProduct(detail::activation_slope(pre[l - 1], act[l],
                                                             det.layers[l - 1].activation));
        }
        det.layers[l].weights -= config.learning_rate * grad_w;
        det.layers[l].biases -= config.learning_rate * grad_b;
      }
    }
    if (epoch_loss) epoch_loss->push_back(loss_sum / static_cast<double>(batches));
  }
  return det;
}

inline nlohmann::json to_json(const MlpDetector& det) {
  nlohmann::json j;
  j["input_dim"] = det.input_dim();
  j["input_offset"] = std::vector<double>(det.input_offset.data(),
                                          det.input_offset.data() + det.input_offset.size());
  j["input_scale"] = std::vector<double>(det.input_scale.data(),
                                         det.input_scale.data() + det.input_scale.size());
  j["layers"] = nlohmann::json::array();
  for (const auto& layer : det.layers) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(layer.weights.size()));
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) w.push_back(layer.weights(r, c));
    }
    j["layers"].push_back({{"in", layer.weights.cols()},
                           {"out", layer.weights.rows()},
                           {"activation", to_string(layer.activation)},
                           {"weights", w},
                           {"biases", std::vector<double>(layer.biases.data(),
                                                          layer.biases.data() +
                                                              layer.biases.size())}});
  }
  if (det.provenance) {
    const auto& cfg = *det.provenance;
    j["training"] = {{"hidden", cfg.hidden},
                     {"hidden_activation", to_string(cfg.hidden_activation)},
                     {"learning_rate", cfg.learning_rate},
                     {"epochs", cfg.epochs},
                     {"batch_size", cfg.batch_size},
                     {"normalize", cfg.normalize},
                     {"seed", cfg.seed}};
  }
  return j;
}

inline MlpDetector mlp_from_json(const nlohmann::json& j) {
  MlpDetector det;
  try {
    for (const auto& lj : j.at("layers")) {
      DenseLayer layer;
      const auto in = lj.at("in").get<Eigen::Index>();
      const auto out = lj.at("out").get<Eigen::Index>();
      const auto w = lj.at("weights").get<std::vector<double>>();
      const auto b = lj.at("biases").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != in * out ||
          static_cast<Eigen::Index>(b.size()) != out) {
        throw ParseError("layer weight/bias arrays do not match declared dims");
      }
      layer.weights.resize(out, in);
      for (Eigen::Index r = 0; r < out; ++r) {
        for (Eigen::Index c = 0; c < in; ++c) {
          layer.weights(r, c) = w[static_cast<std::size_t>(r * in + c)];
        }
      }
      layer.biases = Eigen::Map<const Eigen::VectorXd>(b.data(), out);
      layer.activation = activation_from_string(lj.at("activation").get<std::string>());
      det.layers.push_back(std::move(layer));
    }
    const auto off = j.at("input_offset").get<std::vector<double>>();
    const auto scale = j.at("input_scale").get<std::vector<double>>();
    det.input_offset = Eigen::Map<const Eigen::VectorXd>(off.data(), static_cast<Eigen::Index>(off.size()));
    det.input_scale = Eigen::Map<const Eigen::VectorXd>(scale.data(), static_cast<Eigen::Index>(scale.size()));
    if (j.contains("training")) {
      const auto& t = j.at("training");
      MlpTrainConfig cfg;
      cfg.hidden = t.at("hidden").get<std::vector<int>>();
      cfg.hidden_activation = activation_from_string(t.at("hidden_activation").get<std::string>());
      cfg.learning_rate = t.at("learning_rate").get<double>();
      cfg.epochs = t.at("epochs").get<int>();
      cfg.batch_size = t.at("batch_size").get<int>();
      cfg.normalize = t.at("normalize").get<bool>();
      cfg.seed = t.at("seed").get<std::uint64_t>();
      det.provenance = cfg;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("detector JSON: ") + e.what());
  }
  det.validate();
  return det;
}

// ---------------------------------------------------------------------------
// Rates and calibration

inline bool flags(const SeDetector& det, const Eigen::VectorXd& z) {
  return se_detect(det, z).verdict == Verdict::kCompromised;
}

inline bool flags(const MlpDetector& det, const Eigen::VectorXd& z) {
  return mlp_classify(mlp_forward(det, z)) == Verdict::kCompromised;
}

template <typename Detector>
double flagged_fraction(const Detector& det, const std::vector<Eigen::VectorXd>& samples) {
  if (samples.empty()) throw EmptySetError("no samples to score");
  std::size_t hits = 0;
  for (const auto& z : samples) hits += flags(det, z) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

/// Fraction of genuinely safe samples flagged as compromised.
template <typename Detector>
double false_alarm_rate(const Detector& det, const std::vector<Eigen::VectorXd>& safe) {
  return flagged_fraction(det, safe);
}

template <typename Detector>
double detection_rate(const Detector& det, const std::vector<Eigen::VectorXd>& attacked) {
  return flagged_fraction(det, attacked);
}

inline double classification_accuracy(const MlpDetector& det, const LabeledDataset& data) {
  if (data.samples.empty()) throw EmptySetError("accuracy of an empty dataset");
  std::size_t correct = 0;
  for (const auto& s : data.samples) correct += (flags(det, s.z) ? 1 : 0) == s.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.samples.size());
}

/// Linear-interpolation empirical quantile (p in [0,1]).
inline double empirical_quantile(std::vector<double> values, double p) {
  if (values.empty()) throw EmptySetError("quantile of an empty set");
  std::sort(values.begin(), values.end());
  p = std::clamp(p, 0.0, 1.0);
  const double h = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct ThresholdCalibration {
  std::string support;
  double zeta_mw = 0.0;
  double fa_mlp = 0.0;
  double fa_se = 0.0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

/// zeta is the (1 - r) quantile of safe residual norms, r being the MLP's
/// false-alarm rate on the same samples.
inline ThresholdCalibration calibrate_threshold(const MlpDetector& mlp,
                                                const EstimatorModel& model,
                                                const std::string& support,
                                                const std::vector<Eigen::VectorXd>& safe,
                                                std::uint64_t seed = 0) {
  if (safe.empty()) throw EmptySetError("calibration needs safe samples");
  ThresholdCalibration cal;
  cal.support = support;
  cal.n_samples = safe.size();
  cal.seed = seed;
  cal.fa_mlp = false_alarm_rate(mlp, safe);
  std::vector<double> norms;
  norms.reserve(safe.size());
  for (const auto& z : safe) norms.push_back(residual(model, z).norm);
  cal.zeta_mw = empirical_quantile(norms, 1.0 - cal.fa_mlp);
  std::size_t over = 0;
  for (double v : norms) over += v > cal.zeta_mw ? 1 : 0;
  cal.fa_se = static_cast<double>(over) / static_cast<double>(norms.size());
  return cal;
}

/// Noisy draws around a fixed operating point.
inline std::vector<Eigen::VectorXd> draw_safe_samples(const Eigen::VectorXd& nominal,
                                                      double noise_sigma,
                                                      std::size_t count,
                                                      std::uint64_t seed) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    auto rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    Eigen::VectorXd z = nominal;
    add_gaussian_noise(z, noise_sigma, rng);
    out.push_back(std::move(z));
  }
  return out;
}

/// Monte-Carlo variant: draws `n_mc` safe samples from a substream keyed by
/// the support label, so every compromised set gets its own threshold.
inline ThresholdCalibration calibrate_threshold(const MlpDetector& mlp,
                                                const EstimatorModel& model,
                                                const std::string& support,
                                                const Eigen::VectorXd& nominal,
                                                double noise_sigma, std::size_t n_mc,
                                                std::uint64_t seed) {
  const auto stream = derive_seed(seed, "calibration/" + support);
  return calibrate_threshold(mlp, model, support,
                             draw_safe_samples(nominal, noise_sigma, n_mc, stream), seed);
}

inline void write_calibration_csv(std::ostream& out,
                                  const std::vector<ThresholdCalibration>& rows) {
  out << "support,zeta_mw,fa_mlp,fa_se,n_samples,seed\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%zu,%llu\n", r.support.c_str(),
                  r.zeta_mw, r.fa_mlp, r.fa_se, r.n_samples,
                  static_cast<unsigned long long>(r.seed));
    out << buf;
  }
}

}  // namespace fdi
