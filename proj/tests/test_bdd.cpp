#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "support.hpp"

namespace fdi {
namespace {

using testing::random_network;

TEST(SeDetect, NoiseFreeIsSafe) {
  const auto model = testing::pjm5_model();
  const SeDetector det(model, 1e-6);
  const auto d = se_detect(det, model->H * Eigen::VectorXd::Constant(4, 0.03));
  EXPECT_EQ(d.verdict, Verdict::kSafe);
  EXPECT_LT(d.residual_norm, 1e-9);
}

TEST(SeDetect, ZeroThresholdFlagsAnyResidual) {
  const auto model = testing::pjm5_model();
  Eigen::VectorXd z = Eigen::VectorXd::Zero(11);
  z(3) = 0.5;
  EXPECT_EQ(se_detect(SeDetector(model, 0.0), z).verdict, Verdict::kCompromised);
}

TEST(SeDetect, BoundaryIsSafe) {
  const auto model = testing::pjm5_model();
  Eigen::VectorXd z = Eigen::VectorXd::Zero(11);
  z(0) = 2.0;
  const double norm = residual(*model, z).norm;
  EXPECT_EQ(se_detect(SeDetector(model, norm), z).verdict, Verdict::kSafe);
  EXPECT_EQ(se_detect(SeDetector(model, std::nextafter(norm, 0.0)), z).verdict, Verdict::kCompromised);
}

TEST(SeDetect, WrongLength) {
  EXPECT_THROW(se_detect(SeDetector(testing::pjm5_model(), 1.0), Eigen::VectorXd::Zero(4)), DimensionError);
}

TEST(SeDetect, RejectsNegativeThreshold) { EXPECT_THROW(SeDetector(testing::pjm5_model(), -1.0), ConfigError); }

MlpDetector one_one_one(double w1, double b1, double w2, double b2) {
  MlpDetector d;
  d.layers.push_back({Eigen::MatrixXd::Constant(1, 1, w1), Eigen::VectorXd::Constant(1, b1), Activation::kSigmoid});
  d.layers.push_back({Eigen::MatrixXd::Constant(1, 1, w2), Eigen::VectorXd::Constant(1, b2), Activation::kSigmoid});
  d.reset_normalization();
  return d;
}

TEST(MlpForward, ZeroNetworkScoresHalf) {
  auto rng = make_rng(1);
  auto d = random_network(rng, 11, {16, 8}, Activation::kSigmoid);
  for (auto& l : d.layers) {
    l.weights.setZero();
    l.biases.setZero();
  }
  // Hidden sigmoid units output 0.5 but the zero output weights ignore them.
  EXPECT_EQ(mlp_forward(d, Eigen::VectorXd::LinSpaced(11, -3, 7)), 0.5);
  EXPECT_EQ(mlp_classify(0.5), Verdict::kSafe);
}

TEST(MlpForward, HandComputedOneOneOne) {
  const auto d = one_one_one(2.0, -1.0, -3.0, 0.5);
  const double z = 0.7;
  const double h = 1.0 / (1.0 + std::exp(-(2.0 * z - 1.0)));
  const double expected = 1.0 / (1.0 + std::exp(-(-3.0 * h + 0.5)));
  EXPECT_NEAR(mlp_forward(d, Eigen::VectorXd::Constant(1, z)), expected, 1e-12);
}

TEST(MlpForward, NormalisationApplied) {
  auto d = one_one_one(1.0, 0.0, 1.0, 0.0);
  d.input_offset(0) = 10.0;
  d.input_scale(0) = 0.5;
  const auto plain = one_one_one(1.0, 0.0, 1.0, 0.0);
  EXPECT_NEAR(mlp_forward(d, Eigen::VectorXd::Constant(1, 14.0)), mlp_forward(plain, Eigen::VectorXd::Constant(1, 2.0)),
              1e-15);
}

TEST(MlpForward, ClassifyThreshold) {
  EXPECT_EQ(mlp_classify(0.5000001), Verdict::kCompromised);
  EXPECT_EQ(mlp_classify(0.4999999), Verdict::kSafe);
}

TEST(MlpForward, WrongLength) {
  auto rng = make_rng(2);
  const auto d = random_network(rng, 11, {4}, Activation::kSigmoid);
  EXPECT_THROW(mlp_forward(d, Eigen::VectorXd::Zero(3)), DimensionError);
  EXPECT_THROW(mlp_gradient(d, Eigen::VectorXd::Zero(3)), DimensionError);
}

TEST(MlpGradient, ZeroNetworkHasZeroGradient) {
  auto rng = make_rng(3);
  auto d = random_network(rng, 5, {6, 4}, Activation::kSigmoid);
  for (auto& l : d.layers) {
    l.weights.setZero();
    l.biases.setZero();
  }
  EXPECT_EQ(mlp_gradient(d, Eigen::VectorXd::Ones(5)).cwiseAbs().maxCoeff(), 0.0);
}

class GradientCheck : public ::testing::TestWithParam<Activation> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  auto rng = make_rng(derive_seed(17, to_string(GetParam())));
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    auto d = random_network(rng, 7, {5, 3}, GetParam(), 0.7);
    d.input_scale = Eigen::VectorXd::Constant(7, 0.8);
    const Eigen::VectorXd z = Eigen::VectorXd::NullaryExpr(7, [&] { return n(rng); });
    const Eigen::VectorXd g = mlp_gradient(d, z);
    const double h = 1e-5;
    Eigen::VectorXd fd(7);
    for (Eigen::Index i = 0; i < 7; ++i) {
      Eigen::VectorXd up = z;
      Eigen::VectorXd dn = z;
      up(i) += h;
      dn(i) -= h;
      fd(i) = (mlp_forward(d, up) - mlp_forward(d, dn)) / (2 * h);
    }
    EXPECT_LE((g - fd).norm(), 1e-4 * std::max(fd.norm(), 1e-8)) << "trial " << t;
  }
}

INSTANTIATE_TEST_SUITE_P(Activations, GradientCheck,
                         ::testing::Values(Activation::kSigmoid, Activation::kTanh));

LabeledDataset two_gaussians(double separation, std::size_t n, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  LabeledDataset d;
  d.seed = seed;
  for (std::size_t k = 0; k < n; ++k) {
    const int label = k < n / 2 ? 0 : 1;
    Eigen::VectorXd z(2);
    z << g(rng) + (label ? separation : 0.0), g(rng);
    d.samples.push_back({z, label});
  }
  return d;
}

TEST(MlpTrain, SeparableToyData) {
  const auto data = two_gaussians(10.0, 400, 5);
  MlpTrainConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 1;
  std::vector<double> loss;
  const auto det = mlp_train(data, cfg, &loss);
  EXPECT_GE(classification_accuracy(det, data), 0.99);
  ASSERT_EQ(loss.size(), 50u);
  EXPECT_LT(loss.back(), loss.front());
}

TEST(MlpTrain, DeterministicGivenSeed) {
  const auto data = two_gaussians(3.0, 200, 6);
  MlpTrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 77;
  const auto a = mlp_train(data, cfg);
  const auto b = mlp_train(data, cfg);
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_EQ(a.layers[l].weights, b.layers[l].weights);
    EXPECT_EQ(a.layers[l].biases, b.layers[l].biases);
  }
  cfg.seed = 78;
  const auto c = mlp_train(data, cfg);
  EXPECT_NE(a.layers[0].weights, c.layers[0].weights);
}

TEST(MlpTrain, PaperArchitecture) {
  const auto data = two_gaussians(3.0, 100, 7);
  MlpTrainConfig cfg;
  cfg.epochs = 1;
  const auto det = mlp_train(data, cfg);
  ASSERT_EQ(det.layers.size(), 3u);
  EXPECT_EQ(det.layers[0].weights.rows(), 16);
  EXPECT_EQ(det.layers[1].weights.rows(), 8);
  EXPECT_EQ(det.layers[2].weights.rows(), 1);
  EXPECT_EQ(det.layers[2].activation, Activation::kSigmoid);
}

TEST(MlpTrain, ConfigErrors) {
  const auto data = two_gaussians(3.0, 20, 8);
  MlpTrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(mlp_train(data, cfg), ConfigError);
  cfg.epochs = 1;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(mlp_train(data, cfg), ConfigError);
}

TEST(MlpTrain, SingleClassIsDegenerate) {
  auto data = two_gaussians(3.0, 20, 9);
  for (auto& s : data.samples) s.label = 0;
  EXPECT_THROW(mlp_train(data, MlpTrainConfig{}), DegenerateDataError);
}

TEST(MlpJson, RoundTrip) {
  auto rng = make_rng(10);
  auto d = random_network(rng, 4, {3}, Activation::kTanh);
  d.input_offset = Eigen::VectorXd::LinSpaced(4, -1, 1);
  const auto back = mlp_from_json(to_json(d));
  const Eigen::VectorXd z = Eigen::VectorXd::LinSpaced(4, 0.3, 2.0);
  EXPECT_EQ(mlp_forward(d, z), mlp_forward(back, z));
}

DatasetScenario pjm5_scenario(const std::shared_ptr<const EstimatorModel>& model, std::size_t n, double sigma) {
  const auto grid = testing::pjm5();
  const auto line = line_sensitivity(*model, grid, 2, 3);
  DatasetScenario sc;
  sc.x0 = dc_operating_point(grid, {210.0, -300.0, 23.49, -400.0, 466.51});
  sc.noise_sigma = sigma;
  sc.n_total = n;
  sc.attack_generator = make_training_attack_generator(model, line.G, {0, 3, 4, 9}, {1, 2}, 2.0, 8.0);
  return sc;
}

TEST(GenerateDataset, FourSamplesBalanced) {
  const auto model = testing::pjm5_model();
  const auto d = generate_dataset(*model, pjm5_scenario(model, 4, 1.0), 1);
  ASSERT_EQ(d.samples.size(), 4u);
  EXPECT_EQ(d.samples[0].label, 0);
  EXPECT_EQ(d.samples[1].label, 0);
  EXPECT_EQ(d.samples[2].label, 1);
  EXPECT_EQ(d.samples[3].label, 1);
}

TEST(GenerateDataset, NoiseFreeAttackedDiffersByInjection) {
  const auto model = testing::pjm5_model();
  auto sc = pjm5_scenario(model, 4, 0.0);
  const Eigen::VectorXd za = Eigen::VectorXd::LinSpaced(11, 1.0, 2.0);
  sc.attack_generator = [&](Rng&) { return za; };
  const auto d = generate_dataset(*model, sc, 2);
  EXPECT_LT((d.samples[2].z - d.samples[0].z - za).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GenerateDataset, ShapeAudit) {
  const auto model = testing::pjm5_model();
  const auto d = generate_dataset(*model, pjm5_scenario(model, 10000, 1.0), 3);
  EXPECT_EQ(d.count(0), 5000u);
  EXPECT_EQ(d.count(1), 5000u);
  for (const auto& s : d.samples) ASSERT_EQ(s.z.size(), 11);
}

TEST(GenerateDataset, OddCountRejected) {
  const auto model = testing::pjm5_model();
  EXPECT_THROW(generate_dataset(*model, pjm5_scenario(model, 5, 1.0), 1), ConfigError);
}

TEST(MlpTrain, Pjm5HeldOutAccuracy) {
  const auto model = testing::pjm5_model();
  const auto train = generate_dataset(*model, pjm5_scenario(model, 10000, 1.0), 31);
  const auto test = generate_dataset(*model, pjm5_scenario(model, 2000, 1.0), 32);
  MlpTrainConfig cfg;
  cfg.seed = 33;
  const auto det = mlp_train(train, cfg);
  EXPECT_GE(classification_accuracy(det, test), 0.9);

  // Mean score over fresh safe samples stays below the decision level.
  const Eigen::VectorXd nominal = model->H * pjm5_scenario(model, 2, 1.0).x0;
  const auto safe = draw_safe_samples(nominal, 1.0, 1000, 34);
  double mean = 0.0;
  for (const auto& z : safe) mean += mlp_forward(det, z) / 1000.0;
  EXPECT_LT(mean, 0.5);
}

TEST(Rates, SeExtremes) {
  const auto model = testing::pjm5_model();
  const auto safe = draw_safe_samples(Eigen::VectorXd::Zero(11), 1.0, 200, 4);
  EXPECT_EQ(false_alarm_rate(SeDetector(model, std::numeric_limits<double>::infinity()), safe), 0.0);
  EXPECT_EQ(false_alarm_rate(SeDetector(model, 0.0), safe), 1.0);
  EXPECT_THROW(false_alarm_rate(SeDetector(model, 1.0), std::vector<Eigen::VectorXd>{}), EmptySetError);
  EXPECT_THROW(detection_rate(SeDetector(model, 1.0), std::vector<Eigen::VectorXd>{}), EmptySetError);
}

TEST(Rates, LargeResidualAttackAlwaysDetected) {
  const auto model = testing::pjm5_model();
  const double zeta = 3.0;
  Eigen::VectorXd za = model->W.col(2);
  za *= 10.0 * zeta / residual(*model, za).norm;
  EXPECT_EQ(detection_rate(SeDetector(model, zeta), std::vector<Eigen::VectorXd>{za}), 1.0);
}

TEST(Rates, ZeroAttackMatchesFalseAlarm) {
  const auto model = testing::pjm5_model();
  const auto safe = draw_safe_samples(Eigen::VectorXd::Zero(11), 1.0, 500, 5);
  const SeDetector det(model, 2.5);
  EXPECT_EQ(detection_rate(det, safe), false_alarm_rate(det, safe));
}

TEST(Quantile, Interpolates) {
  EXPECT_DOUBLE_EQ(empirical_quantile({3.0, 1.0, 2.0, 4.0}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(empirical_quantile({3.0, 1.0, 2.0}, 1.0), 3.0);
  EXPECT_DOUBLE_EQ(empirical_quantile({3.0, 1.0, 2.0}, 0.0), 1.0);
  EXPECT_THROW(empirical_quantile({}, 0.5), EmptySetError);
}

MlpDetector constant_detector(int dim, double bias) {
  MlpDetector d;
  d.layers.push_back({Eigen::MatrixXd::Zero(1, dim), Eigen::VectorXd::Constant(1, bias), Activation::kSigmoid});
  d.reset_normalization();
  return d;
}

TEST(Calibrate, ZeroFalseAlarmGivesMaxResidual) {
  const auto model = testing::pjm5_model();
  const auto safe = draw_safe_samples(Eigen::VectorXd::Zero(11), 1.0, 300, 6);
  const auto cal = calibrate_threshold(constant_detector(11, -5.0), *model, "z1", safe, 6);
  double max_norm = 0.0;
  for (const auto& z : safe) max_norm = std::max(max_norm, residual(*model, z).norm);
  EXPECT_EQ(cal.fa_mlp, 0.0);
  EXPECT_DOUBLE_EQ(cal.zeta_mw, max_norm);
  EXPECT_EQ(cal.fa_se, 0.0);
}

// An "MLP" that flags a fixed 5% of samples: a linear unit on one coordinate
// thresholded at that coordinate's empirical 95th percentile.
TEST(Calibrate, TargetRateFivePercent) {
  const auto model = testing::pjm5_model();
  const auto safe = draw_safe_samples(Eigen::VectorXd::Zero(11), 1.0, 2000, 7);
  std::vector<double> first;
  for (const auto& z : safe) first.push_back(z(0));
  const double cut = empirical_quantile(first, 0.95);
  MlpDetector d = constant_detector(11, -1000.0 * cut);
  d.layers[0].weights(0, 0) = 1000.0;
  const auto cal = calibrate_threshold(d, *model, "z1", safe, 7);
  EXPECT_NEAR(cal.fa_mlp, 0.05, 0.002);
  EXPECT_GE(cal.fa_se, 0.03);
  EXPECT_LE(cal.fa_se, 0.07);
  const auto held_out = draw_safe_samples(Eigen::VectorXd::Zero(11), 1.0, 2000, 8);
  const double fa = false_alarm_rate(SeDetector(model, cal.zeta_mw), held_out);
  EXPECT_GE(fa, 0.03);
  EXPECT_LE(fa, 0.07);
}

TEST(Calibrate, EmptyPool) {
  EXPECT_THROW(calibrate_threshold(constant_detector(11, 0.0), *testing::pjm5_model(), "z1", {}, 1), EmptySetError);
}

TEST(Calibrate, PerSupportPoolsDiffer) {
  const auto model = testing::pjm5_model();
  const auto det = constant_detector(11, -5.0);
  const auto a = calibrate_threshold(det, *model, "z1", Eigen::VectorXd::Zero(11), 1.0, 500, 9);
  const auto b = calibrate_threshold(det, *model, "z4", Eigen::VectorXd::Zero(11), 1.0, 500, 9);
  const auto a2 = calibrate_threshold(det, *model, "z1", Eigen::VectorXd::Zero(11), 1.0, 500, 9);
  EXPECT_NE(a.zeta_mw, b.zeta_mw);
  EXPECT_EQ(a.zeta_mw, a2.zeta_mw);
}

TEST(Calibrate, CsvLayout) {
  std::ostringstream out;
  write_calibration_csv(out, {{"z1z4", 10.5, 0.05, 0.05, 2000, 3}});
  EXPECT_EQ(out.str(), "support,zeta_mw,fa_mlp,fa_se,n_samples,seed\nz1z4,10.500000,0.050000,0.050000,2000,3\n");
}

}  // namespace
}  // namespace fdi
