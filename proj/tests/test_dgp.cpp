#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "brr/dgp.hpp"
#include "brr/evaluation.hpp"

using namespace brr;

namespace {

struct MeanSe {
  double mean, se;
};

MeanSe mean_se(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))};
}

}  // namespace

TEST(Dgp, ShapeAndDeterminism) {
  DgpSpec s;
  s.seed = 4;
  auto a = simulate(s, 50), b = simulate(s, 50);
  EXPECT_EQ(a.features.cols(), 21u);
  EXPECT_EQ(a.features.values(), b.features.values());
  EXPECT_EQ(a.outcomes, b.outcomes);
  s.seed = 5;
  EXPECT_NE(simulate(s, 50).outcomes, a.outcomes);
}

TEST(Dgp, ContinuousTreatmentMoments) {
  DgpSpec s;
  s.seed = 8;
  auto d = simulate(s, 100000);
  // A = c W1 + N(0,1): Var A = 1 + c^2, Cov(A, W1) = c.
  double va = 0, cov = 0;
  for (std::size_t i = 0; i < d.features.rows(); ++i) {
    va += d.features(i, 0) * d.features(i, 0);
    cov += d.features(i, 0) * d.features(i, 1);
  }
  va /= 100000;
  cov /= 100000;
  EXPECT_NEAR(va, 1.25, 0.03);
  EXPECT_NEAR(cov, 0.5, 0.02);
}

TEST(Dgp, BinaryPropensityMatchesFormula) {
  std::vector<double> w{-1.0, 2.0, 0.5};
  const double u = 1.0 + (1 - 1.0) * 0.5;
  EXPECT_NEAR(binary_propensity(w), 1 / (1 + std::exp(-u)), 1e-15);
}

TEST(Dgp, ValidatesSpec) {
  DgpSpec s;
  s.p = 2;
  EXPECT_THROW(simulate(s, 10), ValidationError);
  DgpSpec binary;
  binary.treatment = TreatmentKind::Binary;
  EXPECT_THROW(oracle_ratio(Estimand::ASE, binary), ValidationError);
  EXPECT_THROW(oracle_ratio(Estimand::APE, DgpSpec{}), ValidationError);
}

TEST(Dgp, ShiftOracleIsGaussianDensityRatio) {
  // alpha(a, w) = phi(a - d - c w1) / phi(a - c w1)
  DgpSpec s;
  auto r = oracle_ratio(Estimand::ASE, s);
  std::vector<double> x(21, 0.0);
  x[0] = 0.7;
  x[1] = -0.4;
  const double m = 0.5 * -0.4;
  auto phi = [](double z) { return std::exp(-0.5 * z * z); };
  EXPECT_NEAR(r.at(x), phi(0.7 - 0.1 - m) / phi(0.7 - m), 1e-13);
}

TEST(Dgp, StabilizedOracleIsMarginalOverConditional) {
  DgpSpec s;
  auto r = oracle_ratio(Estimand::SW, s);
  std::vector<double> x(21, 0.0);
  x[0] = 1.3;
  x[1] = 0.8;
  const double v = 1.25;
  auto npdf = [](double z, double var) { return std::exp(-0.5 * z * z / var) / std::sqrt(2 * M_PI * var); };
  EXPECT_NEAR(r.at(x), npdf(1.3, v) / npdf(1.3 - 0.4, 1.0), 1e-12);
}

class OracleNormalization : public ::testing::TestWithParam<Estimand> {};

TEST_P(OracleNormalization, MeanIsOneUnderDenominator) {
  DgpSpec s;
  s.seed = 101;
  s.treatment = GetParam() == Estimand::APE ? TreatmentKind::Binary : TreatmentKind::Continuous;
  auto d = simulate(s, 200000);
  auto a = oracle_ratio(GetParam(), s).predict(d.features);
  auto ms = mean_se(a);
  EXPECT_LT(std::abs(ms.mean - 1.0), 4 * ms.se) << to_string(GetParam());
}

TEST_P(OracleNormalization, WeightedOutcomeRecoversTruth) {
  DgpSpec s;
  s.seed = 202;
  s.treatment = GetParam() == Estimand::APE ? TreatmentKind::Binary : TreatmentKind::Continuous;
  auto d = simulate(s, 200000);
  auto a = oracle_ratio(GetParam(), s).predict(d.features);
  std::vector<double> prod(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) prod[i] = a[i] * d.outcomes[i];
  auto ms = mean_se(prod);
  EXPECT_NEAR(iw_estimate(a, d.outcomes), ms.mean, 1e-12);
  EXPECT_LT(std::abs(ms.mean - true_estimand(GetParam(), s)), 4 * ms.se) << to_string(GetParam());
}

INSTANTIATE_TEST_SUITE_P(All, OracleNormalization, ::testing::Values(Estimand::APE, Estimand::ASE, Estimand::SW));

TEST(Dgp, TruthValues) {
  EXPECT_DOUBLE_EQ(true_estimand(Estimand::APE, DgpSpec{}), 1.0);
  EXPECT_NEAR(true_estimand(Estimand::ASE, DgpSpec{}), 0.6, 1e-15);
  EXPECT_DOUBLE_EQ(true_estimand(Estimand::SW, DgpSpec{}), 0.0);
}

TEST(Random, MixSeedSeparatesStreams) {
  EXPECT_NE(mix_seed(1, {0, hash_name("data")}), mix_seed(1, {0, hash_name("eval")}));
  EXPECT_NE(mix_seed(1, {0, 1}), mix_seed(1, {1, 0}));
  EXPECT_EQ(mix_seed(1, {2, 3}), mix_seed(1, {2, 3}));
}

TEST(Random, NormalMoments) {
  Rng rng(12);
  double m = 0, v = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    m += z;
    v += z * z;
  }
  EXPECT_NEAR(m / n, 0, 0.01);
  EXPECT_NEAR(v / n, 1, 0.015);
}
