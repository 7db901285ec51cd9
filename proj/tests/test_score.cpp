#include <cmath>

#include <gtest/gtest.h>

#include "brr/random.hpp"
#include "brr/score.hpp"

using namespace brr;

namespace {

FeatureMatrix gaussian(std::size_t n, std::size_t d, double sd, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = sd * rng.normal();
  return x;
}

VectorModel scaled_identity(std::size_t d, double s) {
  return VectorModel(
      d, [s](const Eigen::VectorXd& x) -> Eigen::VectorXd { return -s * x; },
      [s, d](const Eigen::VectorXd&) { return -s * static_cast<double>(d); });
}

}  // namespace

TEST(Score, TrueScoreRiskIsMinusDimension) {
  const std::size_t n = 200000, d = 3;
  auto x = gaussian(n, d, 1.0, 1);
  // Monte Carlo oracle: risk = mean |x|^2 - 2d; |x|^2 has variance 2d.
  const double r = score_matching_risk(scaled_identity(d, 1.0), x);
  EXPECT_NEAR(r, -3.0, 4 * std::sqrt(6.0 / n));
}

TEST(Score, ZeroModelHasZeroRisk) {
  auto x = gaussian(10, 2, 1.0, 2);
  VectorModel zero(2, [](const Eigen::VectorXd& v) -> Eigen::VectorXd { return Eigen::VectorXd::Zero(v.size()); });
  EXPECT_NEAR(score_matching_risk(zero, x), 0.0, 1e-12);
}

TEST(Score, ScaledModelPopulationRiskMinimizedAtOne) {
  auto x = gaussian(100000, 2, 1.0, 3);
  double best_s = 0, best = 1e300;
  for (double s = 0.5; s <= 1.5; s += 0.05) {
    const double r = score_matching_risk(scaled_identity(2, s), x);
    EXPECT_NEAR(r, s * s * 2 - 2 * s * 2, 0.05);
    if (r < best) {
      best = r;
      best_s = s;
    }
  }
  EXPECT_NEAR(best_s, 1.0, 0.06);
}

TEST(Score, FiniteDifferenceTraceMatchesAnalytic) {
  LinearScore l;
  l.B = Eigen::MatrixXd::Random(3, 3);
  l.b = Eigen::VectorXd::Random(3);
  auto m = l.model();
  Eigen::VectorXd x = Eigen::VectorXd::Random(3);
  EXPECT_NEAR(m.finite_difference_trace(x, 1e-4), m.jacobian_trace(x), 1e-6);
  VectorModel no_trace(3, [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return l.B * v + l.b; });
  EXPECT_FALSE(no_trace.has_analytic_trace());
  EXPECT_NEAR(no_trace.jacobian_trace(x), l.B.trace(), 1e-6);
}

TEST(Score, NonFiniteTraceIsAnError) {
  VectorModel bad(
      1, [](const Eigen::VectorXd& v) -> Eigen::VectorXd { return v; }, [](const Eigen::VectorXd&) { return NAN; });
  auto x = gaussian(3, 1, 1.0, 4);
  EXPECT_THROW(score_matching_risk(bad, x), DomainError);
}

TEST(Score, LinearFitRecoversStandardGaussianScore) {
  const std::size_t n = 100000;
  auto x = gaussian(n, 3, 1.0, 5);
  auto fit = fit_linear_score(x);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(fit.B(i, j), i == j ? -1.0 : 0.0, 5 / std::sqrt(double(n)));
    EXPECT_NEAR(fit.b(i), 0.0, 5 / std::sqrt(double(n)));
  }
  EXPECT_LE(score_matching_risk(fit.model(), x), score_matching_risk(scaled_identity(3, 1.0), x) + 1e-12);
}

TEST(Score, OneDimensionalVarianceFour) {
  auto x = gaussian(50000, 1, 2.0, 6);
  EXPECT_NEAR(fit_linear_score(x).B(0, 0), -0.25, 0.01);
}

TEST(Score, ShiftedMeanGivesOffset) {
  auto x = gaussian(50000, 2, 1.0, 7);
  for (std::size_t i = 0; i < x.rows(); ++i) x(i, 0) += 2.0;
  auto fit = fit_linear_score(x);
  // b = Sigma^-1 mu = (2, 0)
  EXPECT_NEAR(fit.b(0), 2.0, 0.05);
  EXPECT_NEAR(fit.b(1), 0.0, 0.05);
}

TEST(Score, RejectsTooFewSamplesAndSingularData) {
  auto x = gaussian(3, 3, 1.0, 8);
  EXPECT_THROW(fit_linear_score(x), ValidationError);
  FeatureMatrix flat(10, 2);
  EXPECT_THROW(fit_linear_score(flat), FitError);
}
