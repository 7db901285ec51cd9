#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "brr/dgp.hpp"
#include "brr/kernel.hpp"

using namespace brr;

namespace {

FeatureMatrix gaussian_points(std::size_t n, std::size_t d, double mean, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = rng.normal(mean, 1.0);
  return x;
}

AugmentedDataset shifted_pair(std::size_t n, std::size_t d, double shift, std::uint64_t seed) {
  return build_augmented(gaussian_points(n, d, 0.0, seed), gaussian_points(n, d, shift, seed + 1));
}

double ls_risk(const SieveModel& m, const WeightedSamples& data) {
  return brr_empirical(least_squares(), m.predict(data.features()), data);
}

}  // namespace

TEST(Kde, ScottBandwidthFormula) {
  FeatureMatrix x = FeatureMatrix::from_rows({{0, 1}, {2, 1}, {4, 1}});
  auto h = scott_bandwidths(x);
  const double factor = std::pow(3.0, -1.0 / 6.0);
  EXPECT_NEAR(h[0], factor * 2.0, 1e-14);
  EXPECT_NEAR(h[1], factor, 1e-14);  // zero spread falls back to unit scale
}

TEST(Kde, DensityMatchesDirectSum) {
  FeatureMatrix x = FeatureMatrix::from_rows({{0.0, 1.0}, {1.0, -0.5}, {0.3, 0.2}});
  std::vector<double> h{0.7, 1.3};
  GaussianKde kde(x, h);
  std::vector<double> q{0.4, 0.1};
  double want = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    double p = 1;
    for (std::size_t j = 0; j < 2; ++j) {
      const double z = (q[j] - x(i, j)) / h[j];
      p *= std::exp(-0.5 * z * z) / (h[j] * std::sqrt(2 * M_PI));
    }
    want += p / 3;
  }
  EXPECT_NEAR(kde.density(q), want, 1e-15);
}

TEST(Kde, IntegratesToOne) {
  auto x = gaussian_points(200, 1, 0.0, 3);
  GaussianKde kde(x);
  double s = 0;
  const double lo = -10, hi = 10;
  const int n = 4000;
  for (int k = 0; k <= n; ++k) {
    const double t = lo + (hi - lo) * k / n;
    const double w = (k == 0 || k == n) ? 0.5 : 1.0;
    s += w * kde.density(std::span<const double>(&t, 1));
  }
  EXPECT_NEAR(s * (hi - lo) / n, 1.0, 1e-6);
}

TEST(Kde, FarPointsStayFiniteInLogSpace) {
  auto x = gaussian_points(50, 3, 0.0, 4);
  GaussianKde kde(x);
  std::vector<double> far{80, 80, 80};
  EXPECT_TRUE(std::isfinite(kde.log_density(far)));
  EXPECT_EQ(kde.density(far), 0.0);
}

TEST(Kde, ShiftRatioClipsVanishingDenominator) {
  auto x = gaussian_points(100, 2, 0.0, 5);
  KdeRatioModel m(x, Estimand::ASE, {0.1, 0});
  FeatureMatrix far = FeatureMatrix::from_rows({{300.0, 300.0}, {0.0, 0.0}});
  auto a = m.predict(far);
  EXPECT_EQ(m.clipped_count(), 1u);
  EXPECT_TRUE(std::isfinite(a[1]));
  EXPECT_THROW(KdeRatioModel(x, Estimand::APE, {}), ValidationError);
}

TEST(Kde, StabilizedRatioNearOneForIndependentColumns) {
  auto x = gaussian_points(2000, 2, 0.0, 6);
  KdeRatioModel m(x, Estimand::SW, {0.1, 0});
  FeatureMatrix q = FeatureMatrix::from_rows({{0.0, 0.0}, {0.5, -0.5}});
  for (double a : m.predict(q)) EXPECT_NEAR(a, 1.0, 0.15);
}

TEST(Ulsif, SingleCenterClosedForm) {
  // One center at the only numerator point: theta = h / H by hand.
  FeatureMatrix den = FeatureMatrix::from_rows({{0.0}, {1.0}, {2.0}});
  FeatureMatrix num = FeatureMatrix::from_rows({{1.5}});
  auto data = build_augmented(den, num);
  const double s = 1.3;
  auto k = [&](double x) { return std::exp(-(x - 1.5) * (x - 1.5) / (2 * s * s)); };
  const double H = 2.0 / 6.0 * (k(0) * k(0) + k(1) * k(1) + k(2) * k(2));
  const double h = 2.0 * 0.5 * k(1.5);
  auto K = gaussian_kernel_matrix(data.features(), num, s);
  auto sol = ulsif_solve(K, data, 0.0);
  EXPECT_NEAR(sol.theta(0), h / H, 1e-12);
}

TEST(Ulsif, RawSolutionMinimizesLeastSquaresRisk) {
  auto data = shifted_pair(150, 2, 0.5, 7);
  auto s = detail::sieve_setup(data, {20, 1.5, 0.0}, 3);
  auto sol = ulsif_solve(s.K, data, 0.0);
  auto risk = [&](const Eigen::VectorXd& th) {
    Eigen::VectorXd a = s.K * th;
    return brr_empirical(least_squares(), std::vector<double>(a.data(), a.data() + a.size()), data);
  };
  const double r0 = risk(sol.theta);
  // Generic oracle: no coordinate perturbation lowers the risk, and the central
  // difference gradient vanishes.
  for (Eigen::Index k = 0; k < sol.theta.size(); ++k) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(sol.theta.size());
    e(k) = 1e-3;
    EXPECT_GE(risk(sol.theta + e), r0 - 1e-12);
    EXPECT_GE(risk(sol.theta - e), r0 - 1e-12);
    EXPECT_NEAR((risk(sol.theta + e) - risk(sol.theta - e)) / 2e-3, 0.0, 1e-6);
  }
}

TEST(Ulsif, FittedModelSatisfiesNormalization) {
  auto data = shifted_pair(200, 2, 0.5, 8);
  auto m = fit_ulsif(data, {50, 1.0, 0.1}, 1);
  auto a = m.predict(data.features());
  double mass = 0;
  for (std::size_t i = 0; i < data.rows(); ++i)
    if (!data.delta()[i]) mass += 2 * data.omega()[i] * a[i];
  EXPECT_NEAR(mass, 1.0, 1e-10);
  for (double t : m.theta()) EXPECT_GE(t, 0.0);
}

TEST(Ulsif, BasisCappedAtNumeratorCount) {
  auto data = shifted_pair(30, 1, 0.5, 9);
  auto m = fit_ulsif(data, {100, 1.0, 0.1}, 1);
  EXPECT_TRUE(m.basis_capped);
  EXPECT_EQ(m.centers().rows(), 30u);
}

TEST(Ulsif, RidgeEscalatesOnSingularSystem) {
  // Duplicate centers make H rank deficient at lambda = 0.
  FeatureMatrix den = FeatureMatrix::from_rows({{0.0}, {1.0}});
  FeatureMatrix num = FeatureMatrix::from_rows({{0.5}, {0.5}});
  auto data = build_augmented(den, num);
  auto K = gaussian_kernel_matrix(data.features(), num, 1.0);
  auto sol = ulsif_solve(K, data, 0.0);
  EXPECT_GT(sol.lambda, 0.0);
  EXPECT_THROW(ulsif_solve(K, data, -1.0), ValidationError);
}

TEST(Kliep, ConstraintMonotoneObjectiveAndKkt) {
  auto data = shifted_pair(200, 2, 0.5, 10);
  auto m = fit_kliep(data, {40, 1.5, 0.0}, 2);
  const auto& tr = m.objective_trace;
  for (std::size_t k = 1; k < tr.size(); ++k) EXPECT_GE(tr[k], tr[k - 1]);
  auto a = m.predict(data.features());
  double mass = 0, num_w = 0;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    if (!data.delta()[i]) mass += 2 * data.omega()[i] * a[i];
    else num_w += 2 * data.omega()[i];
  }
  EXPECT_NEAR(mass, 1.0, 1e-10);
  // KKT on {theta >= 0, b.theta = 1}: g_k = mu b_k on the support and g_k <= mu b_k off it,
  // with mu = total numerator weight.
  auto K = gaussian_kernel_matrix(data.features(), m.centers(), m.bandwidth());
  Eigen::VectorXd g = Eigen::VectorXd::Zero(K.cols()), b = Eigen::VectorXd::Zero(K.cols());
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (data.delta()[i]) g += 2 * data.omega()[i] / a[i] * K.row(r).transpose();
    else b += 2 * data.omega()[i] * K.row(r).transpose();
  }
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    if (m.theta()[static_cast<std::size_t>(k)] > 1e-6) EXPECT_NEAR(g(k) / b(k), num_w, 0.02);
    else EXPECT_LE(g(k) / b(k), num_w + 0.02);
  }
}

TEST(Sieve, GridsHaveDocumentedSizes) {
  EXPECT_EQ(ulsif_grid().size(), 48u);
  EXPECT_EQ(kliep_grid().size(), 12u);
}

TEST(Sieve, SearchPicksLowestValidationRisk) {
  auto train = shifted_pair(150, 2, 0.5, 11);
  auto val = shifted_pair(60, 2, 0.5, 12);
  std::vector<SieveParams> grid{{30, 0.5, 0.1}, {30, 2.0, 0.1}, {30, 10.0, 0.1}};
  auto best = hyperparameter_search(SieveMethod::ULSIF, grid, train, val, 4);
  ASSERT_EQ(best.scores.size(), 3u);
  for (double s : best.scores) EXPECT_GE(s, best.score);
  EXPECT_NEAR(best.score, validation_brr(least_squares(), best.model, val), 1e-12);
}

TEST(Search, TiesKeepEarlierCandidateAndAllFailAggregates) {
  std::vector<int> grid{3, 1, 1, 2};
  auto r = grid_search(std::span<const int>(grid), [](int p) { return p; }, [](int m) { return double(m); });
  EXPECT_EQ(r.index, 1u);
  auto fail = [](int p) -> int { throw FitError("bad " + std::to_string(p)); };
  try {
    grid_search(std::span<const int>(grid), fail, [](int m) { return double(m); });
    FAIL();
  } catch (const FitError& e) {
    EXPECT_NE(std::string(e.what()).find("bad 3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bad 2"), std::string::npos);
  }
}
