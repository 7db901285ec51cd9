#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "brr/evaluation.hpp"

using namespace brr;

TEST(Metrics, HandComputedValues) {
  std::vector<double> ah{1.0, 2.0, 0.5}, a0{1.5, 1.0, 0.5}, y{2.0, -1.0, 4.0};
  auto m = compute_metrics(ah, a0, y);
  // errors: -0.5, 1, 0
  EXPECT_NEAR(m.abs_bias, std::abs((2.0 * -0.5 + -1.0 * 1.0) / 3), 1e-15);
  EXPECT_NEAR(m.mae, 0.5, 1e-15);
  EXPECT_NEAR(m.rmse, std::sqrt(1.25 / 3), 1e-15);
}

TEST(Metrics, HolderBoundsHoldOnRandomInputs) {
  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<double> ah(n), a0(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      ah[i] = rng.uniform() * 3;
      a0[i] = rng.uniform() * 3;
      y[i] = rng.normal(0, 2);
    }
    auto m = compute_metrics(ah, a0, y);
    double ysup = 0, y2 = 0;
    for (double v : y) {
      ysup = std::max(ysup, std::abs(v));
      y2 += v * v;
    }
    EXPECT_LE(m.mae, m.rmse * (1 + 1e-12));
    EXPECT_LE(m.abs_bias, ysup * m.mae * (1 + 1e-12));
    EXPECT_LE(m.abs_bias, std::sqrt(y2 / static_cast<double>(n)) * m.rmse * (1 + 1e-12));
  }
}

TEST(Metrics, PerfectEstimateIsZeroAndMismatchThrows) {
  std::vector<double> a{1, 2}, y{3, 4}, short_v{1};
  auto m = compute_metrics(a, a, y);
  EXPECT_EQ(m.abs_bias, 0.0);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_THROW(compute_metrics(a, short_v, y), StructuralError);
}

TEST(Estimate, ImportanceWeightedMean) {
  std::vector<double> a{0.5, 2.0}, y{4.0, 1.0};
  EXPECT_DOUBLE_EQ(iw_estimate(a, y), 2.0);
  std::vector<double> none;
  EXPECT_THROW(iw_estimate(none, none), StructuralError);
}

TEST(Median, LowerMedianAgainstSorting) {
  Rng rng(4);
  for (int k = 0; k < 100; ++k) {
    std::vector<double> v(1 + rng.below(20));
    for (double& x : v) x = std::floor(rng.uniform() * 10);
    auto s = v;
    std::sort(s.begin(), s.end());
    EXPECT_EQ(lower_median(v), s[(s.size() - 1) / 2]);
  }
  EXPECT_EQ(lower_median({4, 1, 3, 2}), 2);
  EXPECT_THROW(lower_median({}), ValidationError);
}

TEST(Csv, RowSchemaAndFailureMarker) {
  MetricsReport r;
  r.learner = "mlp";
  r.divergence = "NB";
  r.scheme = "none";
  r.metrics = {0.125, 0.5, 0.75};
  EXPECT_EQ(csv_header(), "learner,divergence,scheme,m,replicate,abs_bias,mae,rmse,runtime_seconds");
  EXPECT_EQ(to_csv_row(r), "mlp,NB,none,1,0,0.125,0.5,0.75,0");
  r.failed = true;
  EXPECT_EQ(to_csv_row(r), "mlp,NB,none,1,0,FAILED,FAILED,FAILED,0");
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(NAN), "nan");
}

TEST(Propensity, NegativeBinomialRiskIsCrossEntropy) {
  FeatureMatrix x = FeatureMatrix::from_rows({{1, 0.3}, {0, -0.2}, {1, 1.5}, {0, 0.0}, {1, -1.0}});
  auto s = classification_samples(x, 0);
  std::vector<double> q{0.7, 0.4, 0.9, 0.2, 0.55};
  std::vector<double> odds(q.size());
  double bce = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    odds[i] = q[i] / (1 - q[i]);
    const double a = x(i, 0);
    bce -= a * std::log(q[i]) + (1 - a) * std::log(1 - q[i]);
  }
  bce /= static_cast<double>(q.size());
  EXPECT_NEAR(brr_empirical(negative_binomial(), odds, s), bce, 1e-12);
}

TEST(Propensity, RatioIsTreatmentOverClippedPropensity) {
  PropensityRatio r([](const FeatureMatrix& w) { return std::vector<double>(w.rows(), 0.0); }, 0);
  FeatureMatrix x = FeatureMatrix::from_rows({{1, 5.0}, {0, 5.0}});
  auto a = r.predict(x);
  EXPECT_DOUBLE_EQ(a[0], 2.0);
  EXPECT_DOUBLE_EQ(a[1], 0.0);
  PropensityRatio extreme([](const FeatureMatrix& w) { return std::vector<double>(w.rows(), -100.0); }, 0);
  EXPECT_NEAR(extreme.predict(x)[0], 1e6, 1e-3);
}

TEST(Propensity, DegenerateLabelsRejected) {
  FeatureMatrix x = FeatureMatrix::from_rows({{1, 0.3}, {1, -0.2}});
  EXPECT_THROW(classification_samples(x, 0), DegenerateOverlapError);
}

TEST(Propensity, BaselinesFitALogisticSignal) {
  Rng rng(9);
  auto make = [&](std::size_t n) {
    FeatureMatrix x(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
      x(i, 1) = rng.normal();
      x(i, 2) = rng.normal();
      x(i, 0) = rng.uniform() < 1 / (1 + std::exp(-1.5 * x(i, 1))) ? 1 : 0;
    }
    return x;
  };
  auto tr = make(600), va = make(200);
  PropensityOptions opt;
  MlpSpec ms;
  ms.width = 8;
  ms.learning_rate = 1e-2;
  ms.max_epochs = 50;
  opt.mlp_grid = {ms};
  GbmSpec gs;
  gs.learning_rate = 0.1;
  gs.max_trees = 100;
  opt.gbm_grid = {gs};
  FeatureMatrix w = FeatureMatrix::from_rows({{-2.0, 0.0}, {2.0, 0.0}});
  for (auto kind : {PropensityLearner::MLP, PropensityLearner::GBM}) {
    auto r = propensity_baseline(tr, va, 0, kind, 1, opt);
    auto q = r.propensity(w);
    EXPECT_LT(q[0], 0.35);
    EXPECT_GT(q[1], 0.65);
  }
}
