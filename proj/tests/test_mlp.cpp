#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "brr/mlp.hpp"

using namespace brr;

namespace {

FeatureMatrix gaussian_points(std::size_t n, std::size_t d, double mean, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = rng.normal(mean, 1.0);
  return x;
}

AugmentedDataset shifted_pair(std::size_t n, double shift, std::uint64_t seed) {
  return build_augmented(gaussian_points(n, 2, 0.0, seed), gaussian_points(n, 2, shift, seed + 1));
}

MlpSpec small_spec() {
  MlpSpec s;
  s.depth = 2;
  s.width = 8;
  s.batch_size = 50;
  s.learning_rate = 1e-2;
  s.max_epochs = 60;
  s.patience = 5;
  return s;
}

}  // namespace

TEST(Mlp, ParameterLayoutAndInitBounds) {
  Rng rng(1);
  MlpModel m(4, 2, 5, rng);
  EXPECT_EQ(m.parameter_count(), 4u * 5 + 5 + 5 * 5 + 5 + 5 + 1);
  for (const auto& L : m.layers()) {
    const double bound = 1 / std::sqrt(static_cast<double>(L.in));
    for (Eigen::Index k = L.weight_offset; k < L.bias_offset + L.out; ++k)
      EXPECT_LE(std::abs(m.parameters()(k)), bound);
  }
}

TEST(Mlp, ForwardMatchesHandComputation) {
  Rng rng(2);
  MlpModel m(2, 1, 2, rng);
  Eigen::VectorXd th(9);
  // W1 (2x2 column-major), b1, W2 (1x2), b2
  th << 1, 0, 0, 1, 0, 0, 1, -1, 0.5;
  m.set_parameters(th);
  Eigen::MatrixXd X(2, 1);
  X << 0.3, -0.2;
  auto sp = [](double z) { return std::log1p(std::exp(z)); };
  EXPECT_NEAR(m.forward(X)(0), sp(0.3) - sp(-0.2) + 0.5, 1e-14);
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  for (const auto& F : all_generators()) {
    Rng rng(3);
    MlpModel m(3, 2, 6, rng);
    const int B = 12;
    Eigen::MatrixXd X(3, B);
    std::vector<std::uint8_t> d(B);
    std::vector<double> w(B);
    for (int i = 0; i < B; ++i) {
      for (int j = 0; j < 3; ++j) X(j, i) = rng.normal();
      d[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i % 2);
      w[static_cast<std::size_t>(i)] = 1.0 / B;
    }
    auto loss = [&](const Eigen::VectorXd& th) {
      MlpModel c = m;
      c.set_parameters(th);
      return batch_risk_and_grad(F, c.forward(X), d, w, nullptr);
    };
    Eigen::RowVectorXd gf;
    batch_risk_and_grad(F, m.forward(X), d, w, &gf);
    const Eigen::VectorXd g = m.backward(X, gf);
    const Eigen::VectorXd th = m.parameters();
    for (Eigen::Index k = 0; k < th.size(); ++k) {
      Eigen::VectorXd p = th, q = th;
      const double h = 1e-6;
      p(k) += h;
      q(k) -= h;
      const double fd = (loss(p) - loss(q)) / (2 * h);
      EXPECT_LT(std::abs(g(k) - fd), 1e-4 * std::max(std::abs(fd), 1e-4)) << F.name << " param " << k;
    }
  }
}

TEST(Mlp, SameSeedSameModel) {
  auto train = shifted_pair(200, 0.7, 1), val = shifted_pair(80, 0.7, 5);
  auto a = fit_mlp(train, val, negative_binomial(), small_spec(), 9);
  auto b = fit_mlp(train, val, negative_binomial(), small_spec(), 9);
  EXPECT_EQ(a.parameters(), b.parameters());
  EXPECT_EQ(a.validation_trace, b.validation_trace);
}

TEST(Mlp, ReturnsBestValidationSnapshot) {
  auto train = shifted_pair(200, 0.7, 1), val = shifted_pair(80, 0.7, 5);
  auto m = fit_mlp(train, val, kullback_leibler(), small_spec(), 4);
  ASSERT_FALSE(m.validation_trace.empty());
  double best = m.validation_trace[0];
  std::size_t at = 1;
  for (std::size_t k = 0; k < m.validation_trace.size(); ++k)
    if (m.validation_trace[k] < best) {
      best = m.validation_trace[k];
      at = k + 1;
    }
  EXPECT_EQ(m.best_epoch, at);
  EXPECT_DOUBLE_EQ(m.best_validation, best);
  EXPECT_NEAR(validation_brr(kullback_leibler(), m, val), best, 1e-12);
  // Stopped by patience or by the epoch cap.
  EXPECT_TRUE(m.epochs_run == m.best_epoch + small_spec().patience || m.epochs_run == small_spec().max_epochs);
}

TEST(Mlp, LearnsShiftedGaussianRatio) {
  // log ratio of N(mu, I) over N(0, I) is mu.x - |mu|^2 / 2: linear.
  auto train = shifted_pair(1000, 0.5, 21), val = shifted_pair(300, 0.5, 31);
  auto spec = small_spec();
  spec.max_epochs = 200;
  spec.learning_rate = 3e-3;
  auto m = fit_mlp(train, val, negative_binomial(), spec, 2);
  FeatureMatrix q = FeatureMatrix::from_rows({{0, 0}, {1, 1}, {-1, 0.5}});
  auto f = m.log_ratio(q);
  for (std::size_t i = 0; i < 3; ++i) {
    const double truth = 0.5 * (q(i, 0) + q(i, 1)) - 0.25;
    EXPECT_NEAR(f[i], truth, 0.3);
  }
}

TEST(Mlp, WeightingModesBothTrain) {
  auto train = shifted_pair(200, 0.7, 1), val = shifted_pair(80, 0.7, 5);
  MlpFitOptions opt;
  opt.weighting = BatchWeighting::Proportional;
  auto m = fit_mlp(train, val, negative_binomial(), small_spec(), 4, opt);
  EXPECT_TRUE(std::isfinite(m.best_validation));
  EXPECT_LT(m.best_validation, m.validation_trace.front() + 1e-12);
}

TEST(Mlp, TrainTimeResamplingRunsAndValidates) {
  auto train = shifted_pair(120, 0.0, 7), val = shifted_pair(60, 0.0, 8);
  MlpFitOptions opt;
  opt.train_time = TrainTimeSpec{SamplingKind::TrainTimeDerange, 0};
  auto m = fit_mlp(train, val, negative_binomial(), small_spec(), 4, opt);
  EXPECT_GT(m.epochs_run, 0u);
  opt.train_time = TrainTimeSpec{SamplingKind::MPermutation, 0};
  EXPECT_THROW(fit_mlp(train, val, negative_binomial(), small_spec(), 4, opt), ValidationError);
}

TEST(Mlp, GridOrderAndValidation) {
  auto g = mlp_grid();
  ASSERT_EQ(g.size(), 4u);
  EXPECT_EQ(g[0].depth, 2u);
  EXPECT_EQ(g[0].width, 20u);
  EXPECT_EQ(g[3].depth, 3u);
  EXPECT_EQ(g[3].width, 50u);
  MlpSpec bad;
  bad.learning_rate = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Mlp, SearchSelectsLowestValidation) {
  auto train = shifted_pair(150, 0.7, 1), val = shifted_pair(60, 0.7, 5);
  std::vector<MlpSpec> grid{small_spec(), small_spec()};
  grid[1].width = 3;
  auto r = hyperparameter_search_mlp(grid, train, val, itakura_saito(), 3);
  EXPECT_DOUBLE_EQ(r.score, std::min(r.scores[0], r.scores[1]));
}
