#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "brr/core.hpp"
#include "brr/divergences.hpp"
#include "brr/error.hpp"
#include "brr/gbm.hpp"
#include "brr/mlp.hpp"

namespace brr {

/// Importance-weighted estimate mean(y_i alpha_i).
inline double iw_estimate(std::span<const double> alpha, std::span<const double> y) {
  if (alpha.size() != y.size()) throw StructuralError("iw_estimate: length mismatch");
  if (y.empty()) throw StructuralError("iw_estimate: empty sample");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * alpha[i];
  return s / static_cast<double>(y.size());
}

struct Metrics {
  double abs_bias = 0.0;  // |mean(y (alpha_hat - alpha0))|
  double mae = 0.0;       // mean |alpha_hat - alpha0|
  double rmse = 0.0;      // sqrt(mean (alpha_hat - alpha0)^2)
};

/// Oracle-referenced metrics. Checks the Hoelder bounds
///   MAE <= RMSE,  bias <= max|y| MAE,  bias <= ||y||_2 RMSE
/// (empirical norms) and throws if one fails beyond rounding.
inline Metrics compute_metrics(std::span<const double> alpha_hat, std::span<const double> alpha0,
                               std::span<const double> y) {
  if (alpha_hat.size() != alpha0.size() || alpha0.size() != y.size())
    throw StructuralError("metrics: length mismatch");
  if (y.empty()) throw StructuralError("metrics: empty sample");
  const double n = static_cast<double>(y.size());
  double bias = 0.0, abs_sum = 0.0, sq_sum = 0.0, y_sup = 0.0, y_sq = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = alpha_hat[i] - alpha0[i];
    bias += y[i] * e;
    abs_sum += std::abs(e);
    sq_sum += e * e;
    y_sup = std::max(y_sup, std::abs(y[i]));
    y_sq += y[i] * y[i];
  }
  Metrics m{std::abs(bias / n), abs_sum / n, std::sqrt(sq_sum / n)};
  const double slack = 1e-9;
  auto within = [&](double lhs, double rhs) { return lhs <= rhs * (1.0 + slack) + 1e-300; };
  if (!within(m.mae, m.rmse)) throw Error("metrics: MAE exceeds RMSE");
  if (!within(m.abs_bias, y_sup * m.mae)) throw Error("metrics: bias exceeds sup|y| * MAE");
  if (!within(m.abs_bias, std::sqrt(y_sq / n) * m.rmse)) throw Error("metrics: bias exceeds ||y||_2 * RMSE");
  return m;
}

/// Lower median: the floor((n - 1) / 2)-th order statistic.
inline double lower_median(std::vector<double> v) {
  if (v.empty()) throw ValidationError("lower_median: empty input");
  const auto k = static_cast<std::ptrdiff_t>((v.size() - 1) / 2);
  std::nth_element(v.begin(), v.begin() + k, v.end());
  return v[static_cast<std::size_t>(k)];
}

struct MetricsReport {
  std::string learner;
  std::string divergence;
  std::string scheme;
  std::size_t m = 1;
  std::size_t replicate = 0;
  Metrics metrics;
  double runtime_seconds = 0.0;
  bool failed = false;
  std::string failure;
  std::string note;  // non-fatal diagnostics; not written to CSV
};

// ---------------------------------------------------------------------------
// CSV row schema

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{"learner", "divergence", "scheme",    "m",
                                             "replicate", "abs_bias", "mae", "rmse", "runtime_seconds"};
  return cols;
}

/// Shortest round-trip decimal form; independent of the C++ locale.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline constexpr const char* kFailedMarker = "FAILED";

inline std::string csv_header() {
  std::string s;
  for (std::size_t i = 0; i < csv_columns().size(); ++i) s += (i ? "," : "") + csv_columns()[i];
  return s;
}

inline std::string to_csv_row(const MetricsReport& r) {
  std::string s = r.learner + "," + r.divergence + "," + r.scheme + "," + std::to_string(r.m) + "," +
                  std::to_string(r.replicate) + ",";
  if (r.failed) {
    s += std::string(kFailedMarker) + "," + kFailedMarker + "," + kFailedMarker;
  } else {
    s += format_double(r.metrics.abs_bias) + "," + format_double(r.metrics.mae) + "," + format_double(r.metrics.rmse);
  }
  s += "," + format_double(r.runtime_seconds);
  return s;
}

// ---------------------------------------------------------------------------
// Propensity-score baselines

enum class PropensityLearner { MLP, GBM };

/// alpha(a, w) = a / q(w) with q = P(A = 1 | W) from a classifier returning
/// logits; q is clipped to [1e-6, 1 - 1e-6].
class PropensityRatio : public RatioModel {
 public:
  static constexpr double kClip = 1e-6;
  using LogitFn = std::function<std::vector<double>(const FeatureMatrix&)>;

  PropensityRatio(LogitFn logit, std::size_t treatment_col) : logit_(std::move(logit)), col_(treatment_col) {}

  std::vector<double> propensity(const FeatureMatrix& w) const {
    auto q = logit_(w);
    for (double& v : q) v = std::clamp(detail::logistic(v), kClip, 1.0 - kClip);
    return q;
  }

  std::vector<double> predict(const FeatureMatrix& x) const override {
    auto q = propensity(x.drop_col(col_));
    for (std::size_t i = 0; i < x.rows(); ++i) q[i] = x(i, col_) / q[i];
    return q;
  }

 private:
  LogitFn logit_;
  std::size_t col_;
};

/// Cross-entropy classification samples: features W, label A, weight 1/(2n).
/// With these weights the negative-binomial risk at alpha = q / (1 - q) is the
/// mean binary cross-entropy.
inline WeightedSamples classification_samples(const FeatureMatrix& data, std::size_t treatment_col) {
  std::vector<std::uint8_t> label(data.rows());
  std::size_t ones = 0;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const double a = data(i, treatment_col);
    if (a != 0.0 && a != 1.0) throw ValidationError("propensity_baseline: treatment must be binary");
    label[i] = static_cast<std::uint8_t>(a);
    ones += label[i];
  }
  if (ones == 0 || ones == data.rows()) throw DegenerateOverlapError("propensity_baseline: labels are all equal");
  std::vector<double> w(data.rows(), 1.0 / (2.0 * static_cast<double>(data.rows())));
  return WeightedSamples(data.drop_col(treatment_col), std::move(label), std::move(w));
}

struct PropensityOptions {
  std::vector<MlpSpec> mlp_grid = brr::mlp_grid();
  std::vector<GbmSpec> gbm_grid = brr::gbm_grid();
};

inline PropensityRatio propensity_baseline(const FeatureMatrix& train, const FeatureMatrix& validation,
                                           std::size_t treatment_col, PropensityLearner kind, std::uint64_t seed,
                                           const PropensityOptions& opt = {}) {
  const WeightedSamples tr = classification_samples(train, treatment_col);
  const WeightedSamples va = classification_samples(validation, treatment_col);
  const GeneratingFunction nb = negative_binomial();
  if (kind == PropensityLearner::MLP) {
    MlpFitOptions fo;
    fo.weighting = BatchWeighting::Proportional;
    auto best = hyperparameter_search_mlp(opt.mlp_grid, tr, va, nb, seed, fo);
    auto model = std::make_shared<MlpModel>(std::move(best.model));
    return PropensityRatio([model](const FeatureMatrix& w) { return model->log_ratio(w); }, treatment_col);
  }
  // Boosting starts from the logit of the base rate.
  const double p = static_cast<double>(tr.count(1)) / static_cast<double>(tr.rows());
  GbmFitOptions fo;
  fo.init_score = std::log(p / (1.0 - p));
  auto best = hyperparameter_search_gbm(opt.gbm_grid, tr, va, nb, seed, fo);
  auto model = std::make_shared<GbmModel>(std::move(best.model));
  return PropensityRatio([model](const FeatureMatrix& w) { return model->log_ratio(w); }, treatment_col);
}

}  // namespace brr
