#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "brr/augmentation.hpp"
#include "brr/core.hpp"
#include "brr/divergences.hpp"
#include "brr/error.hpp"
#include "brr/random.hpp"
#include "brr/search.hpp"

namespace brr {

struct MlpSpec {
  std::size_t depth = 2;  // hidden layers
  std::size_t width = 20;
  std::size_t batch_size = 125;
  double learning_rate = 1e-4;
  std::size_t max_epochs = 1000;
  std::size_t patience = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (depth < 1) throw ValidationError("MlpSpec: depth must be >= 1");
    if (width < 1) throw ValidationError("MlpSpec: width must be >= 1");
    if (batch_size < 1) throw ValidationError("MlpSpec: batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("MlpSpec: learning rate must be positive");
    if (max_epochs < 1) throw ValidationError("MlpSpec: max epochs must be >= 1");
    if (patience < 1) throw ValidationError("MlpSpec: patience must be >= 1");
  }
};

/// Depth x width cells in tie-break order (smaller depth, then smaller width).
inline std::vector<MlpSpec> mlp_grid(const MlpSpec& base = {}) {
  std::vector<MlpSpec> g;
  for (std::size_t depth : {2u, 3u})
    for (std::size_t width : {20u, 50u}) {
      MlpSpec s = base;
      s.depth = depth;
      s.width = width;
      g.push_back(s);
    }
  return g;
}

namespace detail {

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double logistic(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace detail

/// Fully connected network x -> f(x) with softplus hidden units and a linear
/// scalar output; the ratio is alpha = exp(f). Parameters live in one flat
/// vector: for each layer, the weight matrix (column-major, out x in) then the bias.
class MlpModel : public RatioModel {
 public:
  struct Layer {
    Eigen::Index in = 0, out = 0, weight_offset = 0, bias_offset = 0;
  };

  MlpModel() = default;

  MlpModel(std::size_t input_dim, std::size_t depth, std::size_t width, Rng& rng) {
    if (input_dim < 1) throw ValidationError("MlpModel: input dimension must be >= 1");
    Eigen::Index offset = 0;
    Eigen::Index in = static_cast<Eigen::Index>(input_dim);
    for (std::size_t l = 0; l <= depth; ++l) {
      const Eigen::Index out = l == depth ? 1 : static_cast<Eigen::Index>(width);
      layers_.push_back({in, out, offset, offset + in * out});
      offset += in * out + out;
      in = out;
    }
    theta_.resize(offset);
    // Uniform fan-in scaling: U(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
    for (const auto& L : layers_) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(L.in));
      for (Eigen::Index k = L.weight_offset; k < L.bias_offset + L.out; ++k)
        theta_(k) = bound * (2.0 * rng.uniform() - 1.0);
    }
  }

  std::size_t input_dim() const { return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.front().in); }
  std::size_t depth() const { return layers_.empty() ? 0 : layers_.size() - 1; }
  std::size_t parameter_count() const { return static_cast<std::size_t>(theta_.size()); }
  const Eigen::VectorXd& parameters() const { return theta_; }
  void set_parameters(const Eigen::VectorXd& theta) {
    if (theta.size() != theta_.size()) throw StructuralError("MlpModel: parameter count mismatch");
    theta_ = theta;
  }
  const std::vector<Layer>& layers() const { return layers_; }

  /// f values for the columns of X (input_dim x batch).
  Eigen::RowVectorXd forward(const Eigen::Ref<const Eigen::MatrixXd>& X) const {
    Eigen::MatrixXd A = X;
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
      Eigen::MatrixXd Z = weight(l) * A;
      Z.colwise() += bias(l);
      A = Z.unaryExpr([](double z) { return detail::softplus(z); });
    }
    Eigen::RowVectorXd f = weight(layers_.size() - 1) * A;
    f.array() += bias(layers_.size() - 1)(0);
    return f;
  }

  std::vector<double> log_ratio(const FeatureMatrix& x) const {
    if (x.cols() != input_dim()) throw StructuralError("MlpModel: input dimension mismatch");
    std::vector<double> out(x.rows());
    const Eigen::Index d = static_cast<Eigen::Index>(x.cols());
    constexpr std::size_t kChunk = 4096;
    for (std::size_t start = 0; start < x.rows(); start += kChunk) {
      const std::size_t n = std::min(kChunk, x.rows() - start);
      Eigen::Map<const Eigen::MatrixXd> X(x.values().data() + start * x.cols(), d, static_cast<Eigen::Index>(n));
      Eigen::RowVectorXd f = forward(X);
      std::copy(f.data(), f.data() + f.size(), out.begin() + static_cast<std::ptrdiff_t>(start));
    }
    return out;
  }

  std::vector<double> predict(const FeatureMatrix& x) const override {
    auto f = log_ratio(x);
    for (double& v : f) v = std::exp(std::clamp(v, -700.0, 700.0));
    return f;
  }

  /// Backpropagates per-column output gradients dL/df through the network.
  /// Returns dL/dtheta in the flat parameter layout.
  Eigen::VectorXd backward(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::RowVectorXd& grad_f) const {
    std::vector<Eigen::MatrixXd> Z, A{X};
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
      Eigen::MatrixXd z = weight(l) * A.back();
      z.colwise() += bias(l);
      A.push_back(z.unaryExpr([](double v) { return detail::softplus(v); }));
      Z.push_back(std::move(z));
    }
    Eigen::VectorXd g(theta_.size());
    const std::size_t last = layers_.size() - 1;
    auto gw = [&](std::size_t l) {
      return Eigen::Map<Eigen::MatrixXd>(g.data() + layers_[l].weight_offset, layers_[l].out, layers_[l].in);
    };
    auto gb = [&](std::size_t l) { return Eigen::Map<Eigen::VectorXd>(g.data() + layers_[l].bias_offset, layers_[l].out); };
    gw(last) = grad_f * A[last].transpose();
    gb(last)(0) = grad_f.sum();
    Eigen::MatrixXd dA = weight(last).transpose() * grad_f;
    for (std::size_t l = last; l-- > 0;) {
      Eigen::MatrixXd dZ = dA.cwiseProduct(Z[l].unaryExpr([](double v) { return detail::logistic(v); }));
      gw(l) = dZ * A[l].transpose();
      gb(l) = dZ.rowwise().sum();
      if (l > 0) dA = weight(l).transpose() * dZ;
    }
    return g;
  }

  // Fit diagnostics.
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  std::vector<double> validation_trace;
  std::size_t step_halvings = 0;
  std::size_t resample_fallbacks = 0;

 private:
  Eigen::Map<const Eigen::MatrixXd> weight(std::size_t l) const {
    return {theta_.data() + layers_[l].weight_offset, layers_[l].out, layers_[l].in};
  }
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t l) const {
    return {theta_.data() + layers_[l].bias_offset, layers_[l].out};
  }

  std::vector<Layer> layers_;
  Eigen::VectorXd theta_;
};

/// How omega is rescaled inside a minibatch.
///  BalancedHalves: each delta-half of the batch carries total weight 1/2.
///  Proportional: omega rescaled so the batch carries the training set's total weight.
enum class BatchWeighting { BalancedHalves, Proportional };

struct TrainTimeSpec {
  SamplingKind kind = SamplingKind::TrainTimePermute;
  std::size_t treatment_col = 0;
};

struct MlpFitOptions {
  BatchWeighting weighting = BatchWeighting::BalancedHalves;
  std::optional<TrainTimeSpec> train_time;
};

/// Batch risk 2 sum_i w_i unit_loss_i and its gradient with respect to f,
/// with alpha = exp(f) clipped to [1e-12, 1e12].
inline double batch_risk_and_grad(const GeneratingFunction& F, const Eigen::RowVectorXd& f,
                                  std::span<const std::uint8_t> delta, std::span<const double> w,
                                  Eigen::RowVectorXd* grad_f) {
  double loss = 0.0;
  if (grad_f) grad_f->resize(f.size());
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    const std::size_t k = static_cast<std::size_t>(i);
    const double a = clip_alpha(std::exp(std::clamp(f(i), -700.0, 700.0)));
    loss += 2.0 * unit_loss(F, a, delta[k], w[k]);
    if (grad_f) (*grad_f)(i) = 2.0 * unit_gradient_logalpha(F, a, delta[k], w[k]);
  }
  return loss;
}

/// Minibatch Adam on the empirical risk with early stopping on validation risk.
/// Returns the best-validation snapshot.
inline MlpModel fit_mlp(const WeightedSamples& train, const WeightedSamples& validation, const GeneratingFunction& F,
                        const MlpSpec& spec, std::uint64_t seed, const MlpFitOptions& opt = {}) {
  spec.validate();
  if (train.rows() == 0 || validation.rows() == 0) throw StructuralError("fit_mlp: empty train or validation set");
  if (train.cols() != validation.cols()) throw StructuralError("fit_mlp: train/validation column mismatch");
  if (opt.train_time) {
    if (!is_train_time(opt.train_time->kind)) throw ValidationError("fit_mlp: train-time scheme must be a tt_* kind");
    if (opt.train_time->treatment_col >= train.cols()) throw StructuralError("fit_mlp: treatment column out of range");
  }
  Rng rng(seed);
  MlpModel model(train.cols(), spec.depth, spec.width, rng);
  const std::size_t n = train.rows();
  const std::size_t d = train.cols();
  const auto delta = train.delta();
  const auto omega = train.omega();
  double omega_total = 0.0;
  for (double w : omega) omega_total += w;

  const Eigen::Index P = static_cast<Eigen::Index>(model.parameter_count());
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(P), m2 = Eigen::VectorXd::Zero(P);
  Eigen::VectorXd theta = model.parameters();
  Eigen::VectorXd best_theta = theta;
  double lr = spec.learning_rate;
  std::size_t step = 0;
  std::size_t bad_epochs = 0;

  FeatureMatrix batch(std::min(spec.batch_size, n), d);
  std::vector<std::uint8_t> bdelta;
  std::vector<double> bw, source;
  Eigen::RowVectorXd grad_f;

  for (std::size_t epoch = 1; epoch <= spec.max_epochs; ++epoch) {
    auto perm = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += spec.batch_size) {
      const std::size_t B = std::min(spec.batch_size, n - start);
      if (batch.rows() != B) batch = FeatureMatrix(B, d);
      bdelta.resize(B);
      bw.resize(B);
      double s0 = 0.0, s1 = 0.0;
      for (std::size_t j = 0; j < B; ++j) {
        const std::size_t r = perm[start + j];
        std::copy(train.features().row(r).begin(), train.features().row(r).end(), batch.row(j).begin());
        bdelta[j] = delta[r];
        bw[j] = omega[r];
        (delta[r] ? s1 : s0) += omega[r];
      }
      if (opt.weighting == BatchWeighting::BalancedHalves) {
        for (std::size_t j = 0; j < B; ++j) {
          const double s = bdelta[j] ? s1 : s0;
          bw[j] = s > 0.0 ? bw[j] / (2.0 * s) : 0.0;
        }
      } else {
        const double s = s0 + s1;
        for (std::size_t j = 0; j < B; ++j) bw[j] = s > 0.0 ? bw[j] * omega_total / s : 0.0;
      }
      if (opt.train_time) {
        source = batch.column(opt.train_time->treatment_col);
        if (train_time_resample(batch, bdelta, source, opt.train_time->treatment_col, opt.train_time->kind, rng))
          ++model.resample_fallbacks;
      }
      Eigen::Map<const Eigen::MatrixXd> X(batch.values().data(), static_cast<Eigen::Index>(d),
                                          static_cast<Eigen::Index>(B));

      for (int attempt = 0;; ++attempt) {
        model.set_parameters(theta);
        const Eigen::RowVectorXd f = model.forward(X);
        const double loss = batch_risk_and_grad(F, f, bdelta, bw, &grad_f);
        Eigen::VectorXd g = model.backward(X, grad_f);
        Eigen::VectorXd m1n = spec.beta1 * m1 + (1.0 - spec.beta1) * g;
        Eigen::VectorXd m2n = spec.beta2 * m2 + (1.0 - spec.beta2) * g.cwiseAbs2();
        const double t = static_cast<double>(step + 1);
        const double c1 = 1.0 - std::pow(spec.beta1, t);
        const double c2 = 1.0 - std::pow(spec.beta2, t);
        Eigen::VectorXd next =
            theta - lr * ((m1n / c1).array() / ((m2n / c2).array().sqrt() + spec.epsilon)).matrix();
        if (std::isfinite(loss) && next.allFinite()) {
          theta = std::move(next);
          m1 = std::move(m1n);
          m2 = std::move(m2n);
          ++step;
          break;
        }
        if (attempt >= 5)
          throw FitError("fit_mlp: non-finite loss persists after 5 step halvings (epoch " + std::to_string(epoch) +
                         ")");
        lr *= 0.5;
        ++model.step_halvings;
      }
    }
    model.set_parameters(theta);
    const double val = validation_brr(F, model.predict(validation.features()), validation);
    model.validation_trace.push_back(val);
    model.epochs_run = epoch;
    if (!std::isfinite(val)) throw FitError("fit_mlp: validation risk is not finite");
    if (val < model.best_validation) {
      model.best_validation = val;
      model.best_epoch = epoch;
      best_theta = theta;
      bad_epochs = 0;
    } else if (++bad_epochs >= spec.patience) {
      break;
    }
  }
  model.set_parameters(best_theta);
  return model;
}

inline SearchResult<MlpSpec, MlpModel> hyperparameter_search_mlp(std::span<const MlpSpec> grid,
                                                                 const WeightedSamples& train,
                                                                 const WeightedSamples& validation,
                                                                 const GeneratingFunction& F, std::uint64_t seed,
                                                                 const MlpFitOptions& opt = {}) {
  return grid_search(
      grid, [&](const MlpSpec& s) { return fit_mlp(train, validation, F, s, seed, opt); },
      [](const MlpModel& m) { return m.best_validation; });
}

}  // namespace brr
