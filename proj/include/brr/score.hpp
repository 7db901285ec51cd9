#pragma once

#include <cmath>
#include <functional>
#include <string>

#include <Eigen/Dense>

#include "brr/core.hpp"
#include "brr/error.hpp"

namespace brr {

/// Vector field x -> alpha(x) in R^d with the trace of its Jacobian, either
/// analytic or by central differences with step h.
class VectorModel {
 public:
  using Field = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
  using Trace = std::function<double(const Eigen::VectorXd&)>;

  VectorModel(std::size_t dim, Field field, Trace trace = {}, double step = 1e-4)
      : dim_(dim), field_(std::move(field)), trace_(std::move(trace)), step_(step) {
    if (!field_) throw ValidationError("VectorModel: missing field");
    if (!(step_ > 0.0)) throw ValidationError("VectorModel: finite-difference step must be positive");
  }

  std::size_t dim() const { return dim_; }
  bool has_analytic_trace() const { return static_cast<bool>(trace_); }

  Eigen::VectorXd evaluate(const Eigen::VectorXd& x) const { return field_(x); }

  double jacobian_trace(const Eigen::VectorXd& x) const { return trace_ ? trace_(x) : finite_difference_trace(x, step_); }

  double finite_difference_trace(const Eigen::VectorXd& x, double h) const {
    double t = 0.0;
    Eigen::VectorXd xp = x, xm = x;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      xp(j) = x(j) + h;
      xm(j) = x(j) - h;
      t += (field_(xp)(j) - field_(xm)(j)) / (2.0 * h);
      xp(j) = xm(j) = x(j);
    }
    return t;
  }

 private:
  std::size_t dim_;
  Field field_;
  Trace trace_;
  double step_;
};

/// Mean over samples of |alpha(x)|^2 + 2 tr(grad alpha(x)).
inline double score_matching_risk(const VectorModel& model, const FeatureMatrix& samples) {
  if (samples.rows() == 0) throw StructuralError("score_matching_risk: no samples");
  if (samples.cols() != model.dim()) throw StructuralError("score_matching_risk: dimension mismatch");
  double total = 0.0;
  Eigen::VectorXd x(static_cast<Eigen::Index>(samples.cols()));
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    for (std::size_t j = 0; j < samples.cols(); ++j) x(static_cast<Eigen::Index>(j)) = samples(i, j);
    const double tr = model.jacobian_trace(x);
    if (!std::isfinite(tr)) throw DomainError("score_matching_risk: non-finite Jacobian trace at row " + std::to_string(i));
    const Eigen::VectorXd a = model.evaluate(x);
    total += a.squaredNorm() + 2.0 * tr;
  }
  return total / static_cast<double>(samples.rows());
}

/// alpha(x) = B x + b.
struct LinearScore {
  Eigen::MatrixXd B;
  Eigen::VectorXd b;

  VectorModel model() const {
    const Eigen::MatrixXd Bc = B;
    const Eigen::VectorXd bc = b;
    const double tr = B.trace();
    return VectorModel(
        static_cast<std::size_t>(B.rows()), [Bc, bc](const Eigen::VectorXd& x) -> Eigen::VectorXd { return Bc * x + bc; },
        [tr](const Eigen::VectorXd&) { return tr; });
  }
};

/// Minimizes the empirical risk over the linear family. With z = (x, 1) and
/// M = mean z z^T the minimizer of tr(T M T^T) + 2 tr(B) over T = [B b] is
/// T = -(first d rows of M^{-1}).
inline LinearScore fit_linear_score(const FeatureMatrix& samples) {
  const std::size_t n = samples.rows(), d = samples.cols();
  if (d == 0) throw StructuralError("fit_linear_score: zero dimension");
  if (n <= d) throw ValidationError("fit_linear_score: need more samples than dimensions");
  const Eigen::Index D = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(D + 1, D + 1);
  Eigen::VectorXd z(D + 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) z(static_cast<Eigen::Index>(j)) = samples(i, j);
    z(D) = 1.0;
    M.noalias() += z * z.transpose();
  }
  M /= static_cast<double>(n);
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  if (llt.info() != Eigen::Success || llt.rcond() < 1e-12)
    throw FitError("fit_linear_score: singular second-moment matrix");
  const Eigen::MatrixXd Minv = llt.solve(Eigen::MatrixXd::Identity(D + 1, D + 1));
  LinearScore out;
  out.B = -Minv.topLeftCorner(D, D);
  out.b = -Minv.topRightCorner(D, 1);
  return out;
}

}  // namespace brr
