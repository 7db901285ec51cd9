#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "brr/augmentation.hpp"
#include "brr/core.hpp"
#include "brr/divergences.hpp"
#include "brr/error.hpp"
#include "brr/random.hpp"
#include "brr/search.hpp"

namespace brr {

// ---------------------------------------------------------------------------
// Kernel density estimation

/// Scott's rule per dimension: n^(-1/(d+4)) * sample standard deviation.
/// Dimensions with zero spread (or a single point) use unit scale.
inline std::vector<double> scott_bandwidths(const FeatureMatrix& x) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n == 0) throw StructuralError("scott_bandwidths: no data");
  const double factor = std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(d) + 4.0));
  std::vector<double> h(d, factor);
  if (n < 2) return h;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x(i, j);
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (x(i, j) - mean) * (x(i, j) - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    h[j] = factor * (sd > 0.0 ? sd : 1.0);
  }
  return h;
}

/// Gaussian product-kernel density estimate (1/n) sum_i prod_j N(x_j; x_ij, h_j^2).
class GaussianKde {
 public:
  GaussianKde() = default;
  explicit GaussianKde(FeatureMatrix points) : GaussianKde(points, scott_bandwidths(points)) {}
  GaussianKde(FeatureMatrix points, std::vector<double> bandwidths)
      : points_(std::move(points)), h_(std::move(bandwidths)) {
    if (points_.empty()) throw StructuralError("GaussianKde: no training points");
    if (h_.size() != points_.cols()) throw StructuralError("GaussianKde: bandwidth count != dimension");
    log_norm_ = -std::log(static_cast<double>(points_.rows())) -
                0.5 * static_cast<double>(h_.size()) * std::log(2.0 * 3.14159265358979323846);
    inv_h_.resize(h_.size());
    for (std::size_t j = 0; j < h_.size(); ++j) {
      if (!(h_[j] > 0.0)) throw ValidationError("GaussianKde: bandwidths must be positive");
      inv_h_[j] = 1.0 / h_[j];
      log_norm_ -= std::log(h_[j]);
    }
    // Pre-scale the points so evaluation is a plain squared distance.
    scaled_ = points_;
    for (std::size_t i = 0; i < scaled_.rows(); ++i)
      for (std::size_t j = 0; j < scaled_.cols(); ++j) scaled_(i, j) *= inv_h_[j];
  }

  std::size_t dim() const { return h_.size(); }
  const std::vector<double>& bandwidths() const { return h_; }

  double log_density(std::span<const double> x) const {
    const std::size_t d = h_.size();
    double q[64];
    std::vector<double> qbuf;
    double* z = q;
    if (d > 64) {
      qbuf.resize(d);
      z = qbuf.data();
    }
    for (std::size_t j = 0; j < d; ++j) z[j] = x[j] * inv_h_[j];
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double>& e = scratch();
    e.resize(scaled_.rows());
    for (std::size_t i = 0; i < scaled_.rows(); ++i) {
      const double* p = scaled_.row(i).data();
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double t = z[j] - p[j];
        s += t * t;
      }
      e[i] = -0.5 * s;
      best = std::max(best, e[i]);
    }
    double acc = 0.0;
    for (double v : e) acc += std::exp(v - best);
    return log_norm_ + best + std::log(acc);
  }

  double density(std::span<const double> x) const { return std::exp(log_density(x)); }

 private:
  static std::vector<double>& scratch() {
    thread_local std::vector<double> buf;
    return buf;
  }

  FeatureMatrix points_;
  FeatureMatrix scaled_;
  std::vector<double> h_;
  std::vector<double> inv_h_;
  double log_norm_ = 0.0;
};

struct KdeParams {
  double shift = 0.1;
  std::size_t treatment_col = 0;
};

/// Nadaraya-Watson style ratio of kernel density estimates:
///   ASE: p_X(a - shift, w) / p_X(a, w)
///   SW : p_A(a) p_W(w) / p_X(a, w)
/// Denominator densities below 1e-300 are clipped and counted.
class KdeRatioModel : public RatioModel {
 public:
  static constexpr double kDensityFloor = 1e-300;

  KdeRatioModel(const FeatureMatrix& train, Estimand estimand, KdeParams params)
      : estimand_(estimand), params_(params) {
    if (estimand == Estimand::APE) throw ValidationError("kde_ratio: only ASE and SW are supported");
    if (params.treatment_col >= train.cols()) throw StructuralError("kde_ratio: treatment column out of range");
    joint_ = GaussianKde(train);
    if (estimand == Estimand::SW) {
      std::vector<std::size_t> a_col{params.treatment_col};
      treatment_ = GaussianKde(train.select_cols(a_col));
      if (train.cols() > 1) covariates_ = GaussianKde(train.drop_col(params.treatment_col));
    }
  }

  KdeRatioModel(const KdeRatioModel& o)
      : estimand_(o.estimand_), params_(o.params_), joint_(o.joint_), treatment_(o.treatment_),
        covariates_(o.covariates_), clipped_(o.clipped_.load()) {}

  std::vector<double> predict(const FeatureMatrix& x) const override {
    std::vector<double> out(x.rows());
    const double log_floor = std::log(kDensityFloor);
    std::vector<double> shifted(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = x.row(i);
      double log_den = joint_.log_density(row);
      if (log_den < log_floor) {
        log_den = log_floor;
        clipped_.fetch_add(1, std::memory_order_relaxed);
      }
      double log_num;
      if (estimand_ == Estimand::ASE) {
        std::copy(row.begin(), row.end(), shifted.begin());
        shifted[params_.treatment_col] -= params_.shift;
        log_num = joint_.log_density(shifted);
      } else {
        const double a = row[params_.treatment_col];
        log_num = treatment_.log_density(std::span<const double>(&a, 1));
        if (x.cols() > 1) {
          std::size_t k = 0;
          for (std::size_t j = 0; j < x.cols(); ++j)
            if (j != params_.treatment_col) shifted[k++] = row[j];
          log_num += covariates_.log_density(std::span<const double>(shifted.data(), k));
        }
      }
      out[i] = std::exp(log_num - log_den);
    }
    return out;
  }

  std::size_t clipped_count() const { return clipped_.load(); }
  const GaussianKde& joint() const { return joint_; }

 private:
  Estimand estimand_;
  KdeParams params_;
  GaussianKde joint_;
  GaussianKde treatment_;
  GaussianKde covariates_;
  mutable std::atomic<std::size_t> clipped_{0};
};

inline KdeRatioModel kde_ratio(const FeatureMatrix& train, Estimand estimand, KdeParams params = {}) {
  return KdeRatioModel(train, estimand, params);
}

// ---------------------------------------------------------------------------
// Sieve models: alpha(x) = sum_k theta_k exp(-|x - c_k|^2 / (2 sigma^2))

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMatrix> as_eigen(const FeatureMatrix& x) {
  return {x.values().data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols())};
}

/// Gaussian kernel matrix K_ik = exp(-|x_i - c_k|^2 / (2 sigma^2)).
inline Eigen::MatrixXd gaussian_kernel_matrix(const FeatureMatrix& x, const FeatureMatrix& centers, double bandwidth) {
  if (x.cols() != centers.cols()) throw StructuralError("gaussian_kernel_matrix: dimension mismatch");
  auto X = as_eigen(x);
  auto C = as_eigen(centers);
  Eigen::VectorXd xn = X.rowwise().squaredNorm();
  Eigen::VectorXd cn = C.rowwise().squaredNorm();
  Eigen::MatrixXd K = -2.0 * (X * C.transpose());
  K.colwise() += xn;
  K.rowwise() += cn.transpose();
  const double scale = -0.5 / (bandwidth * bandwidth);
  return (K.cwiseMax(0.0) * scale).array().exp().matrix();
}

struct SieveParams {
  std::size_t basis = 100;
  double bandwidth = 1.0;
  double lambda = 0.0;  // uLSIF ridge; ignored by KLIEP
};

class SieveModel : public RatioModel {
 public:
  SieveModel() = default;
  SieveModel(FeatureMatrix centers, std::vector<double> theta, double bandwidth)
      : centers_(std::move(centers)), theta_(std::move(theta)), bandwidth_(bandwidth) {
    if (theta_.size() != centers_.rows()) throw StructuralError("SieveModel: theta length != center count");
    if (!(bandwidth_ > 0.0)) throw ValidationError("SieveModel: bandwidth must be positive");
    for (double t : theta_)
      if (!(t >= 0.0)) throw ValidationError("SieveModel: coefficients must be nonnegative");
  }

  std::vector<double> predict(const FeatureMatrix& x) const override {
    Eigen::MatrixXd K = gaussian_kernel_matrix(x, centers_, bandwidth_);
    Eigen::Map<const Eigen::VectorXd> th(theta_.data(), static_cast<Eigen::Index>(theta_.size()));
    Eigen::VectorXd a = K * th;
    return {a.data(), a.data() + a.size()};
  }

  const FeatureMatrix& centers() const { return centers_; }
  const std::vector<double>& theta() const { return theta_; }
  double bandwidth() const { return bandwidth_; }

  // Fit diagnostics.
  bool basis_capped = false;     // requested basis exceeded the numerator count
  double lambda_used = 0.0;      // uLSIF ridge after singular-system escalation
  std::size_t iterations = 0;    // KLIEP accepted iterations
  std::size_t restarts = 0;      // KLIEP restarts after an all-zero projection
  std::vector<double> objective_trace;  // KLIEP objective after each accepted iteration

 private:
  FeatureMatrix centers_;
  std::vector<double> theta_;
  double bandwidth_ = 1.0;
};

namespace detail {

struct SieveSetup {
  FeatureMatrix centers;
  Eigen::MatrixXd K;     // all rows x centers
  bool capped = false;
};

inline SieveSetup sieve_setup(const WeightedSamples& data, const SieveParams& p, std::uint64_t seed) {
  if (p.basis == 0) throw ValidationError("sieve: basis dimension must be positive");
  if (!(p.bandwidth > 0.0)) throw ValidationError("sieve: bandwidth must be positive");
  std::vector<std::size_t> numerator_rows;
  for (std::size_t i = 0; i < data.rows(); ++i)
    if (data.delta()[i]) numerator_rows.push_back(i);
  if (numerator_rows.empty() || data.count(0) == 0)
    throw StructuralError("sieve: need numerator and denominator rows");
  SieveSetup s;
  std::size_t b = p.basis;
  if (b > numerator_rows.size()) {
    b = numerator_rows.size();
    s.capped = true;
  }
  Rng rng(seed);
  auto pick = rng.sample_without_replacement(numerator_rows.size(), b);
  std::vector<std::size_t> rows(b);
  for (std::size_t k = 0; k < b; ++k) rows[k] = numerator_rows[pick[k]];
  s.centers = data.features().select_rows(rows);
  s.K = gaussian_kernel_matrix(data.features(), s.centers, p.bandwidth);
  return s;
}

}  // namespace detail

/// Unconstrained least-squares fit: solves (H + lambda I) theta = h with
///   H = sum_{delta=0} 2 omega_i k_i k_i^T,   h = sum_{delta=1} 2 omega_i k_i.
/// Returns the raw (pre-clipping) coefficients and the ridge actually used.
struct UlsifSolution {
  Eigen::VectorXd theta;
  double lambda = 0.0;
};

inline UlsifSolution ulsif_solve(const Eigen::MatrixXd& K, const WeightedSamples& data, double lambda) {
  Eigen::VectorXd w0 = Eigen::VectorXd::Zero(K.rows());
  Eigen::VectorXd w1 = Eigen::VectorXd::Zero(K.rows());
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const double w = 2.0 * data.omega()[i];
    (data.delta()[i] ? w1 : w0)(static_cast<Eigen::Index>(i)) = w;
  }
  Eigen::MatrixXd H = K.transpose() * w0.asDiagonal() * K;
  Eigen::VectorXd h = K.transpose() * w1;
  if (lambda < 0.0) throw ValidationError("ulsif: lambda must be >= 0");
  double lam = lambda;
  for (int attempt = 0; attempt <= 3; ++attempt) {
    Eigen::MatrixXd A = H;
    A.diagonal().array() += lam;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() == Eigen::Success && llt.rcond() > 1e-13) {
      Eigen::VectorXd theta = llt.solve(h);
      if (theta.allFinite()) return {theta, lam};
    }
    lam = lam > 0.0 ? 10.0 * lam : 1e-9;
  }
  throw FitError("ulsif: linear system singular after 3 ridge increases");
}

inline SieveModel fit_ulsif(const WeightedSamples& data, const SieveParams& p, std::uint64_t seed) {
  auto s = detail::sieve_setup(data, p, seed);
  auto sol = ulsif_solve(s.K, data, p.lambda);
  Eigen::VectorXd theta = sol.theta.cwiseMax(0.0);
  Eigen::VectorXd alpha = s.K * theta;
  double mass = 0.0;
  for (std::size_t i = 0; i < data.rows(); ++i)
    if (!data.delta()[i]) mass += 2.0 * data.omega()[i] * alpha(static_cast<Eigen::Index>(i));
  if (!(mass > 1e-300) || !std::isfinite(mass))
    throw FitError("ulsif: all coefficients vanish after clipping; cannot rescale");
  theta /= mass;
  SieveModel m(std::move(s.centers), {theta.data(), theta.data() + theta.size()}, p.bandwidth);
  m.basis_capped = s.capped;
  m.lambda_used = sol.lambda;
  return m;
}

struct KliepOptions {
  std::size_t max_iterations = 5000;
  double tolerance = 1e-6;  // stop when max |theta change| / max theta falls below this
  double initial_step = 1.0;
  std::size_t max_restarts = 3;
};

/// Maximizes sum_{delta=1} 2 omega_i log alpha(x_i) subject to
/// sum_{delta=0} 2 omega_i alpha(x_i) = 1 and theta >= 0 by projected gradient
/// ascent. Each step is projected onto the feasible set and accepted only if the
/// objective does not decrease; otherwise the step halves.
inline SieveModel fit_kliep(const WeightedSamples& data, const SieveParams& p, std::uint64_t seed,
                            const KliepOptions& opt = {}) {
  auto s = detail::sieve_setup(data, p, seed);
  const Eigen::Index b = s.K.cols();
  std::vector<Eigen::Index> num, den;
  for (std::size_t i = 0; i < data.rows(); ++i) (data.delta()[i] ? num : den).push_back(static_cast<Eigen::Index>(i));
  Eigen::MatrixXd A(static_cast<Eigen::Index>(num.size()), b);
  Eigen::VectorXd u(static_cast<Eigen::Index>(num.size()));
  for (std::size_t r = 0; r < num.size(); ++r) {
    A.row(static_cast<Eigen::Index>(r)) = s.K.row(num[r]);
    u(static_cast<Eigen::Index>(r)) = 2.0 * data.omega()[static_cast<std::size_t>(num[r])];
  }
  Eigen::VectorXd bvec = Eigen::VectorXd::Zero(b);
  for (auto i : den) bvec += 2.0 * data.omega()[static_cast<std::size_t>(i)] * s.K.row(i).transpose();

  // Euclidean projection onto {theta >= 0, b.theta = 1}: theta = max(0, v - mu b)
  // with mu found by bisection.
  auto project = [&](const Eigen::VectorXd& v) -> std::optional<Eigen::VectorXd> {
    if (!v.allFinite() || !(bvec.maxCoeff() > 0.0)) return std::nullopt;
    auto mass = [&](double mu) { return bvec.dot((v - mu * bvec).cwiseMax(0.0)); };
    double hi = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < b; ++k)
      if (bvec(k) > 0.0) hi = std::max(hi, v(k) / bvec(k));
    double width = 1.0, lo = hi - width;
    while (mass(lo) < 1.0) {
      width *= 2.0;
      lo = hi - width;
      if (!std::isfinite(lo)) return std::nullopt;
    }
    for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(hi)); ++it) {
      const double mid = 0.5 * (lo + hi);
      (mass(mid) >= 1.0 ? lo : hi) = mid;
    }
    Eigen::VectorXd t = (v - lo * bvec).cwiseMax(0.0);
    const double m = bvec.dot(t);
    if (!(m > 0.0)) return std::nullopt;
    return t / m;
  };
  auto objective = [&](const Eigen::VectorXd& t) {
    Eigen::VectorXd a = A * t;
    double j = 0.0;
    for (Eigen::Index r = 0; r < a.size(); ++r) {
      if (!(a(r) > 0.0)) return -std::numeric_limits<double>::infinity();
      j += u(r) * std::log(a(r));
    }
    return j;
  };

  double step = opt.initial_step;
  for (std::size_t restart = 0; restart <= opt.max_restarts; ++restart) {
    auto start = project(Eigen::VectorXd::Ones(b));
    if (!start) throw FitError("kliep: kernel mass on denominator rows is zero");
    Eigen::VectorXd theta = *start;
    double value = objective(theta);
    std::vector<double> trace{value};
    std::size_t accepted = 0;
    bool zeroed = false;
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
      Eigen::VectorXd a = A * theta;
      Eigen::VectorXd grad = A.transpose() * u.cwiseQuotient(a);
      bool moved = false;
      while (step > 1e-14) {
        auto cand = project(theta + step * grad);
        if (!cand) {
          zeroed = true;
          break;
        }
        const double v = objective(*cand);
        if (v >= value) {
          const double change =
              (*cand - theta).cwiseAbs().maxCoeff() / std::max(theta.cwiseAbs().maxCoeff(), 1e-300);
          theta = std::move(*cand);
          value = v;
          trace.push_back(v);
          ++accepted;
          step *= 1.5;
          moved = true;
          if (change < opt.tolerance) it = opt.max_iterations;
          break;
        }
        step *= 0.5;
      }
      if (zeroed || !moved) break;
    }
    if (zeroed) {
      step = opt.initial_step * std::pow(0.1, static_cast<double>(restart + 1));
      continue;
    }
    SieveModel m(std::move(s.centers), {theta.data(), theta.data() + theta.size()}, p.bandwidth);
    m.basis_capped = s.capped;
    m.iterations = accepted;
    m.restarts = restart;
    m.objective_trace = std::move(trace);
    return m;
  }
  throw FitError("kliep: coefficients projected to zero after all restarts");
}

// ---------------------------------------------------------------------------
// Hyperparameter search

/// Grid ordered by basis, then bandwidth, then lambda (ascending); the search
/// keeps the first of equally scored candidates.
inline std::vector<SieveParams> ulsif_grid() {
  std::vector<SieveParams> g;
  for (std::size_t b : {100u, 200u, 500u})
    for (double s : {1.0, 2.0, 5.0, 10.0})
      for (double l : {0.0, 0.1, 0.5, 1.0}) g.push_back({b, s, l});
  return g;
}

inline std::vector<SieveParams> kliep_grid() {
  std::vector<SieveParams> g;
  for (std::size_t b : {100u, 200u, 500u})
    for (double s : {1.0, 2.0, 5.0, 10.0}) g.push_back({b, s, 0.0});
  return g;
}

enum class SieveMethod { ULSIF, KLIEP };

inline SearchResult<SieveParams, SieveModel> hyperparameter_search(SieveMethod method, std::span<const SieveParams> grid,
                                                                   const WeightedSamples& train,
                                                                   const WeightedSamples& validation,
                                                                   std::uint64_t seed, const KliepOptions& kopt = {}) {
  const GeneratingFunction F = method == SieveMethod::ULSIF ? least_squares() : kullback_leibler();
  return grid_search(
      grid,
      [&](const SieveParams& p) {
        return method == SieveMethod::ULSIF ? fit_ulsif(train, p, seed) : fit_kliep(train, p, seed, kopt);
      },
      [&](const SieveModel& m) { return validation_brr(F, m, validation); });
}

}  // namespace brr
