#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "brr/error.hpp"
#include "brr/random.hpp"

namespace brr {

/// Dense row-major matrix of observations; row i is x_i, columns are the
/// coordinates of X = (A, W).
class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  FeatureMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}

  FeatureMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_)
      throw StructuralError("FeatureMatrix: value count " + std::to_string(values_.size()) + " != rows*cols");
    for (double v : values_)
      if (!std::isfinite(v)) throw ValidationError("FeatureMatrix: non-finite value");
  }

  static FeatureMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    const std::size_t c = rows.front().size();
    std::vector<double> v;
    v.reserve(rows.size() * c);
    for (const auto& r : rows) {
      if (r.size() != c) throw StructuralError("FeatureMatrix::from_rows: ragged rows");
      v.insert(v.end(), r.begin(), r.end());
    }
    return FeatureMatrix(rows.size(), c, std::move(v));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }

  const std::vector<double>& values() const { return values_; }

  std::vector<double> column(std::size_t c) const {
    check_col(c);
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  void set_column(std::size_t c, std::span<const double> v) {
    check_col(c);
    if (v.size() != rows_) throw StructuralError("set_column: length mismatch");
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
  }

  FeatureMatrix select_rows(std::span<const std::size_t> idx) const {
    FeatureMatrix out(idx.size(), cols_);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= rows_) throw StructuralError("select_rows: index out of range");
      std::copy_n(values_.data() + idx[k] * cols_, cols_, out.values_.data() + k * cols_);
    }
    return out;
  }

  FeatureMatrix select_cols(std::span<const std::size_t> idx) const {
    for (auto c : idx) check_col(c);
    FeatureMatrix out(rows_, idx.size());
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t k = 0; k < idx.size(); ++k) out(r, k) = (*this)(r, idx[k]);
    return out;
  }

  /// All columns except `c`.
  FeatureMatrix drop_col(std::size_t c) const {
    check_col(c);
    std::vector<std::size_t> keep;
    for (std::size_t k = 0; k < cols_; ++k)
      if (k != c) keep.push_back(k);
    return select_cols(keep);
  }

  static FeatureMatrix vstack(const FeatureMatrix& top, const FeatureMatrix& bottom) {
    if (top.empty()) return bottom;
    if (bottom.empty()) return top;
    if (top.cols_ != bottom.cols_) throw StructuralError("vstack: column mismatch");
    FeatureMatrix out;
    out.rows_ = top.rows_ + bottom.rows_;
    out.cols_ = top.cols_;
    out.values_ = top.values_;
    out.values_.insert(out.values_.end(), bottom.values_.begin(), bottom.values_.end());
    return out;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  void check_col(std::size_t c) const {
    if (c >= cols_) throw StructuralError("column index " + std::to_string(c) + " out of range");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

/// Rows with a source label and a normalized weight; the form every learner consumes.
class WeightedSamples {
 public:
  WeightedSamples() = default;
  WeightedSamples(FeatureMatrix features, std::vector<std::uint8_t> delta, std::vector<double> omega)
      : features_(std::move(features)), delta_(std::move(delta)), omega_(std::move(omega)) {
    if (delta_.size() != features_.rows() || omega_.size() != features_.rows())
      throw StructuralError("WeightedSamples: length mismatch");
    for (auto d : delta_)
      if (d > 1) throw ValidationError("WeightedSamples: delta must be 0 or 1");
    for (double w : omega_)
      if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("WeightedSamples: weights must be finite and >= 0");
  }

  const FeatureMatrix& features() const { return features_; }
  std::span<const std::uint8_t> delta() const { return delta_; }
  std::span<const double> omega() const { return omega_; }
  std::size_t rows() const { return features_.rows(); }
  std::size_t cols() const { return features_.cols(); }

  std::size_t count(std::uint8_t label) const {
    return static_cast<std::size_t>(std::count(delta_.begin(), delta_.end(), label));
  }

 protected:
  FeatureMatrix features_;
  std::vector<std::uint8_t> delta_;
  std::vector<double> omega_;
};

/// Denominator rows (delta = 0) followed by numerator rows (delta = 1), with
/// normalized weights
///   omega_i = delta_i gamma_i / (2 sum_j delta_j gamma_j) + (1 - delta_i) / (2 n0).
class AugmentedDataset : public WeightedSamples {
 public:
  std::span<const double> gamma() const { return gamma_; }
  std::size_t n0() const { return n0_; }
  std::size_t n1() const { return rows() - n0_; }

  friend AugmentedDataset build_augmented(const FeatureMatrix& denominator, const FeatureMatrix& numerator,
                                          std::span<const double> gamma);

 private:
  std::vector<double> gamma_;
  std::size_t n0_ = 0;
};

inline AugmentedDataset build_augmented(const FeatureMatrix& denominator, const FeatureMatrix& numerator,
                                        std::span<const double> gamma) {
  if (denominator.rows() == 0 || numerator.rows() == 0)
    throw StructuralError("build_augmented: numerator and denominator must be nonempty");
  if (denominator.cols() != numerator.cols())
    throw StructuralError("build_augmented: numerator and denominator column counts differ");
  if (gamma.size() != numerator.rows()) throw StructuralError("build_augmented: gamma length != numerator rows");
  double gamma_sum = 0.0;
  for (double g : gamma) {
    if (!(g > 0.0) || !std::isfinite(g)) throw ValidationError("build_augmented: gamma must be positive and finite");
    gamma_sum += g;
  }
  const std::size_t n0 = denominator.rows();
  const std::size_t n1 = numerator.rows();

  AugmentedDataset out;
  out.features_ = FeatureMatrix::vstack(denominator, numerator);
  out.delta_.assign(n0, 0);
  out.delta_.insert(out.delta_.end(), n1, 1);
  out.omega_.resize(n0 + n1);
  out.gamma_.assign(n0, 1.0);
  out.gamma_.insert(out.gamma_.end(), gamma.begin(), gamma.end());
  for (std::size_t i = 0; i < n0; ++i) out.omega_[i] = 1.0 / (2.0 * static_cast<double>(n0));
  for (std::size_t i = 0; i < n1; ++i) out.omega_[n0 + i] = gamma[i] / (2.0 * gamma_sum);
  out.n0_ = n0;
  return out;
}

inline AugmentedDataset build_augmented(const FeatureMatrix& denominator, const FeatureMatrix& numerator) {
  std::vector<double> ones(numerator.rows(), 1.0);
  return build_augmented(denominator, numerator, ones);
}

/// A learned or closed-form density ratio x -> alpha(x) >= 0.
class RatioModel {
 public:
  virtual ~RatioModel() = default;
  virtual std::vector<double> predict(const FeatureMatrix& x) const = 0;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Seeded uniform permutation of [0, rows); the first floor(fraction * rows)
/// indices form the training set, the rest the validation set.
inline Split split_train_validation(std::size_t rows, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("split_train_validation: fraction must lie in (0, 1)");
  if (rows < 2) throw StructuralError("split_train_validation: need at least two rows");
  Rng rng(seed);
  auto perm = rng.permutation(rows);
  auto n_train = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(rows)));
  n_train = std::clamp<std::size_t>(n_train, 1, rows - 1);
  Split s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  return s;
}

}  // namespace brr
