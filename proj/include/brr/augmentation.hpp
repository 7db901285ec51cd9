#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "brr/core.hpp"
#include "brr/error.hpp"
#include "brr/random.hpp"

namespace brr {

enum class SamplingKind {
  WithReplacement,
  MPermutation,
  MDerangement,
  TrainTimeSample,
  TrainTimePermute,
  TrainTimeDerange,
  // Treatments and covariates each permuted independently ("sampling without
  // replacement"); not part of the default benchmarks.
  WithoutReplacement,
};

inline bool is_train_time(SamplingKind k) {
  return k == SamplingKind::TrainTimeSample || k == SamplingKind::TrainTimePermute ||
         k == SamplingKind::TrainTimeDerange;
}

/// Fixed-sample counterpart of a train-time kind (used for the validation split).
inline SamplingKind fixed_counterpart(SamplingKind k) {
  switch (k) {
    case SamplingKind::TrainTimeSample: return SamplingKind::WithReplacement;
    case SamplingKind::TrainTimePermute: return SamplingKind::MPermutation;
    case SamplingKind::TrainTimeDerange: return SamplingKind::MDerangement;
    default: return k;
  }
}

inline SamplingKind train_time_counterpart(SamplingKind k) {
  switch (k) {
    case SamplingKind::WithReplacement: return SamplingKind::TrainTimeSample;
    case SamplingKind::MPermutation: return SamplingKind::TrainTimePermute;
    case SamplingKind::MDerangement: return SamplingKind::TrainTimeDerange;
    default: return k;
  }
}

inline std::string to_string(SamplingKind k) {
  switch (k) {
    case SamplingKind::WithReplacement: return "with_replacement";
    case SamplingKind::MPermutation: return "m_permutation";
    case SamplingKind::MDerangement: return "m_derangement";
    case SamplingKind::TrainTimeSample: return "tt_sample";
    case SamplingKind::TrainTimePermute: return "tt_permute";
    case SamplingKind::TrainTimeDerange: return "tt_derange";
    case SamplingKind::WithoutReplacement: return "without_replacement";
  }
  return "?";
}

inline SamplingKind parse_sampling_kind(std::string_view s) {
  for (auto k : {SamplingKind::WithReplacement, SamplingKind::MPermutation, SamplingKind::MDerangement,
                 SamplingKind::TrainTimeSample, SamplingKind::TrainTimePermute, SamplingKind::TrainTimeDerange,
                 SamplingKind::WithoutReplacement})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown sampling scheme '" + std::string(s) + "'");
}

struct SamplingScheme {
  SamplingKind kind = SamplingKind::MPermutation;
  std::size_t m = 1;

  void validate() const {
    if (m < 1) throw ValidationError("SamplingScheme: multiplier m must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Permutations

/// Uniform derangement of [0, n) by rejection over uniform permutations.
inline std::vector<std::size_t> sample_derangement(std::size_t n, Rng& rng) {
  if (n == 1) throw StructuralError("sample_derangement: no derangement of a single element");
  for (;;) {
    auto p = rng.permutation(n);
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) ok = p[i] != i;
    if (ok) return p;
  }
}

namespace detail {
inline void check_treatment_col(const FeatureMatrix& data, std::size_t col) {
  if (col >= data.cols()) throw StructuralError("treatment column " + std::to_string(col) + " out of range");
  if (data.rows() == 0) throw StructuralError("augmentation: empty data");
}

inline void check_binary(const FeatureMatrix& data, std::size_t col) {
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const double a = data(i, col);
    if (a != 0.0 && a != 1.0) throw ValidationError("augmentation: treatment column must be binary");
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Modified treatment policy

/// Rule (a, row) -> modified treatment; `row` is the full feature row.
using TreatmentRule = std::function<double(double, std::span<const double>)>;

/// Numerator sample {(a~(a_i, w_i), w_i)}: a copy of `data` with the treatment
/// column replaced. n1 = n0 and all gamma are 1.
inline FeatureMatrix augment_mtp(const FeatureMatrix& data, std::size_t treatment_col, const TreatmentRule& rule) {
  detail::check_treatment_col(data, treatment_col);
  FeatureMatrix out = data;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const double a = rule(data(i, treatment_col), data.row(i));
    if (!std::isfinite(a)) throw ValidationError("augment_mtp: rule returned a non-finite treatment");
    out(i, treatment_col) = a;
  }
  return out;
}

inline TreatmentRule shift_rule(double delta) {
  return [delta](double a, std::span<const double>) { return a + delta; };
}

// ---------------------------------------------------------------------------
// Binary policy

/// Policy w -> {0, 1}; receives the covariate row (treatment column removed).
using BinaryPolicy = std::function<int(std::span<const double>)>;

struct BinaryPolicyAugmentation {
  FeatureMatrix numerator;    // all W rows: samples from p_W
  FeatureMatrix denominator;  // W rows with a_i = pi(w_i): samples from p_{W|A=pi(W)}
  double normalizer = 1.0;    // empirical P(A = pi(W))
};

inline BinaryPolicyAugmentation augment_binary_policy(const FeatureMatrix& data, std::size_t treatment_col,
                                                      const BinaryPolicy& policy) {
  detail::check_treatment_col(data, treatment_col);
  detail::check_binary(data, treatment_col);
  BinaryPolicyAugmentation out;
  out.numerator = data.drop_col(treatment_col);
  std::vector<std::size_t> match;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const int target = policy(out.numerator.row(i));
    if (target != 0 && target != 1) throw ValidationError("augment_binary_policy: policy must return 0 or 1");
    if (data(i, treatment_col) == static_cast<double>(target)) match.push_back(i);
  }
  if (match.empty()) throw DegenerateOverlapError("augment_binary_policy: no observation follows the policy");
  out.denominator = out.numerator.select_rows(match);
  out.normalizer = static_cast<double>(match.size()) / static_cast<double>(data.rows());
  return out;
}

/// alpha(a, w) = alpha1(w) 1{a = pi(w)} / normalizer, assembled from a learned
/// covariate ratio alpha1 fitted on the binary-policy augmentation.
class BinaryPolicyRatio : public RatioModel {
 public:
  BinaryPolicyRatio(std::shared_ptr<const RatioModel> covariate_ratio, std::size_t treatment_col, BinaryPolicy policy,
                    double normalizer)
      : inner_(std::move(covariate_ratio)), col_(treatment_col), policy_(std::move(policy)), normalizer_(normalizer) {
    if (!(normalizer_ > 0.0)) throw ValidationError("BinaryPolicyRatio: normalizer must be positive");
  }

  std::vector<double> predict(const FeatureMatrix& x) const override {
    FeatureMatrix w = x.drop_col(col_);
    auto base = inner_->predict(w);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const bool follows = x(i, col_) == static_cast<double>(policy_(w.row(i)));
      base[i] = follows ? base[i] / normalizer_ : 0.0;
    }
    return base;
  }

 private:
  std::shared_ptr<const RatioModel> inner_;
  std::size_t col_;
  BinaryPolicy policy_;
  double normalizer_;
};

// ---------------------------------------------------------------------------
// Average treatment effect

struct AteAugmentation {
  FeatureMatrix augmented;  // (1, w_i) rows then (0, w_i) rows
  std::vector<double> gamma;
  double pA1_hat = 0.0;
};

inline AteAugmentation augment_ate(const FeatureMatrix& data, std::size_t treatment_col) {
  detail::check_treatment_col(data, treatment_col);
  detail::check_binary(data, treatment_col);
  const std::size_t n0 = data.rows();
  double treated = 0.0;
  for (std::size_t i = 0; i < n0; ++i) treated += data(i, treatment_col);
  const double p1 = treated / static_cast<double>(n0);
  if (p1 <= 0.0 || p1 >= 1.0) throw DegenerateOverlapError("augment_ate: estimated P(A=1) is 0 or 1");
  AteAugmentation out;
  out.pA1_hat = p1;
  FeatureMatrix ones = data, zeros = data;
  for (std::size_t i = 0; i < n0; ++i) {
    ones(i, treatment_col) = 1.0;
    zeros(i, treatment_col) = 0.0;
  }
  out.augmented = FeatureMatrix::vstack(ones, zeros);
  out.gamma.assign(n0, p1);
  out.gamma.insert(out.gamma.end(), n0, 1.0 - p1);
  return out;
}

// ---------------------------------------------------------------------------
// Stabilized weight

inline FeatureMatrix augment_stabilized(const FeatureMatrix& data, std::size_t treatment_col,
                                        const SamplingScheme& scheme, std::uint64_t seed) {
  detail::check_treatment_col(data, treatment_col);
  scheme.validate();
  if (is_train_time(scheme.kind))
    throw ValidationError("augment_stabilized: train-time kinds are resampled by the trainer, not augmented up front");
  const std::size_t n0 = data.rows();
  const std::size_t m = scheme.m;
  const auto treatment = data.column(treatment_col);
  Rng rng(seed);
  FeatureMatrix out(m * n0, data.cols());

  auto write_row = [&](std::size_t dst, std::size_t cov_src, double a) {
    std::copy(data.row(cov_src).begin(), data.row(cov_src).end(), out.row(dst).begin());
    out(dst, treatment_col) = a;
  };

  switch (scheme.kind) {
    case SamplingKind::WithReplacement:
      for (std::size_t k = 0; k < m * n0; ++k) {
        const std::size_t a_src = rng.below(n0);
        const std::size_t w_src = rng.below(n0);
        write_row(k, w_src, treatment[a_src]);
      }
      break;
    case SamplingKind::MPermutation:
      for (std::size_t b = 0; b < m; ++b) {
        auto p = rng.permutation(n0);
        for (std::size_t i = 0; i < n0; ++i) write_row(b * n0 + i, i, treatment[p[i]]);
      }
      break;
    case SamplingKind::MDerangement:
      if (n0 < 2) throw StructuralError("augment_stabilized: derangement needs at least two observations");
      for (std::size_t b = 0; b < m; ++b) {
        auto p = sample_derangement(n0, rng);
        for (std::size_t i = 0; i < n0; ++i) write_row(b * n0 + i, i, treatment[p[i]]);
      }
      break;
    case SamplingKind::WithoutReplacement:
      for (std::size_t b = 0; b < m; ++b) {
        auto pa = rng.permutation(n0);
        auto pw = rng.permutation(n0);
        for (std::size_t i = 0; i < n0; ++i) write_row(b * n0 + i, pw[i], treatment[pa[i]]);
      }
      break;
    default: break;
  }
  return out;
}

/// All pairs (a_i, w_j): n0^2 rows (V-statistic), or n0(n0 - 1) rows without
/// the diagonal (U-statistic). Quadratic in n0; not used by default benchmarks.
inline FeatureMatrix augment_full_pairing(const FeatureMatrix& data, std::size_t treatment_col, bool exclude_diagonal) {
  detail::check_treatment_col(data, treatment_col);
  const std::size_t n0 = data.rows();
  if (exclude_diagonal && n0 < 2) throw StructuralError("augment_full_pairing: U-statistic pairing needs n0 >= 2");
  const std::size_t rows = exclude_diagonal ? n0 * (n0 - 1) : n0 * n0;
  FeatureMatrix out(rows, data.cols());
  std::size_t k = 0;
  for (std::size_t i = 0; i < n0; ++i)
    for (std::size_t j = 0; j < n0; ++j) {
      if (exclude_diagonal && i == j) continue;
      std::copy(data.row(j).begin(), data.row(j).end(), out.row(k).begin());
      out(k, treatment_col) = data(i, treatment_col);
      ++k;
    }
  return out;
}

/// Regenerates the treatments of the numerator rows of one minibatch.
///
/// `source_treatment[k]` is the treatment originally paired with numerator row
/// k of the batch. Rows receive treatments drawn from the batch's source
/// treatments: with replacement, by a permutation, or by a derangement (so no
/// row keeps its own source treatment). A derangement request on fewer than
/// two numerator rows falls back to sampling with replacement; the return value
/// reports that fallback.
inline bool train_time_resample(FeatureMatrix& batch, std::span<const std::uint8_t> delta,
                                std::span<const double> source_treatment, std::size_t treatment_col, SamplingKind kind,
                                Rng& rng) {
  if (!is_train_time(kind)) throw ValidationError("train_time_resample: not a train-time sampling kind");
  if (delta.size() != batch.rows() || source_treatment.size() != batch.rows())
    throw StructuralError("train_time_resample: length mismatch");
  std::vector<std::size_t> rows;
  std::vector<double> sources;
  for (std::size_t i = 0; i < batch.rows(); ++i)
    if (delta[i]) {
      rows.push_back(i);
      sources.push_back(source_treatment[i]);
    }
  const std::size_t k = rows.size();
  if (k == 0) return false;
  bool fell_back = false;
  std::vector<std::size_t> pick(k);
  if (kind == SamplingKind::TrainTimeDerange && k < 2) {
    kind = SamplingKind::TrainTimeSample;
    fell_back = true;
  }
  switch (kind) {
    case SamplingKind::TrainTimeSample:
      for (auto& p : pick) p = rng.below(k);
      break;
    case SamplingKind::TrainTimePermute: pick = rng.permutation(k); break;
    case SamplingKind::TrainTimeDerange: pick = sample_derangement(k, rng); break;
    default: break;
  }
  for (std::size_t j = 0; j < k; ++j) batch(rows[j], treatment_col) = sources[pick[j]];
  return fell_back;
}

// ---------------------------------------------------------------------------
// Natural mediation

struct MediationColumns {
  std::vector<std::size_t> mediators;
  std::size_t treatment = 0;
  std::vector<std::size_t> covariates;
};

/// First-stage datasets for alpha1(w) = p_W(w) / p_{W|A}(w | a_dagger):
/// numerator = all W rows, denominator = W rows with a_i = a_dagger.
inline std::pair<FeatureMatrix, FeatureMatrix> mediation_first_stage(const FeatureMatrix& data,
                                                                     const MediationColumns& cols, double a_dagger) {
  detail::check_treatment_col(data, cols.treatment);
  std::vector<std::size_t> match;
  for (std::size_t i = 0; i < data.rows(); ++i)
    if (data(i, cols.treatment) == a_dagger) match.push_back(i);
  if (match.empty()) throw DegenerateOverlapError("mediation_first_stage: treatment level a_dagger never observed");
  FeatureMatrix w = data.select_cols(cols.covariates);
  return {w, w.select_rows(match)};
}

struct MediationAugmentation {
  FeatureMatrix augmented;  // rows (m_i, a_prime, w_i) for a_i = a_dagger, in the input column layout
  std::vector<double> gamma;
};

inline MediationAugmentation augment_mediation(const FeatureMatrix& data, const MediationColumns& cols, double a_prime,
                                               double a_dagger, const RatioModel& first_stage) {
  detail::check_treatment_col(data, cols.treatment);
  std::vector<std::size_t> match;
  for (std::size_t i = 0; i < data.rows(); ++i)
    if (data(i, cols.treatment) == a_dagger) match.push_back(i);
  if (match.empty()) throw DegenerateOverlapError("augment_mediation: treatment level a_dagger never observed");
  MediationAugmentation out;
  out.augmented = data.select_rows(match);
  for (std::size_t k = 0; k < match.size(); ++k) out.augmented(k, cols.treatment) = a_prime;
  FeatureMatrix w = out.augmented.select_cols(cols.covariates);
  out.gamma = first_stage.predict(w);
  for (double g : out.gamma)
    if (!(g > 0.0) || !std::isfinite(g)) throw ValidationError("augment_mediation: first-stage ratio must be positive");
  return out;
}

// ---------------------------------------------------------------------------
// Plans

enum class Estimand { APE, ASE, SW };

inline std::string to_string(Estimand e) {
  switch (e) {
    case Estimand::APE: return "APE";
    case Estimand::ASE: return "ASE";
    case Estimand::SW: return "SW";
  }
  return "?";
}

inline Estimand parse_estimand(std::string_view s) {
  std::string u(s);
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (u == "APE") return Estimand::APE;
  if (u == "ASE") return Estimand::ASE;
  if (u == "SW" || u == "ADRC") return Estimand::SW;
  throw ValidationError("unknown estimand '" + std::string(s) + "'");
}

struct MtpParams {
  TreatmentRule rule;
};
struct BinaryPolicyParams {
  BinaryPolicy policy;
};
struct AteParams {};
struct StabilizedParams {
  SamplingScheme scheme;
};
struct MediationParams {
  MediationColumns columns;
  double a_prime = 1.0;
  double a_dagger = 0.0;
  std::shared_ptr<const RatioModel> first_stage;
};

enum class AugmentationEstimand { ModifiedTreatmentPolicy, BinaryPolicy, ATE, StabilizedWeight, NaturalMediation };

struct AugmentationPlan {
  std::size_t treatment_col = 0;
  std::variant<MtpParams, BinaryPolicyParams, AteParams, StabilizedParams, MediationParams> params;

  AugmentationEstimand estimand() const { return static_cast<AugmentationEstimand>(params.index()); }

  void validate() const {
    std::visit(
        [](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, MtpParams>) {
            if (!p.rule) throw ValidationError("AugmentationPlan: missing treatment rule");
          } else if constexpr (std::is_same_v<P, BinaryPolicyParams>) {
            if (!p.policy) throw ValidationError("AugmentationPlan: missing policy");
          } else if constexpr (std::is_same_v<P, StabilizedParams>) {
            p.scheme.validate();
          } else if constexpr (std::is_same_v<P, MediationParams>) {
            if (!p.first_stage) throw ValidationError("AugmentationPlan: missing first-stage ratio model");
          }
        },
        params);
  }
};

/// Denominator/numerator pair ready for build_augmented.
struct AugmentationResult {
  FeatureMatrix denominator;
  FeatureMatrix numerator;
  std::vector<double> gamma;
  double normalizer = 1.0;  // binary-policy P(A = pi(W)) or ATE P(A = 1); 1 otherwise
};

inline AugmentationResult apply(const AugmentationPlan& plan, const FeatureMatrix& data, std::uint64_t seed) {
  plan.validate();
  AugmentationResult r;
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, MtpParams>) {
          r.denominator = data;
          r.numerator = augment_mtp(data, plan.treatment_col, p.rule);
        } else if constexpr (std::is_same_v<P, BinaryPolicyParams>) {
          auto b = augment_binary_policy(data, plan.treatment_col, p.policy);
          r.denominator = std::move(b.denominator);
          r.numerator = std::move(b.numerator);
          r.normalizer = b.normalizer;
        } else if constexpr (std::is_same_v<P, AteParams>) {
          auto a = augment_ate(data, plan.treatment_col);
          r.denominator = data;
          r.numerator = std::move(a.augmented);
          r.gamma = std::move(a.gamma);
          r.normalizer = a.pA1_hat;
        } else if constexpr (std::is_same_v<P, StabilizedParams>) {
          r.denominator = data;
          r.numerator = augment_stabilized(data, plan.treatment_col, p.scheme, seed);
        } else {
          auto med = augment_mediation(data, p.columns, p.a_prime, p.a_dagger, *p.first_stage);
          r.denominator = data;
          r.numerator = std::move(med.augmented);
          r.gamma = std::move(med.gamma);
        }
      },
      plan.params);
  if (r.gamma.empty()) r.gamma.assign(r.numerator.rows(), 1.0);
  return r;
}

}  // namespace brr
