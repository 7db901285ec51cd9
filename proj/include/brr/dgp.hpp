#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "brr/augmentation.hpp"
#include "brr/core.hpp"
#include "brr/error.hpp"
#include "brr/random.hpp"

namespace brr {

enum class TreatmentKind { Binary, Continuous };

/// Simulation design: X = (A, W) with W ~ N(0, I_p), outcome
/// Y ~ N(A + A W1 + W1 W2 + W3, 1). Column 0 of every simulated matrix is A,
/// columns 1..p are W1..Wp.
struct DgpSpec {
  std::size_t p = 20;
  double c = 0.5;
  TreatmentKind treatment = TreatmentKind::Continuous;
  double shift = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (p < 3) throw ValidationError("DgpSpec: p must be at least 3");
    if (!std::isfinite(c)) throw ValidationError("DgpSpec: c must be finite");
    if (!std::isfinite(shift)) throw ValidationError("DgpSpec: shift must be finite");
  }
};

inline constexpr std::size_t kTreatmentCol = 0;

inline double sigmoid(double u) {
  return u >= 0.0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
}

/// P(A = 1 | W = w) for the binary design; `w` holds W1..Wp.
inline double binary_propensity(std::span<const double> w) {
  return sigmoid(std::abs(w[0]) + (1.0 - 0.5 * w[1]) * w[2]);
}

inline double outcome_mean(double a, std::span<const double> w) { return a + a * w[0] + w[0] * w[1] + w[2]; }

/// Draws A given covariates (W1..Wp).
inline double draw_treatment(const DgpSpec& spec, std::span<const double> w, Rng& rng) {
  if (spec.treatment == TreatmentKind::Binary) return rng.uniform() < binary_propensity(w) ? 1.0 : 0.0;
  return rng.normal(spec.c * w[0], 1.0);
}

struct SimulatedData {
  FeatureMatrix features;
  std::vector<double> outcomes;
};

/// n rows; per row the draws are W1..Wp, then A, then the outcome noise.
inline SimulatedData simulate(const DgpSpec& spec, std::size_t n) {
  spec.validate();
  if (n < 1) throw ValidationError("simulate: n must be >= 1");
  Rng rng(spec.seed);
  const std::size_t d = spec.p + 1;
  std::vector<double> x(n * d);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = x.data() + i * d;
    for (std::size_t j = 1; j < d; ++j) row[j] = rng.normal();
    std::span<const double> w(row + 1, spec.p);
    row[0] = draw_treatment(spec, w, rng);
    y[i] = outcome_mean(row[0], w) + rng.normal();
  }
  return {FeatureMatrix(n, d, std::move(x)), std::move(y)};
}

/// Closed-form density ratio of the simulation design.
class OracleRatio : public RatioModel {
 public:
  OracleRatio(Estimand estimand, DgpSpec spec) : estimand_(estimand), spec_(spec) {
    spec_.validate();
    const bool binary = spec_.treatment == TreatmentKind::Binary;
    if ((estimand_ == Estimand::APE) != binary)
      throw ValidationError("oracle_ratio: estimand " + to_string(estimand_) + " does not match the treatment kind");
  }

  Estimand estimand() const { return estimand_; }

  double at(std::span<const double> x) const {
    const double a = x[0];
    const double w1 = x[1];
    const double c = spec_.c;
    switch (estimand_) {
      case Estimand::APE: return a / binary_propensity(x.subspan(1));
      case Estimand::ASE: {
        const double d = spec_.shift;
        return std::exp(d * (a - c * w1) - 0.5 * d * d);
      }
      case Estimand::SW: {
        const double r = a - c * w1;
        const double v = 1.0 + c * c;
        return std::exp(0.5 * r * r - a * a / (2.0 * v) - 0.5 * std::log(v));
      }
    }
    return 0.0;
  }

  std::vector<double> predict(const FeatureMatrix& x) const override {
    if (x.cols() != spec_.p + 1) throw StructuralError("OracleRatio: expected p + 1 columns");
    std::vector<double> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = at(x.row(i));
    return out;
  }

 private:
  Estimand estimand_;
  DgpSpec spec_;
};

inline OracleRatio oracle_ratio(Estimand estimand, const DgpSpec& spec) { return OracleRatio(estimand, spec); }

/// True target value: APE (policy pi = 1) -> 1, ASE -> shift + c, average dose response -> 0.
inline double true_estimand(Estimand estimand, const DgpSpec& spec) {
  switch (estimand) {
    case Estimand::APE: return 1.0;
    case Estimand::ASE: return spec.shift + spec.c;
    case Estimand::SW: return 0.0;
  }
  return 0.0;
}

}  // namespace brr
