#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "brr/core.hpp"
#include "brr/error.hpp"

namespace brr {

enum class DivergenceTag { LeastSquares, KullbackLeibler, NegativeBinomial, ItakuraSaito, Custom };

/// A strictly convex Bregman generator with its first three derivatives.
///
/// `domain_min` is the open lower bound of the domain (-inf for least squares).
/// The third derivative is only used by the log-alpha hessian.
struct GeneratingFunction {
  DivergenceTag tag = DivergenceTag::Custom;
  std::string name;
  std::function<double(double)> F;
  std::function<double(double)> Fp;
  std::function<double(double)> Fpp;
  std::function<double(double)> Fppp;
  double domain_min = -std::numeric_limits<double>::infinity();

  bool in_domain(double t) const { return std::isfinite(t) && t > domain_min; }

  void require(double t) const {
    if (!in_domain(t)) throw DomainError(name + ": argument " + std::to_string(t) + " outside the domain");
  }
};

inline GeneratingFunction least_squares() {
  return {DivergenceTag::LeastSquares,
          "LS",
          [](double t) { return t * t; },
          [](double t) { return 2.0 * t; },
          [](double) { return 2.0; },
          [](double) { return 0.0; },
          -std::numeric_limits<double>::infinity()};
}

inline GeneratingFunction kullback_leibler() {
  return {DivergenceTag::KullbackLeibler,
          "KL",
          [](double t) { return t * std::log(t) - t; },
          [](double t) { return std::log(t); },
          [](double t) { return 1.0 / t; },
          [](double t) { return -1.0 / (t * t); },
          0.0};
}

inline GeneratingFunction negative_binomial() {
  return {DivergenceTag::NegativeBinomial,
          "NB",
          [](double t) { return t * std::log(t) - (1.0 + t) * std::log1p(t); },
          [](double t) { return std::log(t) - std::log1p(t); },
          [](double t) { return 1.0 / (t * (1.0 + t)); },
          [](double t) { return -(1.0 + 2.0 * t) / (t * t * (1.0 + t) * (1.0 + t)); },
          0.0};
}

inline GeneratingFunction itakura_saito() {
  return {DivergenceTag::ItakuraSaito,
          "IS",
          [](double t) { return -std::log(t) - 1.0; },
          [](double t) { return -1.0 / t; },
          [](double t) { return 1.0 / (t * t); },
          [](double t) { return -2.0 / (t * t * t); },
          0.0};
}

inline GeneratingFunction generator(DivergenceTag tag) {
  switch (tag) {
    case DivergenceTag::LeastSquares: return least_squares();
    case DivergenceTag::KullbackLeibler: return kullback_leibler();
    case DivergenceTag::NegativeBinomial: return negative_binomial();
    case DivergenceTag::ItakuraSaito: return itakura_saito();
    case DivergenceTag::Custom: break;
  }
  throw ValidationError("generator: no built-in generator for a custom tag");
}

/// Accepts "LS", "KL", "NB", "IS" in any case.
inline GeneratingFunction parse_divergence(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (s == "LS") return least_squares();
  if (s == "KL") return kullback_leibler();
  if (s == "NB") return negative_binomial();
  if (s == "IS") return itakura_saito();
  throw ValidationError("unknown divergence '" + std::string(name) + "'");
}

inline std::vector<GeneratingFunction> all_generators() {
  return {least_squares(), kullback_leibler(), negative_binomial(), itakura_saito()};
}

/// t F(1/t), the generator of the divergence with numerator and denominator swapped.
inline GeneratingFunction reciprocal_generator(const GeneratingFunction& base) {
  GeneratingFunction g;
  g.tag = DivergenceTag::Custom;
  g.name = "rec(" + base.name + ")";
  g.domain_min = 0.0;
  auto guard = [name = g.name](double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw DomainError(name + ": argument " + std::to_string(t) + " outside the domain");
  };
  g.F = [base, guard](double t) {
    guard(t);
    return t * base.F(1.0 / t);
  };
  g.Fp = [base, guard](double t) {
    guard(t);
    const double s = 1.0 / t;
    return base.F(s) - base.Fp(s) * s;
  };
  g.Fpp = [base, guard](double t) {
    guard(t);
    const double s = 1.0 / t;
    return base.Fpp(s) * s * s * s;
  };
  g.Fppp = [base, guard](double t) {
    guard(t);
    const double s = 1.0 / t;
    const double s4 = s * s * s * s;
    return -3.0 * base.Fpp(s) * s4 - base.Fppp(s) * s4 * s;
  };
  return g;
}

/// Weighted mean of F(g0) - F(g) - F'(g)(g0 - g).
inline double bregman_divergence(const GeneratingFunction& F, std::span<const double> g0, std::span<const double> g,
                                 std::span<const double> weights) {
  if (g0.size() != g.size() || g.size() != weights.size())
    throw StructuralError("bregman_divergence: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw ValidationError("bregman_divergence: negative weight");
    F.require(g0[i]);
    F.require(g[i]);
    total += weights[i] * (F.F(g0[i]) - F.F(g[i]) - F.Fp(g[i]) * (g0[i] - g[i]));
  }
  return total;
}

/// omega [ (1 - delta)(F'(a) a - F(a)) - delta F'(a) ], the per-row term of the empirical risk.
inline double unit_loss(const GeneratingFunction& F, double alpha, std::uint8_t delta, double omega) {
  return delta ? -omega * F.Fp(alpha) : omega * (F.Fp(alpha) * alpha - F.F(alpha));
}

/// Empirical Bregman-Riesz risk 2 sum_i unit_loss_i. The factor 2 makes this
/// estimate the population risk E_P0[F'(a)a - F(a)] - E_P1[F'(a)].
inline double brr_empirical(const GeneratingFunction& F, std::span<const double> alpha, const WeightedSamples& data) {
  if (alpha.size() != data.rows()) throw StructuralError("brr_empirical: alpha length != rows");
  const auto delta = data.delta();
  const auto omega = data.omega();
  double total = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    F.require(alpha[i]);
    total += unit_loss(F, alpha[i], delta[i], omega[i]);
  }
  return 2.0 * total;
}

/// d unit_loss / df at f = log alpha:  omega alpha F''(alpha) [(1 - delta) alpha - delta].
inline double unit_gradient_logalpha(const GeneratingFunction& F, double alpha, std::uint8_t delta, double omega) {
  const double bracket = delta ? -1.0 : alpha;
  return omega * alpha * F.Fpp(alpha) * bracket;
}

/// d^2 unit_loss / df^2 at f = log alpha.
inline double unit_hessian_logalpha(const GeneratingFunction& F, double alpha, std::uint8_t delta, double omega) {
  const double fpp = F.Fpp(alpha);
  const double bracket = delta ? -1.0 : alpha;
  const double dbracket = delta ? 0.0 : 1.0;
  return omega * alpha * ((fpp + alpha * F.Fppp(alpha)) * bracket + alpha * fpp * dbracket);
}

namespace detail {
inline void require_log_domain(const GeneratingFunction& F, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw DomainError(F.name + ": log-alpha parameterization needs alpha > 0, got " + std::to_string(alpha));
  F.require(alpha);
}
}  // namespace detail

inline std::vector<double> brr_gradient_logalpha(const GeneratingFunction& F, std::span<const double> alpha,
                                                 const WeightedSamples& data) {
  if (alpha.size() != data.rows()) throw StructuralError("brr_gradient_logalpha: alpha length != rows");
  std::vector<double> out(alpha.size());
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    detail::require_log_domain(F, alpha[i]);
    out[i] = unit_gradient_logalpha(F, alpha[i], data.delta()[i], data.omega()[i]);
  }
  return out;
}

inline std::vector<double> brr_hessian_logalpha(const GeneratingFunction& F, std::span<const double> alpha,
                                                const WeightedSamples& data) {
  if (alpha.size() != data.rows()) throw StructuralError("brr_hessian_logalpha: alpha length != rows");
  std::vector<double> out(alpha.size());
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    detail::require_log_domain(F, alpha[i]);
    out[i] = unit_hessian_logalpha(F, alpha[i], data.delta()[i], data.omega()[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Integral form of the divergence, evaluated by quadrature.

/// Gauss-Legendre nodes and weights on [-1, 1].
struct GaussLegendreRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline GaussLegendreRule gauss_legendre(std::size_t n) {
  if (n == 0) throw ValidationError("gauss_legendre: need at least one point");
  GaussLegendreRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  const double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(pi * (static_cast<double>(i) + 0.75) / (static_cast<double>(n) + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (std::size_t k = 2; k <= n; ++k) {
        const double kk = static_cast<double>(k);
        const double p2 = ((2.0 * kk - 1.0) * x * p1 - (kk - 1.0) * p0) / kk;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) {
        p1 = x;
        p0 = 1.0;
      }
      dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  if (n == 1) {
    rule.nodes[0] = 0.0;
    rule.weights[0] = 2.0;
  }
  return rule;
}

namespace detail {

template <class Fn>
double gl_panel(const Fn& f, double a, double b, const GaussLegendreRule& rule) {
  const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  double s = 0.0;
  for (std::size_t k = 0; k < rule.nodes.size(); ++k) s += rule.weights[k] * f(mid + half * rule.nodes[k]);
  return s * half;
}

template <class Fn>
double gl_adaptive(const Fn& f, double a, double b, double whole, const GaussLegendreRule& rule, double tol,
                   int depth) {
  const double m = 0.5 * (a + b);
  const double left = gl_panel(f, a, m, rule);
  const double right = gl_panel(f, m, b, rule);
  const double refined = left + right;
  if (depth <= 0 || std::abs(refined - whole) <= tol * std::max(1.0, std::abs(refined))) return refined;
  return gl_adaptive(f, a, m, left, rule, 0.5 * tol, depth - 1) + gl_adaptive(f, m, b, right, rule, 0.5 * tol, depth - 1);
}

}  // namespace detail

/// Integral of |g0 - t| F''(t) over t between g and g0 (the cost-weighted regret
/// representation of the divergence at one point).
///
/// Composite adaptive Gauss-Legendre with `points` nodes per panel; when the
/// interval approaches the singular point 0 of KL/NB/IS it is first cut into
/// geometrically graded panels.
inline double regret_integral_oracle(const GeneratingFunction& F, double g0, double g, std::size_t points = 20) {
  if (!std::isfinite(g0) || !std::isfinite(g)) throw DomainError(F.name + ": non-finite regret endpoint");
  const double lo = std::min(g0, g), hi = std::max(g0, g);
  if (lo == hi) return 0.0;
  if (!(lo > F.domain_min))
    throw DomainError(F.name + ": regret integrand is not integrable down to " + std::to_string(lo));
  const GaussLegendreRule rule = gauss_legendre(points);
  auto integrand = [&](double t) { return std::abs(g0 - t) * F.Fpp(t); };

  std::vector<double> cuts{lo};
  if (F.domain_min == 0.0 && lo > 0.0 && hi / lo > 4.0) {
    const int panels = static_cast<int>(std::ceil(std::log(hi / lo) / std::log(2.0)));
    for (int k = 1; k < panels; ++k) cuts.push_back(lo * std::pow(hi / lo, static_cast<double>(k) / panels));
  }
  cuts.push_back(hi);

  double total = 0.0;
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const double a = cuts[k], b = cuts[k + 1];
    const double whole = detail::gl_panel(integrand, a, b, rule);
    total += detail::gl_adaptive(integrand, a, b, whole, rule, 1e-13, 30);
  }
  return total;
}

}  // namespace brr
