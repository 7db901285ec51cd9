#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "brr/core.hpp"
#include "brr/divergences.hpp"
#include "brr/error.hpp"

namespace brr {

template <class Params, class Model>
struct SearchResult {
  Model model;
  Params params;
  double score = std::numeric_limits<double>::infinity();
  std::size_t index = 0;
  std::vector<double> scores;  // one per candidate; NaN marks a failed fit
  std::vector<std::string> failures;
};

/// Fits every candidate in grid order and keeps the lowest score. Ties keep the
/// earlier candidate, so callers encode their tie-break rule in the grid order.
/// Candidates whose fit throws are recorded; if all fail, throws FitError with
/// every message.
template <class Params, class FitFn, class ScoreFn>
auto grid_search(std::span<const Params> grid, FitFn&& fit, ScoreFn&& score)
    -> SearchResult<Params, std::decay_t<decltype(fit(grid[0]))>> {
  using Model = std::decay_t<decltype(fit(grid[0]))>;
  if (grid.empty()) throw ValidationError("grid_search: empty grid");
  std::optional<SearchResult<Params, Model>> best;
  std::vector<double> scores;
  std::vector<std::string> failures;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    try {
      Model m = fit(grid[k]);
      const double s = score(m);
      if (std::isnan(s)) throw FitError("validation score is NaN");
      scores.push_back(s);
      if (!best || s < best->score) best = SearchResult<Params, Model>{std::move(m), grid[k], s, k, {}, {}};
    } catch (const Error& e) {
      scores.push_back(std::numeric_limits<double>::quiet_NaN());
      failures.push_back("candidate " + std::to_string(k) + ": " + e.what());
    }
  }
  if (!best) {
    std::string msg = "grid_search: all " + std::to_string(grid.size()) + " candidates failed";
    for (const auto& f : failures) msg += "; " + f;
    throw FitError(msg);
  }
  best->scores = std::move(scores);
  best->failures = std::move(failures);
  return std::move(*best);
}

/// Domain guard used only inside training and model selection: alpha is
/// clipped to [1e-12, 1e12] before the risk is evaluated.
inline constexpr double kAlphaFloor = 1e-12;
inline constexpr double kAlphaCeil = 1e12;

inline double clip_alpha(double a) { return std::isnan(a) ? kAlphaFloor : std::clamp(a, kAlphaFloor, kAlphaCeil); }

inline double validation_brr(const GeneratingFunction& F, std::vector<double> alpha, const WeightedSamples& validation) {
  for (double& a : alpha) a = clip_alpha(a);
  return brr_empirical(F, alpha, validation);
}

inline double validation_brr(const GeneratingFunction& F, const RatioModel& model, const WeightedSamples& validation) {
  return validation_brr(F, model.predict(validation.features()), validation);
}

}  // namespace brr
