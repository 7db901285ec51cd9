#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "brr/core.hpp"
#include "brr/divergences.hpp"
#include "brr/error.hpp"
#include "brr/random.hpp"
#include "brr/search.hpp"

namespace brr {

struct GbmSpec {
  std::size_t max_trees = 1000;
  double learning_rate = 1e-3;
  std::size_t max_depth = 10;
  double bagging_fraction = 1.0;
  std::size_t patience = 10;
  double min_leaf_hessian = 1e-3;
  double damping = 1e-3;
  std::size_t max_leaves = 31;
  std::size_t min_leaf_rows = 20;
  std::size_t max_bins = 255;

  void validate() const {
    if (max_trees < 1) throw ValidationError("GbmSpec: max trees must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("GbmSpec: learning rate must be positive");
    if (!(bagging_fraction > 0.0 && bagging_fraction <= 1.0))
      throw ValidationError("GbmSpec: bagging fraction must lie in (0, 1]");
    if (patience < 1) throw ValidationError("GbmSpec: patience must be >= 1");
    if (!(min_leaf_hessian > 0.0)) throw ValidationError("GbmSpec: min leaf hessian must be positive");
    if (!(damping > 0.0)) throw ValidationError("GbmSpec: damping must be positive");
    if (max_leaves < 1) throw ValidationError("GbmSpec: max leaves must be >= 1");
    if (min_leaf_rows < 1) throw ValidationError("GbmSpec: min leaf rows must be >= 1");
    if (max_bins < 2 || max_bins > 65535) throw ValidationError("GbmSpec: max bins must lie in [2, 65535]");
  }
};

/// Depth x learning rate x bagging cells, ordered by depth first so ties go to
/// the shallowest trees.
inline std::vector<GbmSpec> gbm_grid(const GbmSpec& base = {}) {
  std::vector<GbmSpec> g;
  for (std::size_t depth : {10u, 20u, 50u})
    for (double lr : {1e-3, 1e-4})
      for (double bag : {0.8, 1.0}) {
        GbmSpec s = base;
        s.max_depth = depth;
        s.learning_rate = lr;
        s.bagging_fraction = bag;
        g.push_back(s);
      }
  return g;
}

/// Damped Newton leaf value -G / (H + damping); 0 when H <= min_hessian.
inline double newton_leaf_value(double G, double H, double damping, double min_hessian) {
  return H > min_hessian ? -G / (H + damping) : 0.0;
}

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1, right = -1;
  double value = 0.0;
};

class RegressionTree {
 public:
  RegressionTree() = default;
  explicit RegressionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {}

  /// x goes left when x[feature] <= threshold.
  double eval(std::span<const double> x) const {
    int k = 0;
    while (nodes_[static_cast<std::size_t>(k)].feature >= 0) {
      const auto& n = nodes_[static_cast<std::size_t>(k)];
      k = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes_[static_cast<std::size_t>(k)].value;
  }

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  std::size_t leaf_count() const {
    return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const TreeNode& n) {
      return n.feature < 0;
    }));
  }

 private:
  std::vector<TreeNode> nodes_;
};

/// Per-feature split candidates. Features with at most `max_bins` distinct
/// values get a threshold between every pair of neighbours, so splits are
/// exact; otherwise thresholds sit at quantiles.
class FeatureBins {
 public:
  FeatureBins() = default;
  FeatureBins(const FeatureMatrix& x, std::size_t max_bins) {
    const std::size_t n = x.rows();
    thresholds_.resize(x.cols());
    offsets_.resize(x.cols() + 1, 0);
    std::vector<double> col(n);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      for (std::size_t i = 0; i < n; ++i) col[i] = x(i, j);
      std::sort(col.begin(), col.end());
      std::vector<double> distinct;
      std::unique_copy(col.begin(), col.end(), std::back_inserter(distinct));
      auto& thr = thresholds_[j];
      if (distinct.size() <= max_bins) {
        for (std::size_t k = 0; k + 1 < distinct.size(); ++k) thr.push_back(0.5 * (distinct[k] + distinct[k + 1]));
      } else {
        for (std::size_t q = 1; q < max_bins; ++q) {
          const double v = col[q * n / max_bins];
          auto next = std::upper_bound(distinct.begin(), distinct.end(), v);
          if (next == distinct.end()) break;
          const double t = 0.5 * (v + *next);
          if (thr.empty() || t > thr.back()) thr.push_back(t);
        }
      }
      offsets_[j + 1] = offsets_[j] + thr.size() + 1;
    }
  }

  std::size_t features() const { return thresholds_.size(); }
  std::size_t bins(std::size_t j) const { return thresholds_[j].size() + 1; }
  std::size_t offset(std::size_t j) const { return offsets_[j]; }
  std::size_t total_bins() const { return offsets_.back(); }
  double threshold(std::size_t j, std::size_t b) const { return thresholds_[j][b]; }

  std::uint16_t bin(std::size_t j, double v) const {
    const auto& t = thresholds_[j];
    return static_cast<std::uint16_t>(std::lower_bound(t.begin(), t.end(), v) - t.begin());
  }

  /// Column-major bin codes.
  std::vector<std::uint16_t> encode(const FeatureMatrix& x) const {
    std::vector<std::uint16_t> out(x.rows() * x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j)
      for (std::size_t i = 0; i < x.rows(); ++i) out[j * x.rows() + i] = bin(j, x(i, j));
    return out;
  }

 private:
  std::vector<std::vector<double>> thresholds_;
  std::vector<std::size_t> offsets_;
};

namespace detail {

struct HistBin {
  double g = 0.0, h = 0.0, n = 0.0;
};

struct SplitChoice {
  double gain = 0.0;
  int feature = -1;
  std::size_t bin = 0;
};

struct GrowLeaf {
  std::size_t node = 0;
  std::size_t begin = 0, end = 0;
  std::size_t depth = 0;
  double G = 0.0, H = 0.0;
  std::vector<HistBin> hist;
  SplitChoice split;
};

inline double split_score(double G, double H, double lambda) { return G * G / (H + lambda); }

inline SplitChoice best_split(const GrowLeaf& leaf, const FeatureBins& bins, const GbmSpec& spec) {
  SplitChoice best;
  const double parent = split_score(leaf.G, leaf.H, spec.damping);
  const double count = static_cast<double>(leaf.end - leaf.begin);
  for (std::size_t j = 0; j < bins.features(); ++j) {
    double gl = 0.0, hl = 0.0, nl = 0.0;
    const std::size_t off = bins.offset(j);
    for (std::size_t b = 0; b + 1 < bins.bins(j); ++b) {
      const auto& hb = leaf.hist[off + b];
      gl += hb.g;
      hl += hb.h;
      nl += hb.n;
      const double nr = count - nl;
      if (nl < static_cast<double>(spec.min_leaf_rows)) continue;
      if (nr < static_cast<double>(spec.min_leaf_rows)) break;
      const double gr = leaf.G - gl, hr = leaf.H - hl;
      if (hl < spec.min_leaf_hessian || hr < spec.min_leaf_hessian) continue;
      const double gain = split_score(gl, hl, spec.damping) + split_score(gr, hr, spec.damping) - parent;
      if (gain > best.gain) best = {gain, static_cast<int>(j), b};
    }
  }
  return best;
}

inline void fill_hist(GrowLeaf& leaf, std::span<const std::size_t> idx, const std::vector<std::uint16_t>& codes,
                      std::size_t n_rows, const FeatureBins& bins, std::span<const double> g,
                      std::span<const double> h) {
  leaf.hist.assign(bins.total_bins(), {});
  leaf.G = leaf.H = 0.0;
  for (std::size_t k = leaf.begin; k < leaf.end; ++k) {
    leaf.G += g[idx[k]];
    leaf.H += h[idx[k]];
  }
  for (std::size_t j = 0; j < bins.features(); ++j) {
    const std::uint16_t* col = codes.data() + j * n_rows;
    HistBin* hist = leaf.hist.data() + bins.offset(j);
    for (std::size_t k = leaf.begin; k < leaf.end; ++k) {
      const std::size_t r = idx[k];
      HistBin& hb = hist[col[r]];
      hb.g += g[r];
      hb.h += h[r];
      hb.n += 1.0;
    }
  }
}

}  // namespace detail

/// Leaf-wise second-order tree on the rows `rows`: repeatedly splits the leaf
/// with the largest gain G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l) until
/// max_leaves is reached or no admissible split has positive gain.
inline RegressionTree grow_tree(const FeatureBins& bins, const std::vector<std::uint16_t>& codes, std::size_t n_rows,
                                std::span<const double> g, std::span<const double> h,
                                std::vector<std::size_t> rows, const GbmSpec& spec) {
  using detail::GrowLeaf;
  std::vector<TreeNode> nodes(1);
  std::vector<GrowLeaf> leaves(1);
  leaves[0].begin = 0;
  leaves[0].end = rows.size();
  detail::fill_hist(leaves[0], rows, codes, n_rows, bins, g, h);
  if (spec.max_depth > 0) leaves[0].split = detail::best_split(leaves[0], bins, spec);

  while (leaves.size() < spec.max_leaves) {
    std::size_t pick = leaves.size();
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      const auto& L = leaves[k];
      if (L.split.feature < 0 || L.depth >= spec.max_depth) continue;
      if (pick == leaves.size() || L.split.gain > leaves[pick].split.gain) pick = k;
    }
    if (pick == leaves.size()) break;

    GrowLeaf parent = std::move(leaves[pick]);
    const std::size_t f = static_cast<std::size_t>(parent.split.feature);
    const std::size_t b = parent.split.bin;
    const std::uint16_t* col = codes.data() + f * n_rows;
    auto mid = std::stable_partition(rows.begin() + static_cast<std::ptrdiff_t>(parent.begin),
                                     rows.begin() + static_cast<std::ptrdiff_t>(parent.end),
                                     [&](std::size_t r) { return col[r] <= b; });
    const std::size_t split_at = static_cast<std::size_t>(mid - rows.begin());

    const std::size_t left_node = nodes.size();
    nodes[parent.node].feature = static_cast<int>(f);
    nodes[parent.node].threshold = bins.threshold(f, b);
    nodes[parent.node].left = static_cast<int>(left_node);
    nodes[parent.node].right = static_cast<int>(left_node + 1);
    nodes.resize(left_node + 2);

    GrowLeaf left, right;
    left.node = left_node;
    right.node = left_node + 1;
    left.begin = parent.begin;
    left.end = split_at;
    right.begin = split_at;
    right.end = parent.end;
    left.depth = right.depth = parent.depth + 1;

    GrowLeaf& small = (left.end - left.begin) <= (right.end - right.begin) ? left : right;
    GrowLeaf& large = &small == &left ? right : left;
    detail::fill_hist(small, rows, codes, n_rows, bins, g, h);
    large.hist = std::move(parent.hist);
    for (std::size_t k = 0; k < large.hist.size(); ++k) {
      large.hist[k].g -= small.hist[k].g;
      large.hist[k].h -= small.hist[k].h;
      large.hist[k].n -= small.hist[k].n;
    }
    large.G = 0.0;
    large.H = 0.0;
    for (std::size_t k = large.begin; k < large.end; ++k) {
      large.G += g[rows[k]];
      large.H += h[rows[k]];
    }
    for (GrowLeaf* c : {&left, &right})
      if (c->depth < spec.max_depth) c->split = detail::best_split(*c, bins, spec);

    leaves[pick] = std::move(left);
    leaves.push_back(std::move(right));
  }

  for (const auto& L : leaves) nodes[L.node].value = newton_leaf_value(L.G, L.H, spec.damping, spec.min_leaf_hessian);
  return RegressionTree(std::move(nodes));
}

/// f(x) = init + learning_rate * sum_k tree_k(x), alpha = exp(f).
class GbmModel : public RatioModel {
 public:
  GbmModel() = default;
  GbmModel(double init, double learning_rate) : init_(init), learning_rate_(learning_rate) {}

  void add_tree(RegressionTree t) { trees_.push_back(std::move(t)); }
  void truncate(std::size_t count) {
    if (count < trees_.size()) trees_.resize(count);
  }
  const std::vector<RegressionTree>& trees() const { return trees_; }
  double init() const { return init_; }
  double learning_rate() const { return learning_rate_; }

  std::vector<double> log_ratio(const FeatureMatrix& x) const {
    std::vector<double> f(x.rows(), init_);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double s = 0.0;
      for (const auto& t : trees_) s += t.eval(x.row(i));
      f[i] += learning_rate_ * s;
    }
    return f;
  }

  std::vector<double> predict(const FeatureMatrix& x) const override {
    auto f = log_ratio(x);
    for (double& v : f) v = std::exp(std::clamp(v, -700.0, 700.0));
    return f;
  }

  // Fit diagnostics.
  std::size_t rounds_run = 0;
  std::size_t best_round = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  std::vector<double> validation_trace;
  std::vector<double> train_trace;

 private:
  double init_ = 0.0;
  double learning_rate_ = 1e-3;
  std::vector<RegressionTree> trees_;
};

struct GbmFitOptions {
  double init_score = 0.0;  // starting log ratio
};

/// Per-row gradient and hessian of the empirical risk in f = log alpha, scaled
/// by rows / sum(omega) so that an average row has unit weight and the leaf
/// damping acts on a sample-size-free scale.
inline void gbm_derivatives(const GeneratingFunction& F, std::span<const double> f, const WeightedSamples& data,
                            std::vector<double>& g, std::vector<double>& h) {
  double total = 0.0;
  for (double w : data.omega()) total += w;
  const double scale = static_cast<double>(data.rows()) / total;
  g.resize(f.size());
  h.resize(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double a = clip_alpha(std::exp(std::clamp(f[i], -700.0, 700.0)));
    const double w = scale * data.omega()[i];
    g[i] = unit_gradient_logalpha(F, a, data.delta()[i], w);
    h[i] = unit_hessian_logalpha(F, a, data.delta()[i], w);
    if (!std::isfinite(g[i]) || !std::isfinite(h[i]))
      throw FitError("fit_gbm: non-finite gradient or hessian at row " + std::to_string(i));
  }
}

inline double clipped_risk_from_f(const GeneratingFunction& F, std::span<const double> f, const WeightedSamples& data) {
  std::vector<double> a(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) a[i] = std::exp(std::clamp(f[i], -700.0, 700.0));
  return validation_brr(F, std::move(a), data);
}

/// Second-order boosting on the empirical risk in log-ratio space with early
/// stopping on validation risk; the returned model keeps the trees up to the
/// best validation round.
inline GbmModel fit_gbm(const WeightedSamples& train, const WeightedSamples& validation, const GeneratingFunction& F,
                        const GbmSpec& spec, std::uint64_t seed, const GbmFitOptions& opt = {}) {
  spec.validate();
  if (train.rows() == 0 || validation.rows() == 0) throw StructuralError("fit_gbm: empty train or validation set");
  if (train.cols() != validation.cols()) throw StructuralError("fit_gbm: train/validation column mismatch");
  const std::size_t n = train.rows();
  FeatureBins bins(train.features(), spec.max_bins);
  const auto codes = bins.encode(train.features());
  Rng rng(seed);

  GbmModel model(opt.init_score, spec.learning_rate);
  std::vector<double> f(n, opt.init_score), fv(validation.rows(), opt.init_score);
  std::vector<double> g, h;
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const std::size_t bag = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(spec.bagging_fraction * static_cast<double>(n))));
  std::size_t bad = 0;

  for (std::size_t round = 1; round <= spec.max_trees; ++round) {
    gbm_derivatives(F, f, train, g, h);
    std::vector<std::size_t> rows;
    if (bag < n) {
      rows = rng.sample_without_replacement(n, bag);
      std::sort(rows.begin(), rows.end());
    } else {
      rows = all;
    }
    RegressionTree tree = grow_tree(bins, codes, n, g, h, std::move(rows), spec);
    for (std::size_t i = 0; i < n; ++i) f[i] += spec.learning_rate * tree.eval(train.features().row(i));
    for (std::size_t i = 0; i < validation.rows(); ++i)
      fv[i] += spec.learning_rate * tree.eval(validation.features().row(i));
    model.add_tree(std::move(tree));

    const double val = clipped_risk_from_f(F, fv, validation);
    if (!std::isfinite(val)) throw FitError("fit_gbm: validation risk is not finite at round " + std::to_string(round));
    model.validation_trace.push_back(val);
    model.train_trace.push_back(clipped_risk_from_f(F, f, train));
    model.rounds_run = round;
    if (val < model.best_validation) {
      model.best_validation = val;
      model.best_round = round;
      bad = 0;
    } else if (++bad >= spec.patience) {
      break;
    }
  }
  model.truncate(model.best_round);
  return model;
}

inline SearchResult<GbmSpec, GbmModel> hyperparameter_search_gbm(std::span<const GbmSpec> grid,
                                                                 const WeightedSamples& train,
                                                                 const WeightedSamples& validation,
                                                                 const GeneratingFunction& F, std::uint64_t seed,
                                                                 const GbmFitOptions& opt = {}) {
  return grid_search(
      grid, [&](const GbmSpec& s) { return fit_gbm(train, validation, F, s, seed, opt); },
      [](const GbmModel& m) { return m.best_validation; });
}

}  // namespace brr
