#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "brr/augmentation.hpp"
#include "brr/config.hpp"
#include "brr/core.hpp"
#include "brr/dgp.hpp"
#include "brr/divergences.hpp"
#include "brr/error.hpp"
#include "brr/evaluation.hpp"
#include "brr/gbm.hpp"
#include "brr/kernel.hpp"
#include "brr/mlp.hpp"
#include "brr/random.hpp"

namespace brr {

enum class LearnerKind { KDE, ULSIF, KLIEP, MLP, GBM, MLP_TT, MLP_PS, GBM_PS };

inline std::string to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::KDE: return "kde";
    case LearnerKind::ULSIF: return "ulsif";
    case LearnerKind::KLIEP: return "kliep";
    case LearnerKind::MLP: return "mlp";
    case LearnerKind::GBM: return "gbm";
    case LearnerKind::MLP_TT: return "mlp_tt";
    case LearnerKind::MLP_PS: return "mlp_ps";
    case LearnerKind::GBM_PS: return "gbm_ps";
  }
  return "?";
}

inline LearnerKind parse_learner(std::string_view s) {
  for (auto k : {LearnerKind::KDE, LearnerKind::ULSIF, LearnerKind::KLIEP, LearnerKind::MLP, LearnerKind::GBM,
                 LearnerKind::MLP_TT, LearnerKind::MLP_PS, LearnerKind::GBM_PS})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown learner '" + std::string(s) + "'");
}

inline std::string divergence_name(DivergenceTag t) {
  switch (t) {
    case DivergenceTag::LeastSquares: return "LS";
    case DivergenceTag::KullbackLeibler: return "KL";
    case DivergenceTag::NegativeBinomial: return "NB";
    case DivergenceTag::ItakuraSaito: return "IS";
    case DivergenceTag::Custom: return "custom";
  }
  return "?";
}

struct ExperimentConfig {
  Estimand estimand = Estimand::ASE;
  std::vector<LearnerKind> learners{LearnerKind::MLP};
  std::vector<DivergenceTag> divergences{DivergenceTag::NegativeBinomial};
  std::vector<SamplingKind> schemes{SamplingKind::MPermutation};  // stabilized weight only
  std::vector<std::size_t> multipliers{1};                         // stabilized weight only
  std::size_t n0 = 2000;
  std::size_t n_eval = 10000;
  std::size_t replicates = 100;
  std::uint64_t seed = 1;
  std::string output_dir = "results";
  std::size_t workers = 1;
  bool record_runtime = false;
  double train_fraction = 0.8;

  DgpSpec dgp;

  MlpSpec mlp;  // depth and width come from the grid lists
  std::vector<std::size_t> mlp_depths{2, 3};
  std::vector<std::size_t> mlp_widths{20, 50};

  GbmSpec gbm;  // depth, rate and bagging come from the grid lists
  std::vector<std::size_t> gbm_depths{10, 20, 50};
  std::vector<double> gbm_rates{1e-3, 1e-4};
  std::vector<double> gbm_bagging{0.8, 1.0};

  std::vector<std::size_t> sieve_basis{100, 200, 500};
  std::vector<double> sieve_bandwidths{1.0, 2.0, 5.0, 10.0};
  std::vector<double> ulsif_lambdas{0.0, 0.1, 0.5, 1.0};
  KliepOptions kliep;

  void validate() const {
    if (learners.empty()) throw ConfigError("learners must be nonempty");
    if (divergences.empty()) throw ConfigError("divergences must be nonempty");
    if (estimand == Estimand::SW && schemes.empty()) throw ConfigError("schemes must be nonempty");
    if (multipliers.empty()) throw ConfigError("multipliers must be nonempty");
    for (auto m : multipliers)
      if (m < 1) throw ConfigError("multipliers must be >= 1");
    for (auto s : schemes)
      if (is_train_time(s)) throw ConfigError("schemes lists fixed kinds; mlp_tt derives its train-time kind");
    if (n0 < 50) throw ConfigError("n0 must be >= 50");
    if (n_eval < 1) throw ConfigError("n_eval must be >= 1");
    if (replicates < 1) throw ConfigError("replicates must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
    if (mlp_depths.empty() || mlp_widths.empty()) throw ConfigError("mlp grid must be nonempty");
    if (gbm_depths.empty() || gbm_rates.empty() || gbm_bagging.empty()) throw ConfigError("gbm grid must be nonempty");
    if (sieve_basis.empty() || sieve_bandwidths.empty() || ulsif_lambdas.empty())
      throw ConfigError("sieve grid must be nonempty");
    try {
      dgp.validate();
      mlp.validate();
      gbm.validate();
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
    for (auto l : learners) {
      const bool ps = l == LearnerKind::MLP_PS || l == LearnerKind::GBM_PS;
      if (ps && estimand != Estimand::APE) throw ConfigError(to_string(l) + " applies to the APE estimand only");
      if (l == LearnerKind::KDE && estimand == Estimand::APE) throw ConfigError("kde applies to ASE and SW only");
      if (l == LearnerKind::MLP_TT && estimand != Estimand::SW) throw ConfigError("mlp_tt applies to SW only");
    }
  }

  std::vector<MlpSpec> mlp_grid() const {
    std::vector<MlpSpec> g;
    for (auto d : mlp_depths)
      for (auto w : mlp_widths) {
        MlpSpec s = mlp;
        s.depth = d;
        s.width = w;
        g.push_back(s);
      }
    return g;
  }

  std::vector<GbmSpec> gbm_grid() const {
    std::vector<GbmSpec> g;
    for (auto d : gbm_depths)
      for (auto r : gbm_rates)
        for (auto b : gbm_bagging) {
          GbmSpec s = gbm;
          s.max_depth = d;
          s.learning_rate = r;
          s.bagging_fraction = b;
          g.push_back(s);
        }
    return g;
  }

  std::vector<SieveParams> sieve_grid(bool with_lambda) const {
    std::vector<SieveParams> g;
    for (auto b : sieve_basis)
      for (auto s : sieve_bandwidths) {
        if (!with_lambda) {
          g.push_back({b, s, 0.0});
          continue;
        }
        for (auto l : ulsif_lambdas) g.push_back({b, s, l});
      }
    return g;
  }
};

inline ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig c;
  c.replicates = 10;
  c.n0 = 2000;
  c.n_eval = 10000;
  std::string base = name;
  bool full = false;
  if (auto pos = name.rfind("-full"); pos != std::string::npos && pos + 5 == name.size()) {
    base = name.substr(0, pos);
    full = true;
  } else if (auto p2 = name.rfind("-desk"); p2 != std::string::npos && p2 + 5 == name.size()) {
    base = name.substr(0, p2);
  } else if (name != "smoke") {
    throw ConfigError("unknown preset '" + name + "'");
  }
  const std::vector<DivergenceTag> all{DivergenceTag::LeastSquares, DivergenceTag::KullbackLeibler,
                                       DivergenceTag::NegativeBinomial, DivergenceTag::ItakuraSaito};
  if (base == "ape") {
    c.estimand = Estimand::APE;
    c.dgp.treatment = TreatmentKind::Binary;
    c.learners = {LearnerKind::MLP_PS, LearnerKind::GBM_PS, LearnerKind::ULSIF, LearnerKind::KLIEP, LearnerKind::MLP,
                  LearnerKind::GBM};
    c.divergences = all;
  } else if (base == "ase") {
    c.estimand = Estimand::ASE;
    c.learners = {LearnerKind::KDE, LearnerKind::ULSIF, LearnerKind::KLIEP, LearnerKind::MLP, LearnerKind::GBM};
    c.divergences = all;
  } else if (base == "sw") {
    c.estimand = Estimand::SW;
    c.learners = {LearnerKind::KDE, LearnerKind::MLP, LearnerKind::GBM, LearnerKind::MLP_TT};
    c.divergences = all;
    c.schemes = {SamplingKind::WithReplacement, SamplingKind::MPermutation, SamplingKind::MDerangement};
    c.multipliers = {1, 2, 5, 10};
  } else if (name == "smoke") {
    c.estimand = Estimand::SW;
    c.learners = {LearnerKind::KDE, LearnerKind::MLP, LearnerKind::GBM, LearnerKind::MLP_TT};
    c.divergences = {DivergenceTag::NegativeBinomial, DivergenceTag::KullbackLeibler};
    c.schemes = {SamplingKind::WithReplacement, SamplingKind::MPermutation};
    c.multipliers = {1, 2};
    c.n0 = 200;
    c.n_eval = 500;
    c.replicates = 2;
    c.dgp.p = 5;
    c.mlp.max_epochs = 5;
    c.mlp_depths = {2};
    c.mlp_widths = {8};
    c.gbm.max_trees = 20;
    c.gbm_depths = {3};
    c.gbm_rates = {1e-1};
    c.gbm_bagging = {1.0};
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  if (full) c.replicates = 100;
  c.output_dir = "results/" + name;
  return c;
}

inline void apply_config(ExperimentConfig& c, const ConfigFile& f) {
  for (const auto& key : f.keys()) {
    const std::string& v = f.get(key);
    auto list = [&] { return ConfigFile::split_list(v); };
    if (key == "experiment.preset") {
      continue;  // resolved by load_experiment_config
    } else if (key == "experiment.estimand") {
      try {
        c.estimand = parse_estimand(v);
      } catch (const ValidationError& e) {
        throw ConfigError(e.what());
      }
      c.dgp.treatment = c.estimand == Estimand::APE ? TreatmentKind::Binary : TreatmentKind::Continuous;
    } else if (key == "experiment.learners") {
      c.learners.clear();
      for (const auto& s : list()) c.learners.push_back(parse_learner(s));
    } else if (key == "experiment.divergences") {
      c.divergences.clear();
      try {
        for (const auto& s : list()) c.divergences.push_back(parse_divergence(s).tag);
      } catch (const ValidationError& e) {
        throw ConfigError(e.what());
      }
    } else if (key == "experiment.schemes") {
      c.schemes.clear();
      try {
        for (const auto& s : list()) c.schemes.push_back(parse_sampling_kind(s));
      } catch (const ValidationError& e) {
        throw ConfigError(e.what());
      }
    } else if (key == "experiment.multipliers") {
      c.multipliers = parse_size_list(key, v);
    } else if (key == "experiment.n0") {
      c.n0 = parse_unsigned(key, v);
    } else if (key == "experiment.n_eval") {
      c.n_eval = parse_unsigned(key, v);
    } else if (key == "experiment.replicates") {
      c.replicates = parse_unsigned(key, v);
    } else if (key == "experiment.seed") {
      c.seed = parse_unsigned(key, v);
    } else if (key == "experiment.output") {
      c.output_dir = v;
    } else if (key == "experiment.workers") {
      c.workers = parse_unsigned(key, v);
    } else if (key == "experiment.record_runtime") {
      c.record_runtime = parse_bool(key, v);
    } else if (key == "experiment.train_fraction") {
      c.train_fraction = parse_real(key, v);
    } else if (key == "dgp.p") {
      c.dgp.p = parse_unsigned(key, v);
    } else if (key == "dgp.c") {
      c.dgp.c = parse_real(key, v);
    } else if (key == "dgp.shift") {
      c.dgp.shift = parse_real(key, v);
    } else if (key == "mlp.depths") {
      c.mlp_depths = parse_size_list(key, v);
    } else if (key == "mlp.widths") {
      c.mlp_widths = parse_size_list(key, v);
    } else if (key == "mlp.batch_size") {
      c.mlp.batch_size = parse_unsigned(key, v);
    } else if (key == "mlp.learning_rate") {
      c.mlp.learning_rate = parse_real(key, v);
    } else if (key == "mlp.max_epochs") {
      c.mlp.max_epochs = parse_unsigned(key, v);
    } else if (key == "mlp.patience") {
      c.mlp.patience = parse_unsigned(key, v);
    } else if (key == "gbm.depths") {
      c.gbm_depths = parse_size_list(key, v);
    } else if (key == "gbm.learning_rates") {
      c.gbm_rates = parse_real_list(key, v);
    } else if (key == "gbm.bagging") {
      c.gbm_bagging = parse_real_list(key, v);
    } else if (key == "gbm.max_trees") {
      c.gbm.max_trees = parse_unsigned(key, v);
    } else if (key == "gbm.patience") {
      c.gbm.patience = parse_unsigned(key, v);
    } else if (key == "gbm.max_leaves") {
      c.gbm.max_leaves = parse_unsigned(key, v);
    } else if (key == "gbm.min_leaf_rows") {
      c.gbm.min_leaf_rows = parse_unsigned(key, v);
    } else if (key == "gbm.min_leaf_hessian") {
      c.gbm.min_leaf_hessian = parse_real(key, v);
    } else if (key == "gbm.damping") {
      c.gbm.damping = parse_real(key, v);
    } else if (key == "gbm.max_bins") {
      c.gbm.max_bins = parse_unsigned(key, v);
    } else if (key == "sieve.basis") {
      c.sieve_basis = parse_size_list(key, v);
    } else if (key == "sieve.bandwidths") {
      c.sieve_bandwidths = parse_real_list(key, v);
    } else if (key == "sieve.lambdas") {
      c.ulsif_lambdas = parse_real_list(key, v);
    } else if (key == "sieve.kliep_max_iterations") {
      c.kliep.max_iterations = parse_unsigned(key, v);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
}

/// Preset (from the file's experiment.preset or `preset`), then file values.
inline ExperimentConfig load_experiment_config(const ConfigFile& f, const std::string& preset = {}) {
  std::string name = preset;
  if (name.empty() && f.has("experiment.preset")) name = f.get("experiment.preset");
  ExperimentConfig c = name.empty() ? ExperimentConfig{} : preset_config(name);
  apply_config(c, f);
  c.validate();
  return c;
}

/// Resolved settings in the config grammar, including fixed choices that a
/// rerun needs (activation, initialization).
inline std::string describe_config(const ExperimentConfig& c) {
  std::ostringstream o;
  auto join = [](const auto& v, auto fmt) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
    return s;
  };
  auto num = [](double x) { return format_double(x); };
  auto sz = [](std::size_t x) { return std::to_string(x); };
  o << "[experiment]\n"
    << "estimand = " << to_string(c.estimand) << "\n"
    << "learners = " << join(c.learners, [](LearnerKind k) { return to_string(k); }) << "\n"
    << "divergences = " << join(c.divergences, [](DivergenceTag t) { return divergence_name(t); }) << "\n"
    << "schemes = " << join(c.schemes, [](SamplingKind k) { return to_string(k); }) << "\n"
    << "multipliers = " << join(c.multipliers, sz) << "\n"
    << "n0 = " << c.n0 << "\nn_eval = " << c.n_eval << "\nreplicates = " << c.replicates << "\nseed = " << c.seed
    << "\ntrain_fraction = " << num(c.train_fraction) << "\nrecord_runtime = " << (c.record_runtime ? "true" : "false")
    << "\n\n[dgp]\np = " << c.dgp.p << "\nc = " << num(c.dgp.c) << "\nshift = " << num(c.dgp.shift) << "\n\n[mlp]\n"
    << "# activation softplus; initialization uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); optimizer adam\n"
    << "depths = " << join(c.mlp_depths, sz) << "\nwidths = " << join(c.mlp_widths, sz)
    << "\nbatch_size = " << c.mlp.batch_size << "\nlearning_rate = " << num(c.mlp.learning_rate)
    << "\nmax_epochs = " << c.mlp.max_epochs << "\npatience = " << c.mlp.patience << "\n\n[gbm]\n"
    << "depths = " << join(c.gbm_depths, sz) << "\nlearning_rates = " << join(c.gbm_rates, num)
    << "\nbagging = " << join(c.gbm_bagging, num) << "\nmax_trees = " << c.gbm.max_trees
    << "\npatience = " << c.gbm.patience << "\nmax_leaves = " << c.gbm.max_leaves
    << "\nmin_leaf_rows = " << c.gbm.min_leaf_rows << "\nmin_leaf_hessian = " << num(c.gbm.min_leaf_hessian)
    << "\ndamping = " << num(c.gbm.damping) << "\nmax_bins = " << c.gbm.max_bins << "\n\n[sieve]\n"
    << "basis = " << join(c.sieve_basis, sz) << "\nbandwidths = " << join(c.sieve_bandwidths, num)
    << "\nlambdas = " << join(c.ulsif_lambdas, num) << "\nkliep_max_iterations = " << c.kliep.max_iterations << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Cells

struct CellKey {
  std::size_t replicate = 0;
  LearnerKind learner = LearnerKind::MLP;
  std::string divergence;  // "LS" ... or "none" / "BCE" for learners without a choice
  std::string scheme;      // sampling kind name, or "none" outside the stabilized-weight estimand
  std::size_t m = 1;
};

/// Cells in output order. Learners without a divergence choice (kde, ulsif,
/// kliep, propensity baselines) contribute one divergence label; kde also
/// ignores the sampling scheme.
inline std::vector<CellKey> enumerate_cells(const ExperimentConfig& c) {
  std::vector<CellKey> cells;
  for (std::size_t r = 0; r < c.replicates; ++r)
    for (auto l : c.learners) {
      std::vector<std::string> divs;
      switch (l) {
        case LearnerKind::KDE: divs = {"none"}; break;
        case LearnerKind::ULSIF: divs = {"LS"}; break;
        case LearnerKind::KLIEP: divs = {"KL"}; break;
        case LearnerKind::MLP_PS:
        case LearnerKind::GBM_PS: divs = {"BCE"}; break;
        default:
          for (auto t : c.divergences) divs.push_back(divergence_name(t));
      }
      for (const auto& d : divs) {
        if (c.estimand != Estimand::SW || l == LearnerKind::KDE) {
          cells.push_back({r, l, d, "none", 1});
          continue;
        }
        for (auto s : c.schemes) {
          const SamplingKind k = l == LearnerKind::MLP_TT ? train_time_counterpart(s) : s;
          for (auto m : c.multipliers) cells.push_back({r, l, d, to_string(k), m});
        }
      }
    }
  return cells;
}

struct ReplicateData {
  FeatureMatrix full;
  FeatureMatrix train_rows;
  FeatureMatrix validation_rows;
  FeatureMatrix eval_x;
  std::vector<double> eval_y;
  std::vector<double> alpha0;
};

inline DgpSpec replicate_dgp(const ExperimentConfig& c, std::size_t replicate, std::string_view stream) {
  DgpSpec s = c.dgp;
  s.treatment = c.estimand == Estimand::APE ? TreatmentKind::Binary : TreatmentKind::Continuous;
  s.seed = mix_seed(c.seed, {static_cast<std::uint64_t>(replicate), hash_name(stream)});
  return s;
}

inline ReplicateData make_replicate(const ExperimentConfig& c, std::size_t replicate) {
  ReplicateData d;
  const DgpSpec train_spec = replicate_dgp(c, replicate, "data");
  d.full = simulate(train_spec, c.n0).features;
  const Split split = split_train_validation(
      c.n0, c.train_fraction, mix_seed(c.seed, {static_cast<std::uint64_t>(replicate), hash_name("split")}));
  d.train_rows = d.full.select_rows(split.train);
  d.validation_rows = d.full.select_rows(split.validation);
  const DgpSpec eval_spec = replicate_dgp(c, replicate, "eval");
  auto ev = simulate(eval_spec, c.n_eval);
  d.eval_x = std::move(ev.features);
  d.eval_y = std::move(ev.outcomes);
  d.alpha0 = oracle_ratio(c.estimand, eval_spec).predict(d.eval_x);
  return d;
}

namespace detail {

struct Problem {
  AugmentedDataset train;
  AugmentedDataset validation;
  std::function<std::shared_ptr<RatioModel>(std::shared_ptr<RatioModel>)> wrap;
};

inline int treat_all(std::span<const double>) { return 1; }

inline Problem make_problem(const ExperimentConfig& c, const ReplicateData& d, const CellKey& key) {
  Problem p;
  p.wrap = [](std::shared_ptr<RatioModel> m) { return m; };
  const std::uint64_t rep = key.replicate;
  switch (c.estimand) {
    case Estimand::APE: {
      const BinaryPolicy policy = treat_all;
      auto tr = augment_binary_policy(d.train_rows, kTreatmentCol, policy);
      auto va = augment_binary_policy(d.validation_rows, kTreatmentCol, policy);
      const double normalizer = augment_binary_policy(d.full, kTreatmentCol, policy).normalizer;
      p.train = build_augmented(tr.denominator, tr.numerator);
      p.validation = build_augmented(va.denominator, va.numerator);
      p.wrap = [policy, normalizer](std::shared_ptr<RatioModel> m) -> std::shared_ptr<RatioModel> {
        return std::make_shared<BinaryPolicyRatio>(std::move(m), kTreatmentCol, policy, normalizer);
      };
      break;
    }
    case Estimand::ASE: {
      const auto rule = shift_rule(c.dgp.shift);
      p.train = build_augmented(d.train_rows, augment_mtp(d.train_rows, kTreatmentCol, rule));
      p.validation = build_augmented(d.validation_rows, augment_mtp(d.validation_rows, kTreatmentCol, rule));
      break;
    }
    case Estimand::SW: {
      const SamplingKind kind = parse_sampling_kind(key.scheme);
      const SamplingKind fixed = fixed_counterpart(kind);
      // Augmentation draws depend on (replicate, scheme, m) only, so learners
      // in the same replicate see the same augmented samples.
      const std::uint64_t s_tr = mix_seed(c.seed, {rep, hash_name("augment-train"), hash_name(to_string(fixed)), key.m});
      const std::uint64_t s_va = mix_seed(c.seed, {rep, hash_name("augment-validation"), hash_name(to_string(fixed)), key.m});
      if (is_train_time(kind)) {
        p.train = build_augmented(d.train_rows, d.train_rows);
      } else {
        p.train = build_augmented(d.train_rows, augment_stabilized(d.train_rows, kTreatmentCol, {fixed, key.m}, s_tr));
      }
      p.validation =
          build_augmented(d.validation_rows, augment_stabilized(d.validation_rows, kTreatmentCol, {fixed, key.m}, s_va));
      break;
    }
  }
  return p;
}

}  // namespace detail

/// Fits the cell's learner and returns the learned ratio on X = (A, W).
inline std::shared_ptr<RatioModel> fit_cell_model(const ExperimentConfig& c, const ReplicateData& d,
                                                  const CellKey& key, std::string* note = nullptr) {
  const std::uint64_t fit_seed =
      mix_seed(c.seed, {static_cast<std::uint64_t>(key.replicate), hash_name(to_string(key.learner)),
                        hash_name(key.divergence), hash_name(key.scheme), static_cast<std::uint64_t>(key.m)});
  switch (key.learner) {
    case LearnerKind::KDE:
      return std::make_shared<KdeRatioModel>(d.full, c.estimand, KdeParams{c.dgp.shift, kTreatmentCol});
    case LearnerKind::MLP_PS:
    case LearnerKind::GBM_PS: {
      PropensityOptions po{c.mlp_grid(), c.gbm_grid()};
      const auto kind = key.learner == LearnerKind::MLP_PS ? PropensityLearner::MLP : PropensityLearner::GBM;
      return std::make_shared<PropensityRatio>(
          propensity_baseline(d.train_rows, d.validation_rows, kTreatmentCol, kind, fit_seed, po));
    }
    default: break;
  }
  detail::Problem p = detail::make_problem(c, d, key);
  std::shared_ptr<RatioModel> inner;
  switch (key.learner) {
    case LearnerKind::ULSIF: {
      const auto grid = c.sieve_grid(true);
      inner = std::make_shared<SieveModel>(
          hyperparameter_search(SieveMethod::ULSIF, grid, p.train, p.validation, fit_seed, c.kliep).model);
      break;
    }
    case LearnerKind::KLIEP: {
      const auto grid = c.sieve_grid(false);
      inner = std::make_shared<SieveModel>(
          hyperparameter_search(SieveMethod::KLIEP, grid, p.train, p.validation, fit_seed, c.kliep).model);
      break;
    }
    case LearnerKind::MLP:
    case LearnerKind::MLP_TT: {
      MlpFitOptions opt;
      if (key.learner == LearnerKind::MLP_TT) opt.train_time = TrainTimeSpec{parse_sampling_kind(key.scheme), kTreatmentCol};
      const auto grid = c.mlp_grid();
      auto fit = std::make_shared<MlpModel>(
          hyperparameter_search_mlp(grid, p.train, p.validation, parse_divergence(key.divergence), fit_seed, opt).model);
      if (note && fit->resample_fallbacks > 0)
        *note = std::to_string(fit->resample_fallbacks) + " train-time batch(es) fell back to with_replacement";
      inner = std::move(fit);
      break;
    }
    case LearnerKind::GBM: {
      const auto grid = c.gbm_grid();
      inner = std::make_shared<GbmModel>(
          hyperparameter_search_gbm(grid, p.train, p.validation, parse_divergence(key.divergence), fit_seed).model);
      break;
    }
    default: break;
  }
  return p.wrap(std::move(inner));
}

inline MetricsReport run_cell(const ExperimentConfig& c, const ReplicateData& d, const CellKey& key) {
  MetricsReport r;
  r.learner = to_string(key.learner);
  r.divergence = key.divergence;
  r.scheme = key.scheme;
  r.m = key.m;
  r.replicate = key.replicate;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    auto model = fit_cell_model(c, d, key, &r.note);
    const auto alpha = model->predict(d.eval_x);
    r.metrics = compute_metrics(alpha, d.alpha0, d.eval_y);
  } catch (const Error& e) {
    r.failed = true;
    r.failure = e.what();
  }
  if (c.record_runtime)
    r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Summary

struct SummaryRow {
  std::string learner, divergence, scheme;
  std::size_t m = 1;
  std::size_t replicates = 0;
  std::size_t failures = 0;
  double abs_bias = 0.0, mae = 0.0, rmse = 0.0;  // lower medians over successful replicates
  bool flagged = false;                           // more than half the replicates failed
};

/// Lower medians per (learner, divergence, scheme, m), sorted by absolute
/// bias, largest first; cells without a successful replicate go last.
inline std::vector<SummaryRow> summarize(const std::vector<MetricsReport>& reports) {
  std::vector<SummaryRow> rows;
  std::vector<std::vector<const MetricsReport*>> groups;
  for (const auto& r : reports) {
    std::size_t k = 0;
    for (; k < rows.size(); ++k)
      if (rows[k].learner == r.learner && rows[k].divergence == r.divergence && rows[k].scheme == r.scheme &&
          rows[k].m == r.m)
        break;
    if (k == rows.size()) {
      SummaryRow s;
      s.learner = r.learner;
      s.divergence = r.divergence;
      s.scheme = r.scheme;
      s.m = r.m;
      rows.push_back(s);
      groups.emplace_back();
    }
    groups[k].push_back(&r);
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::vector<double> ab, mae, rmse;
    for (const auto* r : groups[k]) {
      ++rows[k].replicates;
      if (r->failed) {
        ++rows[k].failures;
        continue;
      }
      ab.push_back(r->metrics.abs_bias);
      mae.push_back(r->metrics.mae);
      rmse.push_back(r->metrics.rmse);
    }
    rows[k].flagged = 2 * rows[k].failures > rows[k].replicates;
    if (ab.empty()) {
      rows[k].abs_bias = rows[k].mae = rows[k].rmse = std::numeric_limits<double>::quiet_NaN();
    } else {
      rows[k].abs_bias = lower_median(ab);
      rows[k].mae = lower_median(mae);
      rows[k].rmse = lower_median(rmse);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SummaryRow& a, const SummaryRow& b) {
    const bool an = std::isnan(a.abs_bias), bn = std::isnan(b.abs_bias);
    if (an != bn) return bn;
    return !an && a.abs_bias > b.abs_bias;
  });
  return rows;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string s = "learner,divergence,scheme,m,replicates,failures,abs_bias,mae,rmse,flagged\n";
  for (const auto& r : rows)
    s += r.learner + "," + r.divergence + "," + r.scheme + "," + std::to_string(r.m) + "," +
         std::to_string(r.replicates) + "," + std::to_string(r.failures) + "," + format_double(r.abs_bias) + "," +
         format_double(r.mae) + "," + format_double(r.rmse) + "," + (r.flagged ? "yes" : "no") + "\n";
  return s;
}

inline std::string summary_table(const std::vector<SummaryRow>& rows) {
  std::ostringstream o;
  o << std::left << std::setw(8) << "learner" << std::setw(6) << "div" << std::setw(20) << "scheme" << std::setw(4)
    << "m" << std::right << std::setw(12) << "AB" << std::setw(12) << "MAE" << std::setw(12) << "RMSE"
    << std::setw(7) << "fail" << "\n";
  o << std::setprecision(4);
  for (const auto& r : rows) {
    o << std::left << std::setw(8) << r.learner << std::setw(6) << r.divergence << std::setw(20) << r.scheme
      << std::setw(4) << r.m << std::right << std::setw(12) << r.abs_bias << std::setw(12) << r.mae << std::setw(12)
      << r.rmse << std::setw(4) << r.failures << "/" << r.replicates << (r.flagged ? " !" : "") << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Runner

struct ExperimentResult {
  std::vector<MetricsReport> reports;  // in enumerate_cells order
  std::vector<SummaryRow> summary;
  std::size_t flagged_cells = 0;

  int exit_code() const { return flagged_cells > 0 ? 2 : 0; }
};

inline std::string results_csv(const std::vector<MetricsReport>& reports) {
  std::string s = csv_header() + "\n";
  for (const auto& r : reports) s += to_csv_row(r) + "\n";
  return s;
}

using ProgressFn = std::function<void(const MetricsReport&, std::size_t done, std::size_t total)>;

/// Runs every cell; replicates are processed in order and the cells of a
/// replicate are spread over `workers` threads. Output order does not depend
/// on scheduling.
inline ExperimentResult run_experiment(const ExperimentConfig& c, const ProgressFn& progress = {}) {
  c.validate();
  const auto cells = enumerate_cells(c);
  ExperimentResult out;
  out.reports.resize(cells.size());
  std::size_t done = 0;
  std::mutex mu;
  std::size_t begin = 0;
  while (begin < cells.size()) {
    const std::size_t rep = cells[begin].replicate;
    std::size_t end = begin;
    while (end < cells.size() && cells[end].replicate == rep) ++end;
    const ReplicateData data = make_replicate(c, rep);
    std::atomic<std::size_t> next{begin};
    auto worker = [&] {
      for (;;) {
        const std::size_t k = next.fetch_add(1);
        if (k >= end) return;
        MetricsReport r = run_cell(c, data, cells[k]);
        std::lock_guard<std::mutex> lock(mu);
        out.reports[k] = std::move(r);
        ++done;
        if (progress) progress(out.reports[k], done, cells.size());
      }
    };
    const std::size_t n_threads = std::min(c.workers, end - begin);
    if (n_threads <= 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    begin = end;
  }
  out.summary = summarize(out.reports);
  for (const auto& s : out.summary) out.flagged_cells += s.flagged ? 1 : 0;
  return out;
}

/// Writes results.csv, summary.csv and config_used.txt into the output directory.
inline void write_outputs(const ExperimentConfig& c, const ExperimentResult& r) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(c.output_dir, ec);
  if (ec) throw Error("cannot create output directory '" + c.output_dir + "': " + ec.message());
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream f(fs::path(c.output_dir) / name, std::ios::binary);
    if (!f) throw Error("cannot write '" + name + "' in '" + c.output_dir + "'");
    f << body;
  };
  write("results.csv", results_csv(r.reports));
  write("summary.csv", summary_csv(r.summary));
  write("config_used.txt", describe_config(c));
}

}  // namespace brr
