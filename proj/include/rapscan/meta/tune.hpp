#pragma once

// Hyper-parameter search by repeated stratified K-fold cross-validation.
// Grid points are ranked by mean validation cross-entropy (lower wins),
// then by mean fold AUC (higher wins), then by grid order.

#include <limits>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rapscan/meta/classifier.hpp"
#include "rapscan/meta/metrics.hpp"
#include "rapscan/parallel.hpp"

namespace rapscan::meta {

struct PreprocessingChoice {
  Preprocessing kind = Preprocessing::None;
  int dim = 0;
  bool operator==(const PreprocessingChoice&) const = default;
};

struct ParamGrid {
  std::vector<int> n_trees{50, 200};
  std::vector<int> max_depth{2, 4, 0};
  std::vector<int> max_features{kMaxFeaturesSqrt, 0};
  std::vector<PreprocessingChoice> preprocessing{
      {Preprocessing::None, 0}, {Preprocessing::Pca, 5}, {Preprocessing::Rfe, 10}};
  std::vector<HistScale> scale{HistScale::Linear, HistScale::Log};
  int min_samples_leaf = 1;

  // Cartesian product; scale varies fastest, n_trees slowest.
  std::vector<MetaParams> expand() const {
    require(!n_trees.empty() && !max_depth.empty() && !max_features.empty() &&
                !preprocessing.empty() && !scale.empty(),
            "ParamGrid: every axis must be non-empty");
    std::vector<MetaParams> out;
    for (int nt : n_trees)
      for (int md : max_depth)
        for (int mf : max_features)
          for (const auto& pp : preprocessing)
            for (HistScale sc : scale) {
              MetaParams p;
              p.n_trees = nt;
              p.max_depth = md;
              p.max_features = mf;
              p.preprocessing = pp.kind;
              p.preprocessing_dim = pp.dim;
              p.scale = sc;
              p.min_samples_leaf = min_samples_leaf;
              out.push_back(p);
            }
    return out;
  }

  static ParamGrid single(const MetaParams& p) {
    ParamGrid g;
    g.n_trees = {p.n_trees};
    g.max_depth = {p.max_depth};
    g.max_features = {p.max_features};
    g.preprocessing = {{p.preprocessing, p.preprocessing_dim}};
    g.scale = {p.scale};
    g.min_samples_leaf = p.min_samples_leaf;
    return g;
  }
};

inline void to_json(json& j, const ParamGrid& g) {
  json mf = json::array(), md = json::array(), pp = json::array(), sc = json::array();
  for (int v : g.max_features)
    mf.push_back(v == kMaxFeaturesSqrt ? json("sqrt") : v <= 0 ? json("all") : json(v));
  for (int v : g.max_depth) md.push_back(v <= 0 ? json(nullptr) : json(v));
  for (const auto& p : g.preprocessing)
    pp.push_back(p.kind == Preprocessing::None
                     ? json("none")
                     : json(std::string(to_string(p.kind)) + "(" + std::to_string(p.dim) + ")"));
  for (auto s : g.scale) sc.push_back(to_string(s));
  j = json{{"n_trees", g.n_trees},      {"max_depth", md}, {"max_features", mf},
           {"preprocessing", pp},       {"scale", sc},     {"min_samples_leaf", g.min_samples_leaf}};
}

// Preprocessing entries are written "none", "pca(5)", "rfe(10)".
inline PreprocessingChoice preprocessing_choice_from_string(const std::string& s) {
  if (s == "none") return {Preprocessing::None, 0};
  const auto open = s.find('(');
  if (open == std::string::npos || s.back() != ')')
    throw ConfigError("preprocessing must look like none, pca(k) or rfe(m): '" + s + "'");
  PreprocessingChoice c;
  c.kind = preprocessing_from_string(s.substr(0, open));
  try {
    c.dim = std::stoi(s.substr(open + 1, s.size() - open - 2));
  } catch (const std::exception&) {
    throw ConfigError("bad preprocessing dimension in '" + s + "'");
  }
  if (c.dim < 1) throw ConfigError("preprocessing dimension must be >= 1");
  return c;
}

inline void from_json(const json& j, ParamGrid& g) {
  ParamGrid d;
  g = d;
  if (j.contains("n_trees")) g.n_trees = j.at("n_trees").get<std::vector<int>>();
  if (j.contains("max_depth")) {
    g.max_depth.clear();
    for (const auto& v : j.at("max_depth")) g.max_depth.push_back(max_depth_from_json(v));
  }
  if (j.contains("max_features")) {
    g.max_features.clear();
    for (const auto& v : j.at("max_features")) g.max_features.push_back(max_features_from_json(v));
  }
  if (j.contains("preprocessing")) {
    g.preprocessing.clear();
    for (const auto& v : j.at("preprocessing"))
      g.preprocessing.push_back(preprocessing_choice_from_string(v.get<std::string>()));
  }
  if (j.contains("scale")) {
    g.scale.clear();
    for (const auto& v : j.at("scale")) g.scale.push_back(hist_scale_from_string(v.get<std::string>()));
  }
  g.min_samples_leaf = j.value("min_samples_leaf", d.min_samples_leaf);
}

struct CvConfig {
  int k = 4;
  int repeats = 5;
  ParamGrid grid;
  std::uint64_t seed = 0;
  int workers = 1;
};

inline void to_json(json& j, const CvConfig& c) {
  j = json{{"K", c.k}, {"repeats", c.repeats}, {"param_grid", c.grid}, {"seed", c.seed}};
}

inline void from_json(const json& j, CvConfig& c) {
  CvConfig d;
  c.k = j.value("K", d.k);
  c.repeats = j.value("repeats", d.repeats);
  c.grid = j.contains("param_grid") ? j.at("param_grid").get<ParamGrid>() : d.grid;
  c.seed = j.value("seed", d.seed);
  c.workers = j.value("workers", d.workers);
}

// Fold id per row. Each class is shuffled and dealt round-robin, continuing
// where the previous class stopped, so fold sizes differ by at most one and
// every fold's per-class count is within one of the global share.
inline std::vector<int> stratified_folds(std::span<const int> y, int k, Prng& rng) {
  require(k >= 2, "stratified_folds: K must be >= 2");
  require(static_cast<int>(y.size()) >= k, "stratified_folds: fewer rows than folds");
  std::vector<int> fold(y.size(), 0);
  int next = 0;
  for (int cls : {0, 1}) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == cls) idx.push_back(static_cast<int>(i));
    rng.shuffle(idx);
    for (int i : idx) {
      fold[i] = next;
      next = (next + 1) % k;
    }
  }
  return fold;
}

struct GridPointResult {
  MetaParams params;
  double mean_ce = std::numeric_limits<double>::infinity();
  double mean_auc = 0.0;
  int completed_folds = 0;
  // Out-of-fold predictions over all repeats, aligned with `oof_labels`.
  std::vector<double> oof_probs;
  std::vector<int> oof_labels;
};

struct TuneResult {
  MetaParams best;
  MetricsReport cv;
  std::vector<GridPointResult> points;
  std::size_t best_index = 0;
};

inline GridPointResult cross_validate(const FeatureRows& x, std::span<const int> y,
                                      const MetaParams& params, const CvConfig& cv) {
  GridPointResult res;
  res.params = params;
  double ce_sum = 0.0, auc_sum = 0.0;
  int auc_count = 0;
  for (int rep = 0; rep < cv.repeats; ++rep) {
    std::vector<int> folds;
    std::vector<bool> usable;
    // A split is redrawn (at most 5 times) while any fold leaves a
    // single-class training or validation set; afterwards only usable folds
    // are scored.
    for (int attempt = 0; attempt <= 5; ++attempt) {
      Prng rng(mix_seed(mix_seed(cv.seed, static_cast<std::uint64_t>(rep)), attempt));
      folds = stratified_folds(y, cv.k, rng);
      usable.assign(cv.k, true);
      bool all_ok = true;
      for (int f = 0; f < cv.k; ++f) {
        int tr[2] = {0, 0}, va[2] = {0, 0};
        for (std::size_t i = 0; i < y.size(); ++i) (folds[i] == f ? va : tr)[y[i]]++;
        usable[f] = tr[0] > 0 && tr[1] > 0 && va[0] + va[1] > 0;
        all_ok = all_ok && usable[f] && va[0] > 0 && va[1] > 0;
      }
      if (all_ok) break;
    }
    for (int f = 0; f < cv.k; ++f) {
      if (!usable[f]) continue;
      FeatureRows xtr, xva;
      std::vector<int> ytr, yva;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (folds[i] == f) {
          xva.push_back(x[i]);
          yva.push_back(y[i]);
        } else {
          xtr.push_back(x[i]);
          ytr.push_back(y[i]);
        }
      }
      const std::uint64_t fit_seed =
          mix_seed(mix_seed(cv.seed, 1000 + static_cast<std::uint64_t>(rep)), f);
      const MetaClassifier clf = MetaClassifier::fit(xtr, ytr, params, fit_seed);
      std::vector<double> p;
      double ce = 0.0;
      for (std::size_t i = 0; i < xva.size(); ++i) {
        p.push_back(clf.predict_proba(xva[i]));
        ce += binary_cross_entropy(yva[i], p.back());
        res.oof_probs.push_back(p.back());
        res.oof_labels.push_back(yva[i]);
      }
      ce_sum += ce / static_cast<double>(xva.size());
      if (const auto a = auc(yva, p)) {
        auc_sum += *a;
        ++auc_count;
      }
      ++res.completed_folds;
    }
  }
  if (res.completed_folds > 0) res.mean_ce = ce_sum / res.completed_folds;
  res.mean_auc = auc_count > 0 ? auc_sum / auc_count : 0.0;
  return res;
}

inline TuneResult tune(const FeatureRows& x, std::span<const int> y, const CvConfig& cv) {
  require(cv.k >= 2, "tune: K must be >= 2");
  require(cv.repeats >= 1, "tune: repeats must be >= 1");
  require(static_cast<int>(x.size()) >= cv.k, "tune: fewer rows than folds");
  require(x.size() == y.size(), "tune: X and y lengths differ");
  const auto grid = cv.grid.expand();
  TuneResult out;
  out.points.resize(grid.size());
  parallel_for(grid.size(), cv.workers,
               [&](std::size_t g) { out.points[g] = cross_validate(x, y, grid[g], cv); });
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g) {
    const auto& a = out.points[g];
    const auto& b = out.points[best];
    if (a.mean_ce < b.mean_ce || (a.mean_ce == b.mean_ce && a.mean_auc > b.mean_auc)) best = g;
  }
  out.best_index = best;
  out.best = grid[best];
  const auto& bp = out.points[best];
  require(!bp.oof_probs.empty(), "tune: no cross-validation fold could be scored");
  out.cv = compute_metrics(bp.oof_labels, bp.oof_probs);
  return out;
}

}  // namespace rapscan::meta
