#pragma once

// Random forest of Gini CART trees for binary labels, with mean impurity
// decrease importances and recursive feature elimination on top.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "json.hpp"
#include "rapscan/errors.hpp"
#include "rapscan/numerics.hpp"

namespace rapscan::meta {

using json = nlohmann::json;
using FeatureRows = std::vector<std::vector<double>>;

struct ForestConfig {
  int n_trees = 50;
  int max_depth = 0;         // <= 0 means unlimited
  int max_features = 0;      // <= 0 means all features
  int min_samples_leaf = 1;
  bool bootstrap = true;
  std::uint64_t seed = 0;

  bool operator==(const ForestConfig&) const = default;
};

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  std::int64_t n0 = 0;
  std::int64_t n1 = 0;

  bool is_leaf() const { return feature < 0; }
  bool operator==(const TreeNode&) const = default;
};

struct Tree {
  std::vector<TreeNode> nodes;  // root at 0

  const TreeNode& leaf_for(std::span<const double> x) const {
    int i = 0;
    while (!nodes[i].is_leaf()) i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
    return nodes[i];
  }
  bool operator==(const Tree&) const = default;
};

struct RandomForestModel {
  ForestConfig config;
  int n_features = 0;
  std::vector<Tree> trees;
  // Mean impurity decrease per feature, averaged over trees.
  std::vector<double> importances;

  bool operator==(const RandomForestModel&) const = default;
};

namespace detail {

inline double gini(std::int64_t a, std::int64_t b) {
  const double n = static_cast<double>(a + b);
  if (n == 0) return 0.0;
  const double pa = a / n, pb = b / n;
  return 1.0 - pa * pa - pb * pb;
}

// Split quality (l0^2 + l1^2)/nl + (r0^2 + r1^2)/nr as an exact fraction;
// larger is better and is equivalent to lower weighted Gini impurity.
struct SplitScore {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static SplitScore of(std::int64_t l0, std::int64_t l1, std::int64_t r0, std::int64_t r1) {
    const std::int64_t nl = l0 + l1, nr = r0 + r1;
    return {(l0 * l0 + l1 * l1) * nr + (r0 * r0 + r1 * r1) * nl, nl * nr};
  }
  bool better_than(const SplitScore& o) const {
    return static_cast<__int128>(num) * o.den > static_cast<__int128>(o.num) * den;
  }
};

class TreeBuilder {
 public:
  TreeBuilder(const FeatureRows& x, std::span<const int> y, const ForestConfig& cfg,
              int max_features, Prng& rng, std::vector<double>& importance)
      : x_(x), y_(y), cfg_(cfg), max_features_(max_features), rng_(rng), importance_(importance) {
    d_ = static_cast<int>(x.at(0).size());
  }

  Tree build(std::vector<int> rows) {
    tree_.nodes.clear();
    grow(std::move(rows), 0);
    return std::move(tree_);
  }

 private:
  int grow(std::vector<int> rows, int depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    std::int64_t n0 = 0, n1 = 0;
    for (int r : rows) (y_[r] == 1 ? n1 : n0)++;
    tree_.nodes[id].n0 = n0;
    tree_.nodes[id].n1 = n1;
    const auto n = static_cast<std::int64_t>(rows.size());
    if (n0 == 0 || n1 == 0) return id;
    if (cfg_.max_depth > 0 && depth >= cfg_.max_depth) return id;
    if (n < 2 * cfg_.min_samples_leaf) return id;

    std::vector<int> features(d_);
    std::iota(features.begin(), features.end(), 0);
    if (max_features_ < d_) {
      for (int i = 0; i < max_features_; ++i)
        std::swap(features[i], features[i + rng_.below_int(d_ - i)]);
      features.resize(max_features_);
      std::sort(features.begin(), features.end());
    }

    bool found = false;
    SplitScore best;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<std::pair<double, int>> col(rows.size());
    for (int f : features) {
      for (std::size_t i = 0; i < rows.size(); ++i) col[i] = {x_[rows[i]][f], y_[rows[i]]};
      std::sort(col.begin(), col.end());
      std::int64_t l0 = 0, l1 = 0;
      for (std::size_t i = 0; i + 1 < col.size(); ++i) {
        (col[i].second == 1 ? l1 : l0)++;
        if (col[i].first == col[i + 1].first) continue;
        const std::int64_t nl = static_cast<std::int64_t>(i) + 1;
        if (nl < cfg_.min_samples_leaf || n - nl < cfg_.min_samples_leaf) continue;
        const SplitScore s = SplitScore::of(l0, l1, n0 - l0, n1 - l1);
        // Features and thresholds are visited in ascending order, so only a
        // strictly better score replaces the incumbent.
        if (!found || s.better_than(best)) {
          found = true;
          best = s;
          best_feature = f;
          double t = 0.5 * (col[i].first + col[i + 1].first);
          if (!(t < col[i + 1].first)) t = col[i].first;
          best_threshold = t;
        }
      }
    }
    if (!found) return id;

    std::vector<int> left, right;
    std::int64_t l0 = 0, l1 = 0;
    for (int r : rows) {
      if (x_[r][best_feature] <= best_threshold) {
        left.push_back(r);
        (y_[r] == 1 ? l1 : l0)++;
      } else {
        right.push_back(r);
      }
    }
    const double total = static_cast<double>(n);
    const double decrease = total * gini(n0, n1) -
                            static_cast<double>(left.size()) * gini(l0, l1) -
                            static_cast<double>(right.size()) * gini(n0 - l0, n1 - l1);
    importance_[best_feature] += decrease;

    tree_.nodes[id].feature = best_feature;
    tree_.nodes[id].threshold = best_threshold;
    const int l = grow(std::move(left), depth + 1);
    const int r = grow(std::move(right), depth + 1);
    tree_.nodes[id].left = l;
    tree_.nodes[id].right = r;
    return id;
  }

  const FeatureRows& x_;
  std::span<const int> y_;
  const ForestConfig& cfg_;
  int max_features_;
  Prng& rng_;
  std::vector<double>& importance_;
  int d_ = 0;
  Tree tree_;
};

inline void validate_training_set(const FeatureRows& x, std::span<const int> y) {
  require(x.size() == y.size(), "forest: X and y lengths differ");
  require(x.size() >= 2, "forest: need at least two rows");
  const std::size_t d = x[0].size();
  require(d >= 1, "forest: need at least one feature");
  bool has0 = false, has1 = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i].size() == d, "forest: ragged feature rows");
    require(y[i] == 0 || y[i] == 1, "forest: labels must be 0/1");
    has0 = has0 || y[i] == 0;
    has1 = has1 || y[i] == 1;
  }
  require(has0 && has1, "forest: training labels contain a single class");
}

}  // namespace detail

inline int resolve_max_features(int requested, int d) {
  return requested <= 0 || requested > d ? d : requested;
}

inline int sqrt_features(int d) {
  return std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(d)))));
}

inline RandomForestModel forest_train(const FeatureRows& x, std::span<const int> y,
                                      const ForestConfig& cfg) {
  detail::validate_training_set(x, y);
  require(cfg.n_trees >= 1, "forest: n_trees must be >= 1");
  require(cfg.min_samples_leaf >= 1, "forest: min_samples_leaf must be >= 1");
  RandomForestModel m;
  m.config = cfg;
  m.n_features = static_cast<int>(x[0].size());
  m.importances.assign(m.n_features, 0.0);
  const int mf = resolve_max_features(cfg.max_features, m.n_features);
  const int n = static_cast<int>(x.size());
  const Prng root(cfg.seed);
  for (int t = 0; t < cfg.n_trees; ++t) {
    Prng rng = root.split(static_cast<std::uint64_t>(t));
    std::vector<int> rows(n);
    if (cfg.bootstrap) {
      for (int& r : rows) r = rng.below_int(n);
    } else {
      std::iota(rows.begin(), rows.end(), 0);
    }
    std::vector<double> imp(m.n_features, 0.0);
    detail::TreeBuilder builder(x, y, cfg, mf, rng, imp);
    m.trees.push_back(builder.build(std::move(rows)));
    for (int f = 0; f < m.n_features; ++f) m.importances[f] += imp[f] / n;
  }
  for (double& v : m.importances) v /= cfg.n_trees;
  return m;
}

// Mean over trees of the class-1 frequency at the routed leaf.
inline double predict_proba(const RandomForestModel& m, std::span<const double> x) {
  require(static_cast<int>(x.size()) == m.n_features, "predict_proba: dimension mismatch");
  double s = 0.0;
  for (const auto& t : m.trees) {
    const TreeNode& leaf = t.leaf_for(x);
    s += static_cast<double>(leaf.n1) / static_cast<double>(leaf.n0 + leaf.n1);
  }
  return s / static_cast<double>(m.trees.size());
}

inline FeatureRows select_columns(const FeatureRows& x, std::span<const int> cols) {
  FeatureRows out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i].reserve(cols.size());
    for (int c : cols) out[i].push_back(x[i][c]);
  }
  return out;
}

// Recursive feature elimination: retrain, drop the ceil(10%) least important
// remaining features (ties: higher index first), stop at target_m. Returns
// ascending indices.
inline std::vector<int> rfe_select(const FeatureRows& x, std::span<const int> y, int target_m,
                                   const ForestConfig& cfg) {
  detail::validate_training_set(x, y);
  const int d = static_cast<int>(x[0].size());
  require(target_m >= 1, "rfe_select: target_m must be >= 1");
  require(target_m <= d, "rfe_select: target_m exceeds feature count");
  std::vector<int> keep(d);
  std::iota(keep.begin(), keep.end(), 0);
  int round = 0;
  while (static_cast<int>(keep.size()) > target_m) {
    ForestConfig c = cfg;
    c.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(round++));
    const RandomForestModel f = forest_train(select_columns(x, keep), y, c);
    const int remaining = static_cast<int>(keep.size());
    const int drop = std::min(remaining - target_m,
                              static_cast<int>(std::ceil(0.1 * static_cast<double>(remaining))));
    std::vector<int> order(remaining);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (f.importances[a] != f.importances[b]) return f.importances[a] < f.importances[b];
      return keep[a] > keep[b];
    });
    std::vector<bool> dropped(remaining, false);
    for (int k = 0; k < drop; ++k) dropped[order[k]] = true;
    std::vector<int> next;
    for (int i = 0; i < remaining; ++i)
      if (!dropped[i]) next.push_back(keep[i]);
    keep = std::move(next);
  }
  return keep;
}

inline void to_json(json& j, const ForestConfig& c) {
  j = json{{"n_trees", c.n_trees},
           {"max_depth", c.max_depth},
           {"max_features", c.max_features},
           {"min_samples_leaf", c.min_samples_leaf},
           {"bootstrap", c.bootstrap},
           {"seed", c.seed}};
}

inline void from_json(const json& j, ForestConfig& c) {
  c.n_trees = j.at("n_trees").get<int>();
  c.max_depth = j.at("max_depth").get<int>();
  c.max_features = j.at("max_features").get<int>();
  c.min_samples_leaf = j.at("min_samples_leaf").get<int>();
  c.bootstrap = j.at("bootstrap").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

// Nodes are stored compactly as [feature, threshold, left, right, n0, n1].
inline void to_json(json& j, const RandomForestModel& m) {
  json trees = json::array();
  for (const auto& t : m.trees) {
    json nodes = json::array();
    for (const auto& nd : t.nodes)
      nodes.push_back(json::array({nd.feature, nd.threshold, nd.left, nd.right, nd.n0, nd.n1}));
    trees.push_back(std::move(nodes));
  }
  j = json{{"config", m.config},
           {"n_features", m.n_features},
           {"importances", m.importances},
           {"trees", std::move(trees)}};
}

inline void from_json(const json& j, RandomForestModel& m) {
  m.config = j.at("config").get<ForestConfig>();
  m.n_features = j.at("n_features").get<int>();
  m.importances = j.at("importances").get<std::vector<double>>();
  m.trees.clear();
  for (const auto& jt : j.at("trees")) {
    Tree t;
    for (const auto& jn : jt) {
      TreeNode nd;
      nd.feature = jn.at(0).get<int>();
      nd.threshold = jn.at(1).get<double>();
      nd.left = jn.at(2).get<int>();
      nd.right = jn.at(3).get<int>();
      nd.n0 = jn.at(4).get<std::int64_t>();
      nd.n1 = jn.at(5).get<std::int64_t>();
      t.nodes.push_back(nd);
    }
    const int n_nodes = static_cast<int>(t.nodes.size());
    for (const auto& nd : t.nodes) {
      if (nd.is_leaf()) {
        if (nd.n0 + nd.n1 <= 0) throw FormatError("forest: empty leaf");
        continue;
      }
      if (nd.feature >= m.n_features || nd.left <= 0 || nd.right <= 0 || nd.left >= n_nodes ||
          nd.right >= n_nodes)
        throw FormatError("forest: malformed tree node");
    }
    if (t.nodes.empty()) throw FormatError("forest: empty tree");
    m.trees.push_back(std::move(t));
  }
  if (m.trees.empty()) throw FormatError("forest: no trees");
}

}  // namespace rapscan::meta
