#include <cmath>

#include <gtest/gtest.h>

#include "rapscan/meta/classifier.hpp"
#include "rapscan/meta/metrics.hpp"
#include "rapscan/meta/pca.hpp"
#include "rapscan/meta/tune.hpp"
#include "support.hpp"

using namespace rapscan;
using namespace rapscan::meta;
using rapscan::testing::brute_force_auc;
using rapscan::testing::brute_force_cart;
using rapscan::testing::random_cart_dataset;
using rapscan::testing::same_structure;
using rapscan::testing::TempDir;

namespace {

// One informative feature plus noise; the informative one separates the
// classes with the given margin.
void noisy_dataset(Prng& rng, int n_pos, int n_neg, int d, int informative, double margin,
                   FeatureRows& x, std::vector<int>& y) {
  x.clear();
  y.clear();
  for (int i = 0; i < n_pos + n_neg; ++i) {
    const int label = i < n_pos ? 1 : 0;
    std::vector<double> row(d);
    for (double& v : row) v = rng.uniform();
    row[informative] = label ? margin + rng.uniform() : rng.uniform();
    x.push_back(row);
    y.push_back(label);
  }
}

double train_accuracy(const RandomForestModel& m, const FeatureRows& x, const std::vector<int>& y) {
  int hits = 0;
  for (std::size_t i = 0; i < x.size(); ++i) hits += (predict_proba(m, x[i]) >= 0.5) == (y[i] == 1);
  return static_cast<double>(hits) / x.size();
}

ForestConfig single_cart(int depth) {
  ForestConfig c;
  c.n_trees = 1;
  c.max_depth = depth;
  c.bootstrap = false;
  return c;
}

}  // namespace

TEST(Metrics, NineOneTwoEightConfusionExact) {
  std::vector<int> y;
  std::vector<double> p;
  auto add = [&](int label, double prob, int n) {
    for (int i = 0; i < n; ++i) {
      y.push_back(label);
      p.push_back(prob);
    }
  };
  add(0, 0.1, 9);
  add(0, 0.9, 1);
  add(1, 0.1, 2);
  add(1, 0.9, 8);
  const MetricsReport r = compute_metrics(y, p);
  EXPECT_EQ(r.accuracy, 0.85);
  EXPECT_EQ(r.frr, 0.10);
  EXPECT_EQ(r.far, 0.20);
  EXPECT_EQ(r.confusion[0][0], 9);
  EXPECT_EQ(r.confusion[0][1], 1);
  EXPECT_EQ(r.confusion[1][0], 2);
  EXPECT_EQ(r.confusion[1][1], 8);
  EXPECT_EQ(r.n, 20);
}

TEST(Metrics, CrossEntropyUsesFloor) {
  const std::vector<int> y{1, 0};
  const std::vector<double> p{0.0, 0.5};
  const auto r = compute_metrics(y, p);
  EXPECT_DOUBLE_EQ(r.cross_entropy, 0.5 * (-std::log(1e-12) + std::log(2.0)));
}

TEST(Metrics, SeparatedScoresGiveUnitAuc) {
  const std::vector<int> y{0, 0, 1, 1, 0, 1};
  const std::vector<double> p{0.1, 0.2, 0.8, 0.7, 0.3, 0.95};
  EXPECT_EQ(*auc(y, p), 1.0);
}

TEST(Metrics, AucMatchesPairwiseCount) {
  Prng r(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> y(50);
    std::vector<double> s(50);
    for (int i = 0; i < 50; ++i) {
      y[i] = i < 2 ? i : r.bernoulli(0.5);
      // Coarse scores force ties.
      s[i] = trial % 2 ? r.below_int(8) / 8.0 : r.uniform();
    }
    ASSERT_EQ(*auc(y, s), brute_force_auc(y, s)) << "trial " << trial;
  }
}

TEST(Metrics, AucInvariantUnderMonotoneTransform) {
  Prng r(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> y(40);
    std::vector<double> s(40), t(40);
    for (int i = 0; i < 40; ++i) {
      y[i] = i < 2 ? i : r.bernoulli(0.4);
      s[i] = r.below_int(10) / 10.0;
      t[i] = std::exp(3 * s[i]) - 7;
    }
    ASSERT_EQ(*auc(y, s), *auc(y, t));
  }
}

TEST(Metrics, SingleClassHasNoAuc) {
  const std::vector<int> y{1, 1, 1};
  const std::vector<double> p{0.2, 0.7, 0.9};
  const auto r = compute_metrics(y, p);
  EXPECT_FALSE(r.auc.has_value());
  EXPECT_NEAR(r.accuracy, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r.frr, 0.0);
}

TEST(Metrics, RatesInRangeAndCountsSum) {
  Prng r(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + r.below_int(30);
    std::vector<int> y(n);
    std::vector<double> p(n);
    for (int i = 0; i < n; ++i) {
      y[i] = r.bernoulli(0.5);
      p[i] = r.uniform();
    }
    const auto m = compute_metrics(y, p);
    for (double v : {m.accuracy, m.frr, m.far}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    ASSERT_EQ(m.confusion[0][0] + m.confusion[0][1] + m.confusion[1][0] + m.confusion[1][1], n);
  }
}

TEST(Forest, DepthTwoTreeMatchesExhaustiveCart) {
  Prng r(4);
  for (int trial = 0; trial < 100; ++trial) {
    FeatureRows x;
    std::vector<int> y;
    random_cart_dataset(r, x, y);
    const auto m = forest_train(x, y, single_cart(2));
    std::vector<int> rows(x.size());
    std::iota(rows.begin(), rows.end(), 0);
    const auto oracle = brute_force_cart(x, y, rows, 0, 2);
    std::string why;
    ASSERT_TRUE(same_structure(m.trees[0], 0, *oracle, why)) << "dataset " << trial << ": " << why;
  }
}

TEST(Forest, UnlimitedTreeMatchesExhaustiveCart) {
  Prng r(5);
  for (int trial = 0; trial < 50; ++trial) {
    FeatureRows x;
    std::vector<int> y;
    random_cart_dataset(r, x, y);
    const auto m = forest_train(x, y, single_cart(0));
    std::vector<int> rows(x.size());
    std::iota(rows.begin(), rows.end(), 0);
    const auto oracle = brute_force_cart(x, y, rows, 0, 1000);
    std::string why;
    ASSERT_TRUE(same_structure(m.trees[0], 0, *oracle, why)) << "dataset " << trial << ": " << why;
  }
}

TEST(Forest, SingleTreeShattersXor) {
  const FeatureRows x{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  const std::vector<int> y{0, 1, 1, 0};
  EXPECT_EQ(train_accuracy(forest_train(x, y, single_cart(0)), x, y), 1.0);
}

TEST(Forest, SameSeedIsBitIdentical) {
  Prng r(6);
  FeatureRows x;
  std::vector<int> y;
  noisy_dataset(r, 20, 20, 8, 3, 0.5, x, y);
  ForestConfig c;
  c.n_trees = 20;
  c.max_features = 3;
  c.seed = 11;
  EXPECT_EQ(json(forest_train(x, y, c)).dump(), json(forest_train(x, y, c)).dump());
  ForestConfig other = c;
  other.seed = 12;
  EXPECT_NE(json(forest_train(x, y, c)).dump(), json(forest_train(x, y, other)).dump());
}

TEST(Forest, AccuracyNonDecreasingInDepth) {
  Prng r(7);
  for (int trial = 0; trial < 20; ++trial) {
    FeatureRows x;
    std::vector<int> y;
    noisy_dataset(r, 25, 25, 5, trial % 5, 0.2, x, y);
    double prev = 0.0;
    for (int depth : {1, 2, 3, 4, 6, 8, 0}) {
      ForestConfig c = single_cart(depth);
      c.n_trees = 3;
      const double acc = train_accuracy(forest_train(x, y, c), x, y);
      ASSERT_GE(acc, prev) << "depth " << depth;
      prev = acc;
    }
  }
}

TEST(Forest, PredictProbaExamples) {
  RandomForestModel m;
  m.n_features = 1;
  Tree split;
  split.nodes = {{0, 0.5, 1, 2, 3, 5}, {-1, 0, -1, -1, 3, 1}, {-1, 0, -1, -1, 0, 4}};
  m.trees = {split};
  const std::vector<double> lo{0.2}, hi{0.9};
  EXPECT_EQ(predict_proba(m, lo), 0.25);
  EXPECT_EQ(predict_proba(m, hi), 1.0);
  Tree leaf;
  leaf.nodes = {{-1, 0, -1, -1, 4, 1}};
  Tree leaf2;
  leaf2.nodes = {{-1, 0, -1, -1, 2, 3}};
  m.trees = {leaf, leaf2};
  EXPECT_NEAR(predict_proba(m, lo), 0.4, 1e-15);
  const std::vector<double> wrong{0.1, 0.2};
  EXPECT_THROW(predict_proba(m, wrong), ContractViolation);
}

TEST(Forest, SingleClassRejected) {
  const FeatureRows x{{0}, {1}};
  const std::vector<int> y{1, 1};
  EXPECT_THROW(forest_train(x, y, ForestConfig{}), ContractViolation);
}

TEST(Forest, JsonRoundTripIsExact) {
  Prng r(8);
  FeatureRows x;
  std::vector<int> y;
  noisy_dataset(r, 15, 12, 6, 1, 0.3, x, y);
  ForestConfig c;
  c.n_trees = 7;
  c.max_depth = 3;
  c.seed = 5;
  const auto m = forest_train(x, y, c);
  EXPECT_EQ(json(m).get<RandomForestModel>(), m);
}

TEST(Pca, PointsOnLine) {
  FeatureRows x;
  for (int i = -5; i <= 5; ++i) x.push_back({1.0 * i, 2.0 * i});
  const auto m = pca_fit(x, 2);
  const double c0 = m.components(0, 0), c1 = m.components(0, 1);
  EXPECT_NEAR(std::abs(c0), 1 / std::sqrt(5.0), 1e-12);
  EXPECT_NEAR(std::abs(c1), 2 / std::sqrt(5.0), 1e-12);
  EXPECT_GT(c0 * c1, 0.0);
  EXPECT_NEAR(m.explained_variance[1], 0.0, 1e-12);
  EXPECT_GT(m.explained_variance[0], 0.0);
}

TEST(Pca, IsotropicCloudHasEqualVariances) {
  Prng r(9);
  FeatureRows x(10000, std::vector<double>(3));
  for (auto& row : x)
    for (double& v : row) v = r.normal();
  const auto m = pca_fit(x, 3);
  const auto [lo, hi] = std::minmax_element(m.explained_variance.begin(), m.explained_variance.end());
  EXPECT_LE(*hi, 1.1 * *lo);
}

TEST(Pca, MeanMapsToZero) {
  Prng r(10);
  FeatureRows x(30, std::vector<double>(5));
  for (auto& row : x)
    for (double& v : row) v = r.uniform(-3, 3);
  const auto m = pca_fit(x, 3);
  for (double v : pca_transform(m, m.mean)) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Pca, FullRankPreservesDistances) {
  Prng r(11);
  FeatureRows x(40, std::vector<double>(6));
  for (auto& row : x)
    for (double& v : row) v = r.uniform(-1, 1);
  const auto m = pca_fit(x, 6);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const auto a = pca_transform(m, x[i]), b = pca_transform(m, x[j]);
      double d0 = 0, d1 = 0;
      for (int k = 0; k < 6; ++k) {
        d0 += (x[i][k] - x[j][k]) * (x[i][k] - x[j][k]);
        d1 += (a[k] - b[k]) * (a[k] - b[k]);
      }
      worst = std::max(worst, std::abs(std::sqrt(d1) - std::sqrt(d0)) / std::sqrt(d0));
    }
  EXPECT_LE(worst, 1e-8);
}

TEST(Pca, TooManyComponentsRejected) {
  const FeatureRows x{{0, 1, 2}, {1, 1, 0}, {2, 0, 1}};
  EXPECT_THROW(pca_fit(x, 3), ContractViolation);
  EXPECT_THROW(pca_fit(x, 0), ContractViolation);
  EXPECT_THROW(pca_fit({{1.0, 2.0}}, 1), ContractViolation);
}

TEST(Rfe, FullTargetIsIdentity) {
  Prng r(12);
  FeatureRows x;
  std::vector<int> y;
  noisy_dataset(r, 10, 10, 7, 2, 0.5, x, y);
  ForestConfig c;
  c.n_trees = 10;
  EXPECT_EQ(rfe_select(x, y, 7, c), (std::vector<int>{0, 1, 2, 3, 4, 5, 6}));
  EXPECT_THROW(rfe_select(x, y, 8, c), ContractViolation);
  EXPECT_THROW(rfe_select(x, y, 0, c), ContractViolation);
}

TEST(Rfe, SeparatingFeatureSurvives) {
  int survived = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Prng r(100 + seed);
    FeatureRows x;
    std::vector<int> y;
    noisy_dataset(r, 30, 30, 20, 7, 1.0, x, y);
    ForestConfig c;
    c.n_trees = 50;
    c.max_features = 4;
    c.seed = seed;
    const auto keep = rfe_select(x, y, 3, c);
    ASSERT_EQ(keep.size(), 3u);
    ASSERT_TRUE(std::is_sorted(keep.begin(), keep.end()));
    ASSERT_EQ(std::adjacent_find(keep.begin(), keep.end()), keep.end());
    survived += std::find(keep.begin(), keep.end(), 7) != keep.end();
  }
  EXPECT_GE(survived, 19);
}

TEST(Folds, ClassRatioWithinOneOfGlobal) {
  Prng r(13);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + r.below_int(5);
    const int n = k + r.below_int(60);
    std::vector<int> y(n);
    for (int& v : y) v = r.bernoulli(0.3);
    const auto folds = stratified_folds(y, k, r);
    const int pos = static_cast<int>(std::count(y.begin(), y.end(), 1));
    std::vector<int> size(k, 0), fpos(k, 0);
    for (int i = 0; i < n; ++i) {
      size[folds[i]]++;
      fpos[folds[i]] += y[i];
    }
    for (int f = 0; f < k; ++f) {
      ASSERT_LE(std::abs(fpos[f] - pos / static_cast<double>(k)), 1.0);
      ASSERT_LE(std::abs((size[f] - fpos[f]) - (n - pos) / static_cast<double>(k)), 1.0);
    }
    ASSERT_LE(*std::max_element(size.begin(), size.end()) - *std::min_element(size.begin(), size.end()), 1);
  }
}

TEST(Tune, SingleGridPoint) {
  Prng r(14);
  FeatureRows x;
  std::vector<int> y;
  noisy_dataset(r, 6, 10, 30, 4, 0.3, x, y);
  MetaParams p;
  p.n_trees = 20;
  p.max_depth = 2;
  CvConfig cv;
  cv.grid = ParamGrid::single(p);
  cv.repeats = 2;
  const auto t = tune(x, y, cv);
  EXPECT_EQ(t.best, p);
  EXPECT_EQ(t.points.size(), 1u);
  EXPECT_EQ(t.best_index, 0u);
  EXPECT_EQ(t.cv.n, 32);
  EXPECT_EQ(t.points[0].completed_folds, 8);
}

TEST(Tune, SixteenRowTrainingSet) {
  Prng r(15);
  FeatureRows x;
  std::vector<int> y;
  noisy_dataset(r, 6, 10, 30, 4, 1.0, x, y);
  CvConfig cv;
  cv.grid.n_trees = {20};
  cv.repeats = 2;
  const auto t = tune(x, y, cv);
  EXPECT_EQ(t.points.size(), cv.grid.expand().size());
  for (const auto& p : t.points) EXPECT_EQ(p.completed_folds, 8);
  EXPECT_GE(*t.cv.auc, 0.9);
  for (const auto& p : t.points) EXPECT_GE(p.mean_ce, t.points[t.best_index].mean_ce);
}

TEST(Tune, DominantPointWins) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Prng r(200 + seed);
    FeatureRows x;
    std::vector<int> y;
    noisy_dataset(r, 12, 12, 10, 0, 1.0, x, y);
    CvConfig cv;
    cv.seed = seed;
    cv.repeats = 2;
    cv.grid.n_trees = {30};
    cv.grid.max_depth = {0};
    // One random candidate feature per node: mostly noise splits.
    cv.grid.max_features = {1, 0};
    cv.grid.preprocessing = {{Preprocessing::None, 0}};
    cv.grid.scale = {HistScale::Linear};
    const auto t = tune(x, y, cv);
    EXPECT_EQ(t.best.max_features, 0) << "seed " << seed;
  }
}

TEST(Tune, TooFewRowsRejected) {
  const FeatureRows x{{0.0}, {1.0}, {0.5}};
  const std::vector<int> y{0, 1, 0};
  EXPECT_THROW(tune(x, y, CvConfig{}), ContractViolation);
}

TEST(Classifier, PreprocessingVariantsPersistExactly) {
  TempDir dir("clf");
  Prng r(16);
  FeatureRows x;
  std::vector<int> y;
  noisy_dataset(r, 10, 10, 30, 5, 0.2, x, y);
  for (auto pp : {Preprocessing::None, Preprocessing::Pca, Preprocessing::Rfe})
    for (auto sc : {HistScale::Linear, HistScale::Log}) {
      MetaParams p;
      p.n_trees = 15;
      p.preprocessing = pp;
      p.preprocessing_dim = 5;
      p.scale = sc;
      p.max_features = kMaxFeaturesSqrt;
      const auto c = MetaClassifier::fit(x, y, p, 3);
      const auto path = (dir.path() / "c.json").string();
      save_classifier(c, path);
      const auto back = load_classifier(path);
      EXPECT_EQ(back.params(), p);
      for (const auto& row : x) {
        const double v = c.predict_proba(row);
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        ASSERT_EQ(back.predict_proba(row), v);
      }
    }
}

TEST(Classifier, DimensionMismatchRejected) {
  const FeatureRows x{{0, 1}, {1, 0}, {0, 0}, {1, 1}};
  const std::vector<int> y{0, 1, 0, 1};
  const auto c = MetaClassifier::fit(x, y, MetaParams{}, 1);
  const std::vector<double> bad{0.5};
  EXPECT_THROW(c.predict_proba(bad), ContractViolation);
}
