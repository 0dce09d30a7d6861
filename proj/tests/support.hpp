#pragma once

// Shared fixtures and brute-force oracles for the unit and acceptance tests.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "rapscan/meta/forest.hpp"
#include "rapscan/numerics.hpp"
#include "rapscan/textmodel.hpp"
#include "rapscan/zoo.hpp"

namespace rapscan::testing {

namespace fs = std::filesystem;

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("rapscan-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Random model with non-zero biases so every parameter matters.
inline TinyTextModel random_model(ArchVariant arch, std::uint64_t seed, int n_words = 24,
                                  int sc_classes = 2, int ner_classes = 4) {
  const Vocab v = Vocab::standard(n_words);
  TinyTextModel m = TinyTextModel::create(arch, v, seed, 16, sc_classes, ner_classes);
  Prng rng = Prng(seed).split(fnv1a("test-biases"));
  for (DenseMatrix* b : {&m.w.b_rec, &m.w.sc_b, &m.w.ner_b, &m.w.qa_b})
    for (double& x : b->values()) x = 0.3 * rng.normal();
  return m;
}

// Random input over ordinary words. QA inputs get [CLS] q.. [SEP] c.. layout.
inline TokenSequence random_sequence(Task task, int len, const TinyTextModel& m, Prng& rng) {
  TokenSequence x;
  x.task = task;
  const int n_words = m.dims.vocab - kFirstWordId;
  auto word = [&] { return kFirstWordId + rng.below_int(n_words); };
  if (task == Task::QA) {
    x.ids.push_back(kClsId);
    const int q = std::max(1, len / 3);
    for (int i = 0; i < q; ++i) x.ids.push_back(word());
    x.ids.push_back(kSepId);
    while (x.length() < std::max(len, q + 3)) x.ids.push_back(word());
    return x;
  }
  for (int i = 0; i < len; ++i) x.ids.push_back(word());
  return x;
}

// Small zoo that trains in seconds: arch B, 600-sample SC corpus. Token-level
// tasks keep the full corpus their backdoor recipe needs.
inline ZooConfig small_zoo_config(Task task, int n_models, std::uint64_t seed) {
  ZooConfig c = zoo_config_for(task);
  c.n_models = n_models;
  c.n_validation = 0;
  if (task == Task::SC) c.corpus.n_samples = 600;
  if (task == Task::NER) c.corpus.n_classes = 4;
  c.seed = seed;
  c.corpus.seed = mix_seed(seed, 1);
  return c;
}

// ---- exhaustive CART oracle --------------------------------------------------

struct OracleNode {
  int feature = -1;
  double threshold = 0.0;
  std::int64_t n0 = 0, n1 = 0;
  std::unique_ptr<OracleNode> left, right;
};

// Depth-limited CART by brute force: every (feature, midpoint threshold) is
// scored from scratch; weighted Gini is compared as an exact fraction; ties
// go to the lowest feature, then the lowest threshold.
inline std::unique_ptr<OracleNode> brute_force_cart(const meta::FeatureRows& x, const std::vector<int>& y,
                                                    const std::vector<int>& rows, int depth,
                                                    int max_depth) {
  auto node = std::make_unique<OracleNode>();
  for (int r : rows) (y[r] ? node->n1 : node->n0)++;
  if (node->n0 == 0 || node->n1 == 0 || depth >= max_depth) return node;
  const int d = static_cast<int>(x[0].size());
  bool found = false;
  // Weighted impurity n_l*g_l + n_r*g_r = n - (l0^2+l1^2)/nl - (r0^2+r1^2)/nr;
  // minimizing it maximizes q = (l0^2+l1^2)/nl + (r0^2+r1^2)/nr.
  __int128 best_num = 0, best_den = 1;
  int best_f = -1;
  double best_t = 0.0;
  for (int f = 0; f < d; ++f) {
    std::vector<double> vals;
    for (int r : rows) vals.push_back(x[r][f]);
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
      double t = 0.5 * (vals[k] + vals[k + 1]);
      if (!(t < vals[k + 1])) t = vals[k];
      __int128 l0 = 0, l1 = 0, r0 = 0, r1 = 0;
      for (int r : rows) {
        const bool left = x[r][f] <= t;
        if (y[r]) (left ? l1 : r1)++;
        else (left ? l0 : r0)++;
      }
      const __int128 nl = l0 + l1, nr = r0 + r1;
      const __int128 num = (l0 * l0 + l1 * l1) * nr + (r0 * r0 + r1 * r1) * nl;
      const __int128 den = nl * nr;
      if (!found || num * best_den > best_num * den) {
        found = true;
        best_num = num;
        best_den = den;
        best_f = f;
        best_t = t;
      }
    }
  }
  if (!found) return node;
  node->feature = best_f;
  node->threshold = best_t;
  std::vector<int> lr, rr;
  for (int r : rows) (x[r][best_f] <= best_t ? lr : rr).push_back(r);
  node->left = brute_force_cart(x, y, lr, depth + 1, max_depth);
  node->right = brute_force_cart(x, y, rr, depth + 1, max_depth);
  return node;
}

inline bool same_structure(const meta::Tree& t, int i, const OracleNode& o, std::string& why) {
  const meta::TreeNode& n = t.nodes.at(i);
  if (n.n0 != o.n0 || n.n1 != o.n1) {
    why = "class counts differ at node " + std::to_string(i);
    return false;
  }
  if (n.feature != o.feature || (!n.is_leaf() && n.threshold != o.threshold)) {
    why = "split differs at node " + std::to_string(i) + ": (" + std::to_string(n.feature) + ", " +
          std::to_string(n.threshold) + ") vs (" + std::to_string(o.feature) + ", " +
          std::to_string(o.threshold) + ")";
    return false;
  }
  if (n.is_leaf()) return true;
  return same_structure(t, n.left, *o.left, why) && same_structure(t, n.right, *o.right, why);
}

// Small random binary-labelled dataset with integer-valued features so ties
// in values and scores are common. Both classes present.
inline void random_cart_dataset(Prng& rng, meta::FeatureRows& x, std::vector<int>& y) {
  const int d = 1 + rng.below_int(4);
  const int n = 4 + rng.below_int(27);
  for (;;) {
    x.assign(n, std::vector<double>(d));
    y.assign(n, 0);
    for (int i = 0; i < n; ++i) {
      for (int f = 0; f < d; ++f) x[i][f] = rng.below_int(6);
      y[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    if (std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0) return;
  }
}

// ---- pairwise AUC oracle -------------------------------------------------------

inline double brute_force_auc(const std::vector<int>& y, const std::vector<double>& s) {
  double wins = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        ++pairs;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / static_cast<double>(pairs);
}

// ---- linear-scan binning oracle -----------------------------------------------

// Walks the explicit edge list: bin k holds [e_k, e_{k+1}), the last bin is
// closed; out-of-range values clip to the edge bins or are dropped.
inline std::vector<std::int64_t> linear_scan_counts(const std::vector<double>& values,
                                                    const std::vector<double>& edges, bool clip) {
  const std::size_t nb = edges.size() - 1;
  std::vector<std::int64_t> counts(nb, 0);
  for (double v : values) {
    if (v < edges.front()) {
      if (clip) ++counts.front();
      continue;
    }
    if (v > edges.back()) {
      if (clip) ++counts.back();
      continue;
    }
    for (std::size_t k = 0; k < nb; ++k) {
      const bool last = k + 1 == nb;
      if (v >= edges[k] && (v < edges[k + 1] || (last && v <= edges[k + 1]))) {
        ++counts[k];
        break;
      }
    }
  }
  return counts;
}

// ---- central differences -------------------------------------------------------

// Per-coordinate relative error with an absolute floor for coordinates whose
// true value is numerically zero.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Gradient check against central differences on random small models.
inline constexpr ArchVariant kGradArchs[] = {ArchVariant::A, ArchVariant::B, ArchVariant::C};

// Random probability-linear loss touching a few output cells.
inline LossSpec random_loss(const TaskOutput& shape, Prng& rng) {
  LossSpec l;
  const int terms = 1 + rng.below_int(4);
  for (int k = 0; k < terms; ++k) {
    const int r = rng.below_int(static_cast<int>(shape.rows.size()));
    const int c = rng.below_int(static_cast<int>(shape.rows[r].size()));
    l.terms.push_back({r, c, rng.uniform(-1.0, 1.0)});
  }
  return l;
}

struct GradCase {
  TinyTextModel model;
  TokenSequence x;
  LossSpec loss;
  std::vector<double> embedding;
};

inline GradCase make_grad_case(Task task, int i) {
  Prng rng = Prng(1000 + i).split(fnv1a(std::string(to_string(task))));
  GradCase c;
  c.model = random_model(kGradArchs[i % 3], 500 + i);
  c.x = random_sequence(task, 3 + rng.below_int(8), c.model, rng);
  const int lo = task == Task::QA ? 1 : 0;
  const int hi = task == Task::QA ? c.x.separator() : c.x.length();
  c.x = insert_token(c.x, lo + rng.below_int(hi - lo + 1), kFirstReservedId);
  c.embedding.resize(c.model.dims.embed);
  for (double& v : c.embedding) v = 0.5 * rng.normal();
  c.loss = random_loss(forward(c.model, c.x), rng);
  return c;
}

inline double loss_at(const GradCase& c, const std::vector<double>& e) {
  TriggerInjection inj{kFirstReservedId, e, {}};
  for (int t = 0; t < c.x.length(); ++t)
    if (c.x.ids[t] == kFirstReservedId) inj.positions.push_back(t);
  return c.loss.evaluate(forward(c.model, c.x, &inj));
}

inline double max_fd_error(const GradCase& c) {
  const auto g = embedding_gradient(c.model, c.x, c.loss, kFirstReservedId, c.embedding);
  double worst = 0.0;
  const double step = 1e-5;
  for (std::size_t i = 0; i < c.embedding.size(); ++i) {
    auto up = c.embedding, down = c.embedding;
    up[i] += step;
    down[i] -= step;
    const double fd = (loss_at(c, up) - loss_at(c, down)) / (2 * step);
    worst = std::max(worst, relative_error(g[i], fd));
  }
  return worst;
}

}  // namespace rapscan::testing
