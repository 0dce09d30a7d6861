#pragma once

// The complete meta-classifier: histogram scale, optional PCA or recursive
// feature elimination, and the forest. Persisted as one JSON document so a
// scan needs nothing but the file.

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapscan/meta/forest.hpp"
#include "rapscan/meta/pca.hpp"
#include "rapscan/signature.hpp"

namespace rapscan::meta {

enum class Preprocessing { None, Pca, Rfe };

inline std::string_view to_string(Preprocessing p) {
  switch (p) {
    case Preprocessing::None: return "none";
    case Preprocessing::Pca: return "pca";
    case Preprocessing::Rfe: return "rfe";
  }
  return "?";
}

inline Preprocessing preprocessing_from_string(std::string_view s) {
  if (s == "none") return Preprocessing::None;
  if (s == "pca") return Preprocessing::Pca;
  if (s == "rfe") return Preprocessing::Rfe;
  throw ConfigError("unknown preprocessing '" + std::string(s) + "'");
}

// max_features: 0 = all features, -1 = floor(sqrt(d)), k > 0 = k.
inline constexpr int kMaxFeaturesSqrt = -1;

struct MetaParams {
  int n_trees = 50;
  int max_depth = 0;
  int max_features = 0;
  Preprocessing preprocessing = Preprocessing::None;
  int preprocessing_dim = 0;  // k for pca, m for rfe
  HistScale scale = HistScale::Linear;
  int min_samples_leaf = 1;

  bool operator==(const MetaParams&) const = default;
};

inline void to_json(json& j, const MetaParams& p) {
  j = json{{"n_trees", p.n_trees},
           {"max_depth", p.max_depth <= 0 ? json(nullptr) : json(p.max_depth)},
           {"max_features", p.max_features == kMaxFeaturesSqrt ? json("sqrt")
                            : p.max_features <= 0              ? json("all")
                                                               : json(p.max_features)},
           {"preprocessing", to_string(p.preprocessing)},
           {"preprocessing_dim", p.preprocessing_dim},
           {"scale", to_string(p.scale)},
           {"min_samples_leaf", p.min_samples_leaf}};
}

inline int max_depth_from_json(const json& j) { return j.is_null() ? 0 : j.get<int>(); }

inline int max_features_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "sqrt") return kMaxFeaturesSqrt;
    if (s == "all") return 0;
    throw ConfigError("max_features must be 'sqrt', 'all' or an integer");
  }
  return j.get<int>();
}

inline void from_json(const json& j, MetaParams& p) {
  p.n_trees = j.at("n_trees").get<int>();
  p.max_depth = max_depth_from_json(j.at("max_depth"));
  p.max_features = max_features_from_json(j.at("max_features"));
  p.preprocessing = preprocessing_from_string(j.at("preprocessing").get<std::string>());
  p.preprocessing_dim = j.value("preprocessing_dim", 0);
  p.scale = hist_scale_from_string(j.at("scale").get<std::string>());
  p.min_samples_leaf = j.value("min_samples_leaf", 1);
}

// Rows are linear-scale signature features (counts / n_samples).
class MetaClassifier {
 public:
  MetaClassifier() = default;

  static MetaClassifier fit(const FeatureRows& linear_rows, std::span<const int> y,
                            const MetaParams& params, std::uint64_t seed) {
    require(!linear_rows.empty(), "MetaClassifier::fit: no rows");
    MetaClassifier c;
    c.params_ = params;
    c.n_inputs_ = static_cast<int>(linear_rows[0].size());
    FeatureRows x = c.scaled(linear_rows);
    const int n = static_cast<int>(x.size());
    const int d = c.n_inputs_;

    ForestConfig fc;
    fc.n_trees = params.n_trees;
    fc.max_depth = params.max_depth;
    fc.min_samples_leaf = params.min_samples_leaf;
    fc.seed = mix_seed(seed, 1);

    switch (params.preprocessing) {
      case Preprocessing::None:
        break;
      case Preprocessing::Pca: {
        // Requested k is clamped to what the training fold supports.
        const int k = std::clamp(params.preprocessing_dim, 1, std::max(1, std::min(n - 1, d)));
        c.pca_ = pca_fit(x, k);
        for (auto& row : x) row = pca_transform(*c.pca_, row);
        break;
      }
      case Preprocessing::Rfe: {
        const int m = std::clamp(params.preprocessing_dim, 1, d);
        ForestConfig rc = fc;
        rc.max_features = resolve(params.max_features, d);
        rc.seed = mix_seed(seed, 2);
        c.selected_ = rfe_select(x, y, m, rc);
        x = select_columns(x, *c.selected_);
        break;
      }
    }
    fc.max_features = resolve(params.max_features, static_cast<int>(x[0].size()));
    c.forest_ = forest_train(x, y, fc);
    return c;
  }

  double predict_proba(std::span<const double> linear_features) const {
    require(static_cast<int>(linear_features.size()) == n_inputs_,
            "MetaClassifier: feature dimension mismatch");
    std::vector<double> x = scaled_row(linear_features);
    if (pca_) x = pca_transform(*pca_, x);
    if (selected_) {
      std::vector<double> s;
      for (int c : *selected_) s.push_back(x[c]);
      x = std::move(s);
    }
    return meta::predict_proba(forest_, x);
  }

  const MetaParams& params() const { return params_; }
  const RandomForestModel& forest() const { return forest_; }
  int n_inputs() const { return n_inputs_; }

  friend void to_json(json& j, const MetaClassifier& c) {
    j = json{{"format", "rapscan-meta-classifier"},
             {"version", 1},
             {"params", c.params_},
             {"n_inputs", c.n_inputs_},
             {"forest", c.forest_}};
    j["pca"] = c.pca_ ? json(*c.pca_) : json(nullptr);
    j["selected_features"] = c.selected_ ? json(*c.selected_) : json(nullptr);
  }

  friend void from_json(const json& j, MetaClassifier& c) {
    if (j.value("format", std::string()) != "rapscan-meta-classifier")
      throw FormatError("not a meta-classifier file");
    c.params_ = j.at("params").get<MetaParams>();
    c.n_inputs_ = j.at("n_inputs").get<int>();
    c.forest_ = j.at("forest").get<RandomForestModel>();
    c.pca_.reset();
    c.selected_.reset();
    if (!j.at("pca").is_null()) c.pca_ = j.at("pca").get<PcaModel>();
    if (!j.at("selected_features").is_null())
      c.selected_ = j.at("selected_features").get<std::vector<int>>();
  }

 private:
  static int resolve(int max_features, int d) {
    return max_features == kMaxFeaturesSqrt ? sqrt_features(d) : resolve_max_features(max_features, d);
  }

  std::vector<double> scaled_row(std::span<const double> row) const {
    std::vector<double> out(row.begin(), row.end());
    if (params_.scale == HistScale::Log)
      for (double& v : out) v = log_scale(v);
    return out;
  }

  FeatureRows scaled(const FeatureRows& rows) const {
    FeatureRows out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(scaled_row(r));
    return out;
  }

  MetaParams params_;
  int n_inputs_ = 0;
  std::optional<PcaModel> pca_;
  std::optional<std::vector<int>> selected_;
  RandomForestModel forest_;
};

inline void save_classifier(const MetaClassifier& c, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path + "'");
  os << json(c).dump(1) << "\n";
}

inline MetaClassifier load_classifier(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read meta-classifier '" + path + "'");
  try {
    return json::parse(is).get<MetaClassifier>();
  } catch (const json::exception& e) {
    throw FormatError("malformed meta-classifier '" + path + "': " + e.what());
  }
}

}  // namespace rapscan::meta
