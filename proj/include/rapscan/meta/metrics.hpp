#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "rapscan/errors.hpp"

namespace rapscan::meta {

using json = nlohmann::json;

// Binary detection metrics. Label 1 = trojaned. confusion[label][pred].
struct MetricsReport {
  double accuracy = 0.0;
  double cross_entropy = 0.0;
  std::optional<double> auc;
  double frr = 0.0;  // benign models flagged / benign total
  double far = 0.0;  // trojaned models cleared / trojaned total
  std::array<std::array<std::int64_t, 2>, 2> confusion{};
  double threshold = 0.5;
  std::int64_t n = 0;
};

inline constexpr double kCeFloor = 1e-12;

inline double binary_cross_entropy(int y, double p) {
  const double q = y == 1 ? p : 1.0 - p;
  return -std::log(std::max(q, kCeFloor));
}

// Mann-Whitney form with midranks; equals the pairwise win rate with ties
// counted as one half. Empty when only one class is present.
inline std::optional<double> auc(std::span<const int> y, std::span<const double> scores) {
  require(y.size() == scores.size(), "auc: length mismatch");
  const std::size_t n = y.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Ranks are doubled so midranks stay integral.
  std::vector<std::int64_t> rank2(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const auto r2 = static_cast<std::int64_t>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
    i = j + 1;
  }
  std::int64_t n1 = 0, sum2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] == 1) {
      ++n1;
      sum2 += rank2[i];
    }
  }
  const std::int64_t n0 = static_cast<std::int64_t>(n) - n1;
  if (n0 == 0 || n1 == 0) return std::nullopt;
  // 2U = sum of doubled ranks - n1 (n1 + 1)
  const std::int64_t u2 = sum2 - n1 * (n1 + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n0 * n1));
}

inline MetricsReport compute_metrics(std::span<const int> y_true, std::span<const double> probs,
                                     double threshold = 0.5) {
  require(y_true.size() == probs.size(), "compute_metrics: length mismatch");
  require(!y_true.empty(), "compute_metrics: no samples");
  MetricsReport r;
  r.threshold = threshold;
  r.n = static_cast<std::int64_t>(y_true.size());
  double ce = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    require(y_true[i] == 0 || y_true[i] == 1, "compute_metrics: labels must be 0/1");
    require(probs[i] >= 0.0 && probs[i] <= 1.0, "compute_metrics: probability out of [0,1]");
    const int pred = probs[i] >= threshold ? 1 : 0;
    ++r.confusion[y_true[i]][pred];
    ce += binary_cross_entropy(y_true[i], probs[i]);
  }
  const auto& c = r.confusion;
  r.accuracy = static_cast<double>(c[0][0] + c[1][1]) / static_cast<double>(r.n);
  r.cross_entropy = ce / static_cast<double>(r.n);
  const std::int64_t benign = c[0][0] + c[0][1];
  const std::int64_t trojaned = c[1][0] + c[1][1];
  r.frr = benign == 0 ? 0.0 : static_cast<double>(c[0][1]) / static_cast<double>(benign);
  r.far = trojaned == 0 ? 0.0 : static_cast<double>(c[1][0]) / static_cast<double>(trojaned);
  r.auc = auc(y_true, probs);
  return r;
}

inline void to_json(json& j, const MetricsReport& r) {
  j = json{{"accuracy", r.accuracy},
           {"cross_entropy", r.cross_entropy},
           {"frr", r.frr},
           {"far", r.far},
           {"confusion", r.confusion},
           {"threshold", r.threshold},
           {"n", r.n}};
  j["auc"] = r.auc ? json(*r.auc) : json(nullptr);
}

}  // namespace rapscan::meta
