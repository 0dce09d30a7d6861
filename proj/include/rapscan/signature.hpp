#pragma once

// Histogram signatures of a model's deviation stream.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapscan/errors.hpp"
#include "rapscan/rap.hpp"
#include "rapscan/zoo.hpp"

namespace rapscan {

using json = nlohmann::json;

enum class HistScale { Linear, Log };
enum class ClipPolicy { ClipToEdgeBins, Drop };

inline std::string_view to_string(HistScale s) { return s == HistScale::Linear ? "linear" : "log"; }
inline HistScale hist_scale_from_string(std::string_view s) {
  if (s == "linear") return HistScale::Linear;
  if (s == "log") return HistScale::Log;
  throw ConfigError("unknown histogram scale '" + std::string(s) + "'");
}
inline std::string_view to_string(ClipPolicy p) {
  return p == ClipPolicy::ClipToEdgeBins ? "clip_to_edge_bins" : "drop";
}
inline ClipPolicy clip_policy_from_string(std::string_view s) {
  if (s == "clip_to_edge_bins") return ClipPolicy::ClipToEdgeBins;
  if (s == "drop") return ClipPolicy::Drop;
  throw ConfigError("unknown clip policy '" + std::string(s) + "'");
}

inline constexpr double kLogScaleGain = 1000.0;

struct HistConfig {
  int n_bins = 30;
  double lo = -0.2;
  double hi = 1.0;
  HistScale scale = HistScale::Linear;
  ClipPolicy clip_policy = ClipPolicy::ClipToEdgeBins;
  // Added to every deviation before binning. Zero outside of experiments
  // that simulate per-architecture shifts.
  double offset = 0.0;

  void validate() const {
    require(n_bins >= 2, "HistConfig: n_bins must be >= 2");
    require(lo < hi, "HistConfig: lo must be < hi");
  }

  bool operator==(const HistConfig&) const = default;
};

inline void to_json(json& j, const HistConfig& c) {
  j = json{{"n_bins", c.n_bins},
           {"range", {c.lo, c.hi}},
           {"scale", to_string(c.scale)},
           {"clip_policy", to_string(c.clip_policy)},
           {"offset", c.offset}};
}

inline void from_json(const json& j, HistConfig& c) {
  HistConfig d;
  c.n_bins = j.value("n_bins", d.n_bins);
  if (j.contains("range")) {
    c.lo = j.at("range").at(0).get<double>();
    c.hi = j.at("range").at(1).get<double>();
  } else {
    c.lo = d.lo;
    c.hi = d.hi;
  }
  c.scale = hist_scale_from_string(j.value("scale", std::string(to_string(d.scale))));
  c.clip_policy =
      clip_policy_from_string(j.value("clip_policy", std::string(to_string(d.clip_policy))));
  c.offset = j.value("offset", d.offset);
}

// Normalized bin mass under the requested scale: counts / n for linear,
// ln(1 + 1000 * counts / n) for log.
inline std::vector<double> scaled_features(std::span<const std::int64_t> counts,
                                           std::int64_t n_samples, HistScale scale) {
  std::vector<double> f(counts.size(), 0.0);
  if (n_samples <= 0) return f;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double p = static_cast<double>(counts[i]) / static_cast<double>(n_samples);
    f[i] = scale == HistScale::Linear ? p : std::log1p(kLogScaleGain * p);
  }
  return f;
}

inline double log_scale(double linear_feature) { return std::log1p(kLogScaleGain * linear_feature); }

struct SignatureHistogram {
  std::string model_id;
  HistConfig config;
  std::vector<double> bin_edges;
  std::vector<std::int64_t> counts;
  std::int64_t n_samples = 0;

  std::vector<double> feature_vector() const {
    return scaled_features(counts, n_samples, config.scale);
  }
  std::vector<double> feature_vector(HistScale scale) const {
    return scaled_features(counts, n_samples, scale);
  }

  bool operator==(const SignatureHistogram&) const = default;
};

inline std::vector<double> bin_edges(const HistConfig& cfg) {
  std::vector<double> e(cfg.n_bins + 1);
  const double width = (cfg.hi - cfg.lo) / cfg.n_bins;
  for (int i = 0; i < cfg.n_bins; ++i) e[i] = cfg.lo + i * width;
  e[cfg.n_bins] = cfg.hi;
  return e;
}

// Bin index under left-closed/right-open bins with the last bin closed, or
// -1 when `v` falls outside [lo, hi].
inline int bin_index(const std::vector<double>& edges, double v) {
  const int n = static_cast<int>(edges.size()) - 1;
  if (v < edges.front() || v > edges.back()) return -1;
  if (v == edges.back()) return n - 1;
  const double width = (edges.back() - edges.front()) / n;
  int i = static_cast<int>((v - edges.front()) / width);
  i = std::clamp(i, 0, n - 1);
  while (i > 0 && v < edges[i]) --i;
  while (i < n - 1 && v >= edges[i + 1]) ++i;
  return i;
}

inline SignatureHistogram build_histogram(std::span<const double> deviations,
                                          const HistConfig& cfg, std::string model_id = {}) {
  require(!deviations.empty(), "build_histogram: no deviations");
  cfg.validate();
  SignatureHistogram h;
  h.model_id = std::move(model_id);
  h.config = cfg;
  h.bin_edges = bin_edges(cfg);
  h.counts.assign(cfg.n_bins, 0);
  h.n_samples = static_cast<std::int64_t>(deviations.size());
  for (double raw : deviations) {
    require(std::isfinite(raw), "build_histogram: non-finite deviation");
    const double v = raw + cfg.offset;
    int i = bin_index(h.bin_edges, v);
    if (i < 0) {
      if (cfg.clip_policy == ClipPolicy::Drop) continue;
      i = v < cfg.lo ? 0 : cfg.n_bins - 1;
    }
    ++h.counts[i];
  }
  return h;
}

inline void to_json(json& j, const SignatureHistogram& h) {
  j = json{{"model_id", h.model_id},
           {"config", h.config},
           {"bin_edges", h.bin_edges},
           {"counts", h.counts},
           {"n_samples", h.n_samples}};
}

inline void from_json(const json& j, SignatureHistogram& h) {
  h.model_id = j.at("model_id").get<std::string>();
  h.config = j.at("config").get<HistConfig>();
  h.bin_edges = j.at("bin_edges").get<std::vector<double>>();
  h.counts = j.at("counts").get<std::vector<std::int64_t>>();
  h.n_samples = j.at("n_samples").get<std::int64_t>();
  if (static_cast<int>(h.counts.size()) != h.config.n_bins ||
      h.bin_edges.size() != h.counts.size() + 1)
    throw FormatError("signature file: bins do not match config");
}

inline void save_signature(const SignatureHistogram& h, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path + "'");
  os << json(h).dump(2) << "\n";
}

inline SignatureHistogram load_signature(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read signature '" + path + "'");
  try {
    return json::parse(is).get<SignatureHistogram>();
  } catch (const json::exception& e) {
    throw FormatError("malformed signature '" + path + "': " + e.what());
  }
}

struct ExtractedSignature {
  SignatureHistogram histogram;
  std::vector<DeviationRecord> deviations;
};

// Runs the task's deviation measurement over every sample and bins the
// results. NER contributes one value per windowed word.
inline ExtractedSignature extract_signature(ModelOracle& oracle,
                                            std::span<const TokenSequence> samples,
                                            const RapTrigger& trigger, const RapConfig& rap_cfg,
                                            const HistConfig& hist_cfg,
                                            const std::string& model_id = {}) {
  require(!samples.empty(), "extract_signature: no samples");
  ExtractedSignature out;
  std::vector<double> values;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto recs = deviations_for(oracle, samples[i], trigger, rap_cfg, model_id,
                               "s" + std::to_string(i));
    for (auto& r : recs) {
      values.push_back(r.value);
      out.deviations.push_back(std::move(r));
    }
  }
  out.histogram = build_histogram(values, hist_cfg, model_id);
  return out;
}

// Trigger generation followed by extraction, on the same clean samples.
inline ExtractedSignature signature_for(ModelOracle& oracle, std::span<const TokenSequence> samples,
                                        const RapConfig& rap_cfg, const HistConfig& hist_cfg,
                                        const std::string& model_id = {}) {
  const RapTrigger trigger = make_trigger(oracle, samples, rap_cfg);
  return extract_signature(oracle, samples, trigger, rap_cfg, hist_cfg, model_id);
}

// `base` followed by n_extra freshly synthesized clean samples.
inline Dataset augment_samples(const Dataset& base, const CorpusSpec& extra_spec, int n_extra) {
  require(n_extra >= 0, "augment_samples: negative n_extra");
  for (const auto& x : base)
    require(x.task == extra_spec.task, "augment_samples: task mismatch");
  Dataset out = base;
  if (n_extra == 0) return out;
  CorpusSpec spec = extra_spec;
  spec.n_samples = n_extra;
  Dataset extra = synth_corpus(spec);
  out.insert(out.end(), std::make_move_iterator(extra.begin()),
             std::make_move_iterator(extra.end()));
  return out;
}

inline double l1_distance(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "l1_distance: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

}  // namespace rapscan
