#pragma once

// Command implementations behind tools/rapscan. Each command takes a resolved
// RunConfig and writes its artifacts under the run's output directory:
//
//   <out>/zoo/<task>/<id>/model.bin, <out>/zoo/manifest.json
//   <out>/signatures/<id>.sig.json, <out>/signatures/<id>.deviations.jsonl
//   <out>/meta/<task>/<arch|all>.forest.json, <out>/meta/<task>/report.{json,csv}
//   <out>/reports/metrics.json, <out>/reports/ablation.csv
//   <out>/scans/<ref>.sig.json, <out>/scans/<ref>.report.json

#include <fnmatch.h>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapscan/errors.hpp"
#include "rapscan/meta/classifier.hpp"
#include "rapscan/meta/metrics.hpp"
#include "rapscan/meta/tune.hpp"
#include "rapscan/oracle.hpp"
#include "rapscan/rap.hpp"
#include "rapscan/signature.hpp"
#include "rapscan/zoo.hpp"

namespace rapscan::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitTransport = 3;
inline constexpr int kExitQualityGate = 4;

// Maps the library's error hierarchy onto process exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const TransportError*>(&e)) return kExitTransport;
  if (dynamic_cast<const QualityGateError*>(&e)) return kExitQualityGate;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const ContractViolation*>(&e) || dynamic_cast<const GenerationError*>(&e))
    return kExitConfig;
  return kExitFailure;
}

enum class ArchMode { Specific, Agnostic };

inline std::string_view to_string(ArchMode m) { return m == ArchMode::Specific ? "specific" : "agnostic"; }

inline ArchMode arch_mode_from_string(std::string_view s) {
  if (s == "specific") return ArchMode::Specific;
  if (s == "agnostic") return ArchMode::Agnostic;
  throw ConfigError("arch_mode must be 'specific' or 'agnostic'");
}

// The defender's clean samples: a few drawn like the models' own data, then
// topped up from a public corpus of the same domain.
struct SampleConfig {
  int n_samples = 1000;
  int n_provided = 40;
};

struct RunConfig {
  Task task = Task::SC;
  std::uint64_t seed = 0;
  fs::path out_dir = "rapscan-out";
  std::optional<fs::path> zoo_dir;
  ZooConfig zoo;
  SampleConfig samples;
  RapConfig rap;
  HistConfig hist;
  meta::CvConfig cv;
  ArchMode arch_mode = ArchMode::Specific;
  std::vector<int> ablation_sizes{40, 100, 200, 500, 1000};
  int workers = 1;

  fs::path zoo_path() const { return zoo_dir ? *zoo_dir : out_dir / "zoo"; }
  fs::path signature_dir() const { return out_dir / "signatures"; }
  fs::path meta_dir() const { return out_dir / "meta" / std::string(rapscan::to_string(task)); }
  fs::path reports_dir() const { return out_dir / "reports"; }

  // Every submodule seed is a function of the global seed.
  void derive_seeds() {
    zoo.task = task;
    zoo.corpus.task = task;
    zoo.seed = mix_seed(seed, fnv1a("zoo"));
    zoo.corpus.seed = mix_seed(seed, fnv1a("corpus"));
    rap.seed = mix_seed(seed, fnv1a("rap"));
    cv.seed = mix_seed(seed, fnv1a("cv"));
    zoo.workers = workers;
    cv.workers = workers;
  }

  void validate() const {
    rap.validate();
    hist.validate();
    if (samples.n_samples < 1) throw ConfigError("samples.n_samples must be >= 1");
    if (samples.n_provided < 0) throw ConfigError("samples.n_provided must be >= 0");
    if (cv.k < 2 || cv.repeats < 1) throw ConfigError("meta: K must be >= 2 and repeats >= 1");
    for (int n : ablation_sizes)
      if (n < 1) throw ConfigError("evaluate.ablation_sizes entries must be >= 1");
    cv.grid.expand();
  }
};

inline void to_json(json& j, const SampleConfig& s) {
  j = json{{"n_samples", s.n_samples}, {"n_provided", s.n_provided}};
}

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"task", rapscan::to_string(c.task)},
           {"seed", c.seed},
           {"out", c.out_dir.string()},
           {"arch_mode", to_string(c.arch_mode)},
           {"workers", c.workers},
           {"zoo", c.zoo},
           {"samples", c.samples},
           {"rap", c.rap},
           {"histogram", c.hist},
           {"meta", c.cv},
           {"evaluate", {{"ablation_sizes", c.ablation_sizes}}}};
  if (c.zoo_dir) j["zoo_dir"] = c.zoo_dir->string();
}

// Parses a run configuration. Task-dependent RAP defaults apply unless the
// file sets them; seeds inside sections are ignored in favour of the global
// seed.
inline RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  try {
    c.task = task_from_string(j.value("task", std::string("SC")));
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("out")) c.out_dir = j.at("out").get<std::string>();
    if (j.contains("zoo_dir")) c.zoo_dir = fs::path(j.at("zoo_dir").get<std::string>());
    c.arch_mode = arch_mode_from_string(j.value("arch_mode", std::string("specific")));
    c.workers = j.value("workers", 1);
    json zoo = j.value("zoo", json::object());
    zoo["task"] = rapscan::to_string(c.task);
    c.zoo = zoo.get<ZooConfig>();
    if (c.task == Task::NER && !(zoo.contains("corpus") && zoo["corpus"].contains("n_classes")))
      c.zoo.corpus.n_classes = 4;
    const json samples = j.value("samples", json::object());
    c.samples.n_samples = samples.value("n_samples", c.samples.n_samples);
    c.samples.n_provided = samples.value("n_provided", c.samples.n_provided);
    const json rap = j.value("rap", json::object());
    c.rap = rap.get<RapConfig>();
    if (!rap.contains("insert_position") && c.task == Task::NER)
      c.rap.insert_position = InsertPosition::Sliding;
    c.hist = j.value("histogram", json::object()).get<HistConfig>();
    c.cv = j.value("meta", json::object()).get<meta::CvConfig>();
    if (j.contains("evaluate"))
      c.ablation_sizes =
          j.at("evaluate").value("ablation_sizes", c.ablation_sizes);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(j);
}

// ---- samples ---------------------------------------------------------------

// The first n of a fixed pool, so smaller sample counts are prefixes of
// larger ones.
inline Dataset defender_samples(const RunConfig& cfg, int n) {
  require(n >= 1, "defender_samples: n must be >= 1");
  CorpusSpec provided = cfg.zoo.corpus;
  provided.seed = mix_seed(cfg.seed, fnv1a("samples-provided"));
  provided.n_samples = std::max(1, std::min(n, cfg.samples.n_provided));
  Dataset base = synth_corpus(provided);
  base.resize(std::min<std::size_t>(base.size(), static_cast<std::size_t>(n)));
  CorpusSpec pub = cfg.zoo.corpus;
  pub.seed = mix_seed(cfg.seed, fnv1a("samples-public"));
  return augment_samples(base, pub, n - static_cast<int>(base.size()));
}

inline json sample_to_json(const TokenSequence& x) {
  json j{{"task", rapscan::to_string(x.task)}, {"ids", x.ids}};
  if (x.label) j["label"] = *x.label;
  if (!x.token_labels.empty()) j["token_labels"] = x.token_labels;
  if (x.span) j["span"] = {x.span->start, x.span->end};
  return j;
}

inline TokenSequence sample_from_json(const json& j) {
  TokenSequence x;
  x.task = task_from_string(j.at("task").get<std::string>());
  x.ids = j.at("ids").get<std::vector<TokenId>>();
  if (j.contains("label")) x.label = j.at("label").get<int>();
  if (j.contains("token_labels")) x.token_labels = j.at("token_labels").get<std::vector<int>>();
  if (j.contains("span")) x.span = Span{j.at("span").at(0).get<int>(), j.at("span").at(1).get<int>()};
  return x;
}

inline void write_samples_jsonl(const fs::path& path, const Dataset& samples) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  for (const auto& x : samples) os << sample_to_json(x).dump() << "\n";
}

inline Dataset read_samples_jsonl(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read samples '" + path.string() + "'");
  Dataset out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError("bad sample line in '" + path.string() + "': " + e.what());
    }
  }
  if (out.empty()) throw ConfigError("no samples in '" + path.string() + "'");
  return out;
}

// ---- build-zoo -------------------------------------------------------------

inline ZooManifest cmd_build_zoo(const RunConfig& cfg, std::ostream& log) {
  ZooManifest m = build_zoo(cfg.zoo, cfg.zoo_path());
  int trojaned = 0;
  for (const auto& e : m.entries) trojaned += e.is_trojaned;
  log << "built " << m.entries.size() << " models (" << trojaned << " trojaned) in "
      << cfg.zoo_path().string() << "\n";
  return m;
}

inline ZooManifest load_zoo_manifest(const RunConfig& cfg) {
  const fs::path p = cfg.zoo_path() / "manifest.json";
  if (!fs::exists(p)) throw ConfigError("no zoo manifest at '" + p.string() + "'");
  return load_manifest(p);
}

inline bool matches_filter(const std::string& model_id, const std::string& glob) {
  return glob.empty() || ::fnmatch(glob.c_str(), model_id.c_str(), 0) == 0;
}

// ---- extract ---------------------------------------------------------------

inline fs::path signature_path(const RunConfig& cfg, const std::string& id) {
  return cfg.signature_dir() / (id + ".sig.json");
}

inline fs::path deviations_path(const RunConfig& cfg, const std::string& id) {
  return cfg.signature_dir() / (id + ".deviations.jsonl");
}

inline ExtractedSignature extract_for_entry(const RunConfig& cfg, const ZooEntry& e,
                                            const Dataset& samples,
                                            const HistConfig& hist) {
  const TinyTextModel model = load_model((cfg.zoo_path() / e.path).string());
  InProcessOracle oracle(model);
  return signature_for(oracle, samples, cfg.rap, hist, e.model_id);
}

// Returns the number of signatures written.
inline int cmd_extract(const RunConfig& cfg, const std::string& filter, std::ostream& log) {
  const ZooManifest m = load_zoo_manifest(cfg);
  std::vector<const ZooEntry*> selected;
  for (const auto& e : m.entries)
    if (matches_filter(e.model_id, filter)) selected.push_back(&e);
  if (selected.empty()) {
    log << "warning: filter '" << filter << "' matches no models\n";
    return 0;
  }
  const Dataset samples = defender_samples(cfg, cfg.samples.n_samples);
  fs::create_directories(cfg.signature_dir());
  parallel_for(selected.size(), cfg.workers, [&](std::size_t i) {
    const ZooEntry& e = *selected[i];
    const ExtractedSignature sig = extract_for_entry(cfg, e, samples, cfg.hist);
    save_signature(sig.histogram, signature_path(cfg, e.model_id).string());
    write_deviations_jsonl(deviations_path(cfg, e.model_id).string(), sig.deviations);
  });
  log << "extracted " << selected.size() << " signatures (" << rapscan::to_string(cfg.rap.mode)
      << " RAP, " << samples.size() << " samples) into " << cfg.signature_dir().string() << "\n";
  return static_cast<int>(selected.size());
}

// ---- train-meta ------------------------------------------------------------

// Entries of one classifier: a single arch in specific mode, everything in
// agnostic mode.
struct MetaGroup {
  std::string name;
  std::vector<const ZooEntry*> train;
  std::vector<const ZooEntry*> val;
};

inline std::vector<MetaGroup> meta_groups(const ZooManifest& m, ArchMode mode) {
  std::map<std::string, MetaGroup> groups;
  for (const auto& e : m.entries) {
    const std::string name = mode == ArchMode::Agnostic ? "all" : std::string(rapscan::to_string(e.arch));
    auto& g = groups[name];
    g.name = name;
    (e.split == "val" ? g.val : g.train).push_back(&e);
  }
  std::vector<MetaGroup> out;
  for (auto& [_, g] : groups) out.push_back(std::move(g));
  return out;
}

inline fs::path forest_path(const RunConfig& cfg, const std::string& group) {
  return cfg.meta_dir() / (group + ".forest.json");
}

struct GroupReport {
  std::string group;
  std::string forest;
  meta::MetaParams best;
  int n_train = 0;
  int n_val = 0;
  std::optional<meta::MetricsReport> val;
  meta::MetricsReport cross_val;
  meta::MetricsReport train;
};

struct TrainMetaReport {
  Task task = Task::SC;
  ArchMode arch_mode = ArchMode::Specific;
  std::vector<GroupReport> groups;
};

inline json metrics_block(const std::optional<meta::MetricsReport>& r) {
  if (!r) return json(nullptr);
  return json{{"Acc", r->accuracy},
              {"CE", r->cross_entropy},
              {"AUC", r->auc ? json(*r->auc) : json(nullptr)}};
}

inline void to_json(json& j, const TrainMetaReport& r) {
  json groups = json::array();
  for (const auto& g : r.groups)
    groups.push_back({{"group", g.group},
                      {"forest", g.forest},
                      {"best_params", g.best},
                      {"n_train", g.n_train},
                      {"n_val", g.n_val},
                      {"Val", metrics_block(g.val)},
                      {"CrossVal", metrics_block(g.cross_val)},
                      {"Train", metrics_block(g.train)},
                      {"val_detail", g.val ? json(*g.val) : json(nullptr)}});
  j = json{{"task", rapscan::to_string(r.task)},
           {"arch_mode", to_string(r.arch_mode)},
           {"columns", {"Val", "CrossVal", "Train"}},
           {"metrics", {"Acc", "CE", "AUC"}},
           {"groups", groups}};
}

inline std::string format_metric(const std::optional<meta::MetricsReport>& r, int which) {
  if (!r) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  if (which == 0) os << r->accuracy;
  if (which == 1) os << r->cross_entropy;
  if (which == 2) {
    if (!r->auc) return "-";
    os << *r->auc;
  }
  return os.str();
}

inline std::string report_csv(const TrainMetaReport& r) {
  std::ostringstream os;
  os << "group,Val_Acc,Val_CE,Val_AUC,CrossVal_Acc,CrossVal_CE,CrossVal_AUC,Train_Acc,Train_CE,Train_AUC\n";
  for (const auto& g : r.groups) {
    os << g.group;
    for (const auto& m : {g.val, std::optional(g.cross_val), std::optional(g.train)})
      for (int k = 0; k < 3; ++k) os << "," << format_metric(m, k);
    os << "\n";
  }
  return os.str();
}

inline void print_report_table(const TrainMetaReport& r, std::ostream& os) {
  os << std::left << std::setw(8) << "group";
  for (const char* col : {"Val", "CrossVal", "Train"})
    for (const char* m : {"Acc", "CE", "AUC"}) os << std::setw(14) << (std::string(col) + " " + m);
  os << "\n";
  for (const auto& g : r.groups) {
    os << std::setw(8) << g.group;
    for (const auto& m : {g.val, std::optional(g.cross_val), std::optional(g.train)})
      for (int k = 0; k < 3; ++k) os << std::setw(14) << format_metric(m, k);
    os << "\n";
  }
}

inline std::vector<double> load_features(const RunConfig& cfg, const ZooEntry& e) {
  const fs::path p = signature_path(cfg, e.model_id);
  if (!fs::exists(p)) throw ConfigError("missing signature for " + e.model_id + " (run extract)");
  return load_signature(p.string()).feature_vector(HistScale::Linear);
}

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  os << text;
}

// Tunes, fits and scores one classifier on in-memory feature rows.
struct FittedGroup {
  meta::TuneResult tuned;
  meta::MetaClassifier classifier;
  meta::MetricsReport train;
  std::optional<meta::MetricsReport> val;
};

inline FittedGroup fit_group(const meta::FeatureRows& xtr, const std::vector<int>& ytr,
                             const meta::FeatureRows& xva, const std::vector<int>& yva,
                             const meta::CvConfig& cv, std::uint64_t fit_seed) {
  bool has0 = false, has1 = false;
  for (int y : ytr) (y ? has1 : has0) = true;
  if (!has0 || !has1) throw ConfigError("training models of one group are all of one class");
  FittedGroup out;
  out.tuned = meta::tune(xtr, ytr, cv);
  out.classifier = meta::MetaClassifier::fit(xtr, ytr, out.tuned.best, fit_seed);
  std::vector<double> ptr, pva;
  for (const auto& x : xtr) ptr.push_back(out.classifier.predict_proba(x));
  for (const auto& x : xva) pva.push_back(out.classifier.predict_proba(x));
  out.train = meta::compute_metrics(ytr, ptr);
  if (!xva.empty()) out.val = meta::compute_metrics(yva, pva);
  return out;
}

inline TrainMetaReport cmd_train_meta(const RunConfig& cfg, std::ostream& log) {
  const ZooManifest m = load_zoo_manifest(cfg);
  TrainMetaReport report;
  report.task = cfg.task;
  report.arch_mode = cfg.arch_mode;
  for (const auto& g : meta_groups(m, cfg.arch_mode)) {
    if (g.train.empty()) throw ConfigError("group " + g.name + " has no training models");
    meta::FeatureRows xtr, xva;
    std::vector<int> ytr, yva;
    for (const auto* e : g.train) {
      xtr.push_back(load_features(cfg, *e));
      ytr.push_back(e->is_trojaned);
    }
    for (const auto* e : g.val) {
      xva.push_back(load_features(cfg, *e));
      yva.push_back(e->is_trojaned);
    }
    const FittedGroup fit =
        fit_group(xtr, ytr, xva, yva, cfg.cv, mix_seed(cfg.seed, fnv1a("meta-fit-" + g.name)));
    const fs::path out = forest_path(cfg, g.name);
    fs::create_directories(out.parent_path());
    meta::save_classifier(fit.classifier, out.string());
    GroupReport gr;
    gr.group = g.name;
    gr.forest = out.string();
    gr.best = fit.tuned.best;
    gr.n_train = static_cast<int>(xtr.size());
    gr.n_val = static_cast<int>(xva.size());
    gr.val = fit.val;
    gr.cross_val = fit.tuned.cv;
    gr.train = fit.train;
    report.groups.push_back(std::move(gr));
    log << "group " << g.name << ": best " << json(fit.tuned.best).dump() << "\n";
  }
  write_text(cfg.meta_dir() / "report.json", json(report).dump(2) + "\n");
  write_text(cfg.meta_dir() / "report.csv", report_csv(report));
  print_report_table(report, log);
  return report;
}

// ---- evaluate --------------------------------------------------------------

struct AblationRow {
  int n_samples = 0;
  double mean_ce = 0.0;
};

struct EvaluateReport {
  std::map<std::string, std::map<std::string, meta::MetricsReport>> metrics;  // group -> split
  std::vector<AblationRow> ablation;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "n_samples,mean_ce\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.n_samples << "," << r.mean_ce << "\n";
  return os.str();
}

// Mean validation CE, averaged over groups, when every model's signature is
// rebuilt from the first n defender samples and each group's classifier is
// refitted with its tuned parameters.
inline double ablation_point(const RunConfig& cfg, const ZooManifest& m, int n) {
  const Dataset samples = defender_samples(cfg, n);
  std::map<std::string, meta::FeatureRows> features;
  std::vector<std::vector<double>> rows(m.entries.size());
  parallel_for(m.entries.size(), cfg.workers, [&](std::size_t i) {
    rows[i] = extract_for_entry(cfg, m.entries[i], samples, cfg.hist).histogram.feature_vector(HistScale::Linear);
  });
  double ce_sum = 0.0;
  int groups = 0;
  for (const auto& g : meta_groups(m, cfg.arch_mode)) {
    if (g.val.empty()) continue;
    const auto clf_saved = meta::load_classifier(forest_path(cfg, g.name).string());
    meta::FeatureRows xtr;
    std::vector<int> ytr, yva;
    std::vector<double> pva;
    auto row_of = [&](const ZooEntry* e) -> const std::vector<double>& {
      return rows[static_cast<std::size_t>(e - m.entries.data())];
    };
    for (const auto* e : g.train) {
      xtr.push_back(row_of(e));
      ytr.push_back(e->is_trojaned);
    }
    const auto clf = meta::MetaClassifier::fit(xtr, ytr, clf_saved.params(),
                                               mix_seed(cfg.seed, fnv1a("meta-fit-" + g.name)));
    for (const auto* e : g.val) {
      pva.push_back(clf.predict_proba(row_of(e)));
      yva.push_back(e->is_trojaned);
    }
    ce_sum += meta::compute_metrics(yva, pva).cross_entropy;
    ++groups;
  }
  return groups == 0 ? 0.0 : ce_sum / groups;
}

inline EvaluateReport cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  const ZooManifest m = load_zoo_manifest(cfg);
  EvaluateReport rep;
  json metrics = json::object();
  bool any_val = false;
  for (const auto& g : meta_groups(m, cfg.arch_mode)) {
    const fs::path fp = forest_path(cfg, g.name);
    if (!fs::exists(fp)) throw ConfigError("missing meta-classifier '" + fp.string() + "' (run train-meta)");
    const auto clf = meta::load_classifier(fp.string());
    for (const auto& [split, entries] : {std::pair{"train", &g.train}, std::pair{"val", &g.val}}) {
      if (entries->empty()) continue;
      std::vector<int> y;
      std::vector<double> p;
      for (const auto* e : *entries) {
        p.push_back(clf.predict_proba(load_features(cfg, *e)));
        y.push_back(e->is_trojaned);
      }
      const auto r = meta::compute_metrics(y, p);
      rep.metrics[g.name][split] = r;
      metrics[g.name][split] = json(r);
      if (std::string(split) == "val") any_val = true;
    }
  }
  if (!any_val) throw ConfigError("the manifest has no validation models");
  for (int n : cfg.ablation_sizes) rep.ablation.push_back({n, ablation_point(cfg, m, n)});
  write_text(cfg.reports_dir() / "metrics.json",
             json{{"task", rapscan::to_string(cfg.task)},
                  {"arch_mode", to_string(cfg.arch_mode)},
                  {"groups", metrics}}
                     .dump(2) + "\n");
  write_text(cfg.reports_dir() / "ablation.csv", ablation_csv(rep.ablation));
  for (const auto& [group, splits] : rep.metrics)
    for (const auto& [split, r] : splits)
      log << group << " " << split << ": acc " << r.accuracy << " ce " << r.cross_entropy << " auc "
          << (r.auc ? std::to_string(*r.auc) : "-") << " frr " << r.frr << " far " << r.far << "\n";
  for (const auto& a : rep.ablation) log << "n_samples " << a.n_samples << ": mean CE " << a.mean_ce << "\n";
  return rep;
}

// ---- scan ------------------------------------------------------------------

struct DetectionReport {
  std::string model_ref;
  double trojan_probability = 0.0;
  std::string decision;  // "trojaned" or "benign"
  std::string signature_path;
  std::string forest_path;
  RapMode rap_mode = RapMode::Relaxed;
  int n_samples = 0;
};

inline void to_json(json& j, const DetectionReport& r) {
  j = json{{"model_ref", r.model_ref},
           {"trojan_probability", r.trojan_probability},
           {"decision", r.decision},
           {"signature_path", r.signature_path},
           {"forest_path", r.forest_path},
           {"rap_mode", rapscan::to_string(r.rap_mode)},
           {"n_samples", r.n_samples}};
}

inline std::string scan_ref_name(const std::string& target) {
  std::string out;
  const std::string base =
      target.find(':') == std::string::npos ? fs::path(target).parent_path().filename().string() + "-" +
                                                  fs::path(target).stem().string()
                                            : target;
  for (char c : base) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

// `target` is a model file or an oracle endpoint (tcp:... / exec:...). Oracle
// targets always use relaxed RAP.
inline DetectionReport cmd_scan(const RunConfig& cfg, const fs::path& forest, const std::string& target,
                                const std::optional<fs::path>& samples_file, std::ostream& log) {
  const auto clf = meta::load_classifier(forest.string());
  const Dataset samples =
      samples_file ? read_samples_jsonl(*samples_file) : defender_samples(cfg, cfg.samples.n_samples);
  RapConfig rap = cfg.rap;
  std::unique_ptr<ModelOracle> oracle;
  std::optional<TinyTextModel> model;
  const bool is_endpoint = target.rfind("tcp:", 0) == 0 || target.rfind("exec:", 0) == 0;
  if (is_endpoint) {
    if (rap.mode == RapMode::Optimized)
      log << "note: oracle targets are black-box; using relaxed RAP\n";
    rap.mode = RapMode::Relaxed;
    oracle = std::make_unique<oracle::WireOracle>(oracle::Endpoint::parse(target));
  } else {
    if (!fs::exists(target)) throw ConfigError("no model file '" + target + "'");
    model = load_model(target);
    oracle = std::make_unique<InProcessOracle>(*model);
  }
  const std::string ref = scan_ref_name(target);
  const ExtractedSignature sig = signature_for(*oracle, samples, rap, cfg.hist, ref);
  if (static_cast<int>(sig.histogram.counts.size()) != clf.n_inputs())
    throw ConfigError("signature has " + std::to_string(sig.histogram.counts.size()) +
                      " bins but the meta-classifier expects " + std::to_string(clf.n_inputs()));
  DetectionReport r;
  r.model_ref = target;
  r.trojan_probability = clf.predict_proba(sig.histogram.feature_vector(HistScale::Linear));
  r.decision = r.trojan_probability >= 0.5 ? "trojaned" : "benign";
  r.forest_path = forest.string();
  r.rap_mode = rap.mode;
  r.n_samples = static_cast<int>(samples.size());
  const fs::path dir = cfg.out_dir / "scans";
  fs::create_directories(dir);
  r.signature_path = (dir / (ref + ".sig.json")).string();
  save_signature(sig.histogram, r.signature_path);
  write_text(dir / (ref + ".report.json"), json(r).dump(2) + "\n");
  log << json(r).dump() << "\n";
  return r;
}

// ---- serve -----------------------------------------------------------------

inline void cmd_serve(const fs::path& model_file, Task task, std::optional<int> tcp_port,
                      std::ostream& log) {
  if (!fs::exists(model_file)) throw ConfigError("no model file '" + model_file.string() + "'");
  const TinyTextModel model = load_model(model_file.string());
  oracle::OracleServer server(model, {task});
  if (tcp_port) {
    oracle::serve_tcp(server, *tcp_port, [&](int port) {
      log << "listening on 127.0.0.1:" << port << "\n";
      log.flush();
    });
  } else {
    oracle::serve_stdio(server);
  }
}

}  // namespace rapscan::cli
