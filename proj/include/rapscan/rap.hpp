#pragma once

// Perturbation triggers built on a reserved token: the gradient-optimized
// variant (bounded loss, only the trigger embedding is updated) and the
// relaxed variant (random noise, black-box only), plus per-task measurement
// of output deviations f(x) - f(x + trigger).

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapscan/errors.hpp"
#include "rapscan/numerics.hpp"
#include "rapscan/textmodel.hpp"

namespace rapscan {

using json = nlohmann::json;

// Forward-only access to a model. Implementations: in-process, counting
// wrapper, wire client.
class ModelOracle {
 public:
  virtual ~ModelOracle() = default;
  virtual TaskOutput query(const TokenSequence& x, const TriggerInjection* trigger) = 0;
  virtual int embedding_dim() const = 0;
};

// White-box access: additionally exposes the gradient of a probability-linear
// loss with respect to the trigger embedding.
class GradientOracle : public ModelOracle {
 public:
  virtual std::vector<double> embedding_gradient(const TokenSequence& x_with_trigger,
                                                 const LossSpec& loss, TokenId trigger_token,
                                                 std::span<const double> trigger_embedding) = 0;
};

class InProcessOracle final : public GradientOracle {
 public:
  explicit InProcessOracle(const TinyTextModel& model) : model_(model) {}

  TaskOutput query(const TokenSequence& x, const TriggerInjection* trigger) override {
    return forward(model_, x, trigger);
  }
  int embedding_dim() const override { return model_.dims.embed; }
  std::vector<double> embedding_gradient(const TokenSequence& x, const LossSpec& loss,
                                         TokenId token,
                                         std::span<const double> embedding) override {
    return rapscan::embedding_gradient(model_, x, loss, token, embedding);
  }

 private:
  const TinyTextModel& model_;
};

// Counts calls made through it. Gradient requests are forwarded only when the
// wrapped oracle is white-box.
class CountingOracle final : public GradientOracle {
 public:
  explicit CountingOracle(ModelOracle& inner) : inner_(inner) {}

  TaskOutput query(const TokenSequence& x, const TriggerInjection* trigger) override {
    ++forward_calls;
    return inner_.query(x, trigger);
  }
  int embedding_dim() const override { return inner_.embedding_dim(); }
  std::vector<double> embedding_gradient(const TokenSequence& x, const LossSpec& loss,
                                         TokenId token,
                                         std::span<const double> embedding) override {
    ++gradient_calls;
    auto* white = dynamic_cast<GradientOracle*>(&inner_);
    require(white != nullptr, "gradient requested from a black-box oracle");
    return white->embedding_gradient(x, loss, token, embedding);
  }

  long forward_calls = 0;
  long gradient_calls = 0;

 private:
  ModelOracle& inner_;
};

enum class RapMode { Optimized, Relaxed };
enum class InsertPosition { Front, Back, Sliding };

inline std::string_view to_string(RapMode m) {
  return m == RapMode::Optimized ? "optimized" : "relaxed";
}
inline RapMode rap_mode_from_string(std::string_view s) {
  if (s == "optimized") return RapMode::Optimized;
  if (s == "relaxed") return RapMode::Relaxed;
  throw ConfigError("unknown rap mode '" + std::string(s) + "'");
}
inline std::string_view to_string(InsertPosition p) {
  switch (p) {
    case InsertPosition::Front: return "front";
    case InsertPosition::Back: return "back";
    case InsertPosition::Sliding: return "sliding";
  }
  return "?";
}
inline InsertPosition insert_position_from_string(std::string_view s) {
  if (s == "front") return InsertPosition::Front;
  if (s == "back") return InsertPosition::Back;
  if (s == "sliding") return InsertPosition::Sliding;
  throw ConfigError("unknown insert position '" + std::string(s) + "'");
}

struct RapConfig {
  int n_epoch = 15;
  double lr = 0.03;
  double c_low = 0.015;
  double c_high = 0.02;
  RapMode mode = RapMode::Relaxed;
  // SC and QA use front/back; NER always slides with stride n_adjacent.
  InsertPosition insert_position = InsertPosition::Back;
  int n_adjacent = 5;
  double noise_scale = 0.25;
  int batch_size = 32;
  TokenId token_id = kFirstReservedId;
  std::uint64_t seed = 0;

  void validate() const {
    require(c_low < c_high, "RapConfig: c_low must be < c_high");
    require(mode != RapMode::Optimized || n_epoch >= 1, "RapConfig: n_epoch must be >= 1");
    require(lr >= 0.0, "RapConfig: lr must be nonnegative");
    require(noise_scale >= 0.0, "RapConfig: noise_scale must be nonnegative");
    require(batch_size >= 1, "RapConfig: batch_size must be >= 1");
  }

  // Sentiment presets: 40 provided samples per model, and the 1000-sample
  // augmented setting.
  static RapConfig sc_small_sample() {
    RapConfig c;
    c.mode = RapMode::Optimized;
    c.n_epoch = 40;
    c.lr = 0.03;
    c.c_low = 0.015;
    c.c_high = 0.02;
    return c;
  }
  static RapConfig sc_augmented() {
    RapConfig c = sc_small_sample();
    c.n_epoch = 15;
    return c;
  }
  // Tagging preset. The very large learning rate is carried over as given.
  static RapConfig ner_optimized() {
    RapConfig c;
    c.mode = RapMode::Optimized;
    c.insert_position = InsertPosition::Sliding;
    c.n_adjacent = 5;
    c.c_low = 0.00007;
    c.c_high = 0.00009;
    c.n_epoch = 50;
    c.lr = 3000;
    return c;
  }
};

inline void to_json(json& j, const RapConfig& c) {
  j = json{{"n_epoch", c.n_epoch},
           {"lr", c.lr},
           {"c_low", c.c_low},
           {"c_high", c.c_high},
           {"mode", to_string(c.mode)},
           {"insert_position", to_string(c.insert_position)},
           {"n_adjacent", c.n_adjacent},
           {"noise_scale", c.noise_scale},
           {"batch_size", c.batch_size},
           {"token_id", c.token_id},
           {"seed", c.seed}};
}

inline void from_json(const json& j, RapConfig& c) {
  RapConfig d;
  c.n_epoch = j.value("n_epoch", d.n_epoch);
  c.lr = j.value("lr", d.lr);
  c.c_low = j.value("c_low", d.c_low);
  c.c_high = j.value("c_high", d.c_high);
  c.mode = rap_mode_from_string(j.value("mode", std::string(to_string(d.mode))));
  c.insert_position =
      insert_position_from_string(j.value("insert_position", std::string(to_string(d.insert_position))));
  c.n_adjacent = j.value("n_adjacent", d.n_adjacent);
  c.noise_scale = j.value("noise_scale", d.noise_scale);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.token_id = j.value("token_id", d.token_id);
  c.seed = j.value("seed", d.seed);
}

struct RapTrigger {
  TokenId token_id = kFirstReservedId;
  std::vector<double> embedding;
  RapMode mode = RapMode::Relaxed;
  // Mean deviation on the optimization samples (optimized mode only).
  std::optional<double> train_mean_deviation;
};

struct DeviationRecord {
  std::string model_id;
  std::string sample_id;
  Task task = Task::SC;
  std::optional<int> position;
  double value = 0.0;
};

inline void to_json(json& j, const DeviationRecord& r) {
  j = json{{"model_id", r.model_id},
           {"sample_id", r.sample_id},
           {"task", to_string(r.task)},
           {"value", r.value}};
  j["position"] = r.position ? json(*r.position) : json(nullptr);
}

inline void from_json(const json& j, DeviationRecord& r) {
  r.model_id = j.at("model_id").get<std::string>();
  r.sample_id = j.at("sample_id").get<std::string>();
  r.task = task_from_string(j.at("task").get<std::string>());
  r.value = j.at("value").get<double>();
  if (!j.at("position").is_null()) r.position = j.at("position").get<int>();
}

// One line per record.
inline void write_deviations_jsonl(const std::string& path,
                                   const std::vector<DeviationRecord>& records) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path + "'");
  for (const auto& r : records) os << json(r).dump() << "\n";
}

inline std::vector<DeviationRecord> read_deviations_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read '" + path + "'");
  std::vector<DeviationRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(json::parse(line).get<DeviationRecord>());
  }
  return out;
}

// Piecewise bounded loss: pushes the deviation f(x) - f(x+t) up when it is
// below c_low, down when above c_high, and is flat in between.
inline double bounded_rap_loss(double fx, double fxt, double c_low, double c_high) {
  const double diff = fx - fxt;
  if (diff < c_low) return fxt - fx;
  if (diff > c_high) return fx - fxt;
  return 0.0;
}

// d bounded_rap_loss / d fxt.
inline double bounded_rap_loss_slope(double fx, double fxt, double c_low, double c_high) {
  const double diff = fx - fxt;
  if (diff < c_low) return 1.0;
  if (diff > c_high) return -1.0;
  return 0.0;
}

// Insertion slot for SC/QA. QA triggers stay inside the question segment.
inline int rap_slot(const TokenSequence& x, InsertPosition pos) {
  if (x.task == Task::QA) {
    const int sep = x.separator();
    require(sep >= 1, "QA sequence without separator");
    return pos == InsertPosition::Front ? 1 : sep;
  }
  return pos == InsertPosition::Front ? 0 : x.length();
}

inline TriggerInjection injection_at(const RapTrigger& t, int position) {
  return TriggerInjection{t.token_id, t.embedding, {position}};
}

// Relaxed trigger: noise_scale * N(0, 1) per coordinate from cfg.seed.
inline RapTrigger relaxed_trigger(int dim, const RapConfig& cfg) {
  require(cfg.mode == RapMode::Relaxed, "relaxed_trigger: config mode is not relaxed");
  require(dim >= 1, "relaxed_trigger: dimension must be positive");
  cfg.validate();
  RapTrigger t;
  t.token_id = cfg.token_id;
  t.mode = RapMode::Relaxed;
  Prng rng = Prng(cfg.seed).split(fnv1a("relaxed-trigger"));
  t.embedding.resize(dim);
  for (double& v : t.embedding) v = cfg.noise_scale * rng.normal();
  return t;
}

inline int reference_label_sc(const TokenSequence& x, const TaskOutput& clean) {
  return x.label ? *x.label : static_cast<int>(argmax_tiebreak(clean.rows[0]));
}

inline DeviationRecord deviation_sc(ModelOracle& oracle, const TokenSequence& x,
                                    const RapTrigger& t, const RapConfig& cfg) {
  require(x.task == Task::SC, "deviation_sc: not an SC sample");
  const TaskOutput clean = oracle.query(x, nullptr);
  const int ref = reference_label_sc(x, clean);
  const int slot = rap_slot(x, cfg.insert_position);
  const TokenSequence xt = insert_token(x, slot, t.token_id);
  const TriggerInjection inj = injection_at(t, slot);
  const TaskOutput perturbed = oracle.query(xt, &inj);
  DeviationRecord r;
  r.task = Task::SC;
  r.value = clean.rows.at(0).at(ref) - perturbed.rows.at(0).at(ref);
  return r;
}

// Trigger slots 0, n, 2n, ... below the length; for each slot one record per
// original word in [slot, slot + 2n), i.e. the words the trigger precedes.
inline std::vector<DeviationRecord> deviation_ner(ModelOracle& oracle, const TokenSequence& x,
                                                  const RapTrigger& t, const RapConfig& cfg) {
  require(x.task == Task::NER, "deviation_ner: not an NER sample");
  require(cfg.n_adjacent >= 1, "deviation_ner: n_adjacent must be >= 1");
  require(x.length() >= 2, "deviation_ner: sequence shorter than 2");
  const TaskOutput clean = oracle.query(x, nullptr);
  const int len = x.length();
  std::vector<int> ref(len);
  for (int w = 0; w < len; ++w)
    ref[w] = x.token_labels.empty() ? static_cast<int>(argmax_tiebreak(clean.rows[w]))
                                    : x.token_labels[w];
  std::vector<DeviationRecord> out;
  for (int slot = 0; slot < len; slot += cfg.n_adjacent) {
    const TokenSequence xt = insert_token(x, slot, t.token_id);
    const TriggerInjection inj = injection_at(t, slot);
    const TaskOutput perturbed = oracle.query(xt, &inj);
    const int stop = std::min(len, slot + 2 * cfg.n_adjacent);
    for (int w = slot; w < stop; ++w) {
      DeviationRecord r;
      r.task = Task::NER;
      r.position = slot;
      r.sample_id = "w" + std::to_string(w);
      r.value = clean.rows.at(w).at(ref[w]) - perturbed.rows.at(w + 1).at(ref[w]);
      out.push_back(std::move(r));
    }
  }
  return out;
}

// Deviation of the no-answer probability (start head at position 0).
inline DeviationRecord deviation_qa(ModelOracle& oracle, const TokenSequence& x,
                                    const RapTrigger& t, const RapConfig& cfg) {
  require(x.task == Task::QA, "deviation_qa: not a QA sample");
  const TaskOutput clean = oracle.query(x, nullptr);
  const int slot = rap_slot(x, cfg.insert_position);
  const TokenSequence xt = insert_token(x, slot, t.token_id);
  const TriggerInjection inj = injection_at(t, slot);
  const TaskOutput perturbed = oracle.query(xt, &inj);
  DeviationRecord r;
  r.task = Task::QA;
  r.position = 0;
  r.value = clean.rows.at(0).at(0) - perturbed.rows.at(0).at(0);
  return r;
}

// Every deviation the trigger produces on one sample, tagged with sample_id.
inline std::vector<DeviationRecord> deviations_for(ModelOracle& oracle, const TokenSequence& x,
                                                   const RapTrigger& t, const RapConfig& cfg,
                                                   const std::string& model_id,
                                                   const std::string& sample_id) {
  std::vector<DeviationRecord> out;
  switch (x.task) {
    case Task::SC: out.push_back(deviation_sc(oracle, x, t, cfg)); break;
    case Task::QA: out.push_back(deviation_qa(oracle, x, t, cfg)); break;
    case Task::NER:
      out = deviation_ner(oracle, x, t, cfg);
      for (auto& r : out) r.sample_id = sample_id + ":" + r.sample_id;
      break;
  }
  for (auto& r : out) {
    r.model_id = model_id;
    if (x.task != Task::NER) r.sample_id = sample_id;
  }
  return out;
}

namespace detail {

// One triggered input plus the probabilities the bounded loss looks at.
struct RapUnit {
  TokenSequence triggered;
  int slot = 0;
  std::vector<LossSpec::Term> probes;  // weight field unused
  std::vector<double> clean;           // f(x) per probe
};

inline std::vector<RapUnit> rap_units(ModelOracle& oracle, std::span<const TokenSequence> samples,
                                      const RapConfig& cfg) {
  std::vector<RapUnit> units;
  for (const auto& x : samples) {
    const TaskOutput clean = oracle.query(x, nullptr);
    auto add = [&](int slot, std::vector<LossSpec::Term> probes, std::vector<double> fx) {
      units.push_back({insert_token(x, slot, cfg.token_id), slot, std::move(probes), std::move(fx)});
    };
    switch (x.task) {
      case Task::SC: {
        const int ref = reference_label_sc(x, clean);
        add(rap_slot(x, cfg.insert_position), {{0, ref, 1.0}}, {clean.rows[0][ref]});
        break;
      }
      case Task::QA:
        add(rap_slot(x, cfg.insert_position), {{0, 0, 1.0}}, {clean.rows[0][0]});
        break;
      case Task::NER: {
        require(x.length() >= 2, "optimize_trigger: NER sequence shorter than 2");
        for (int slot = 0; slot < x.length(); slot += cfg.n_adjacent) {
          std::vector<LossSpec::Term> probes;
          std::vector<double> fx;
          for (int w = slot; w < std::min(x.length(), slot + 2 * cfg.n_adjacent); ++w) {
            const int ref = x.token_labels.empty()
                                ? static_cast<int>(argmax_tiebreak(clean.rows[w]))
                                : x.token_labels[w];
            probes.push_back({w + 1, ref, 1.0});
            fx.push_back(clean.rows[w][ref]);
          }
          add(slot, std::move(probes), std::move(fx));
        }
        break;
      }
    }
  }
  return units;
}

}  // namespace detail

struct RapObjective {
  double mean_loss = 0.0;
  double mean_deviation = 0.0;
};

// Mean bounded loss and mean deviation of `embedding` over the samples.
inline RapObjective rap_objective(ModelOracle& oracle, std::span<const TokenSequence> samples,
                                  std::span<const double> embedding, const RapConfig& cfg) {
  const auto units = detail::rap_units(oracle, samples, cfg);
  RapObjective obj;
  std::size_t n = 0;
  for (const auto& u : units) {
    const TriggerInjection inj{cfg.token_id, {embedding.begin(), embedding.end()}, {u.slot}};
    const TaskOutput out = oracle.query(u.triggered, &inj);
    for (std::size_t k = 0; k < u.probes.size(); ++k) {
      const double fxt = out.rows[u.probes[k].row][u.probes[k].col];
      obj.mean_loss += bounded_rap_loss(u.clean[k], fxt, cfg.c_low, cfg.c_high);
      obj.mean_deviation += u.clean[k] - fxt;
      ++n;
    }
  }
  if (n > 0) {
    obj.mean_loss /= n;
    obj.mean_deviation /= n;
  }
  return obj;
}

inline std::vector<double> rap_initial_embedding(int dim, const RapConfig& cfg) {
  Prng rng = Prng(cfg.seed).split(fnv1a("optimized-trigger-init"));
  std::vector<double> e(dim);
  for (double& v : e) v = 0.01 * rng.normal();
  return e;
}

// Minibatch gradient descent on the mean bounded loss, updating only the
// trigger embedding. The model behind `oracle` is never modified.
inline RapTrigger optimize_trigger(GradientOracle& oracle, std::span<const TokenSequence> samples,
                                   const RapConfig& cfg) {
  require(cfg.mode == RapMode::Optimized, "optimize_trigger: config mode is not optimized");
  require(!samples.empty(), "optimize_trigger: no samples");
  cfg.validate();
  for (const auto& x : samples)
    require(x.task != Task::SC || x.label.has_value(),
            "optimize_trigger: SC samples must carry labels");

  RapTrigger t;
  t.token_id = cfg.token_id;
  t.mode = RapMode::Optimized;
  t.embedding = rap_initial_embedding(oracle.embedding_dim(), cfg);

  const auto units = detail::rap_units(oracle, samples, cfg);
  std::vector<std::size_t> order(units.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Prng rng = Prng(cfg.seed).split(fnv1a("optimized-trigger-order"));
  const int d = oracle.embedding_dim();
  std::vector<double> grad(d);

  for (int epoch = 0; epoch < cfg.n_epoch; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      std::size_t n_probes = 0;
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& u = units[order[k]];
        const TriggerInjection inj{t.token_id, t.embedding, {u.slot}};
        const TaskOutput out = oracle.query(u.triggered, &inj);
        LossSpec loss;
        for (std::size_t p = 0; p < u.probes.size(); ++p) {
          const double fxt = out.rows[u.probes[p].row][u.probes[p].col];
          const double slope = bounded_rap_loss_slope(u.clean[p], fxt, cfg.c_low, cfg.c_high);
          if (slope != 0.0) loss.terms.push_back({u.probes[p].row, u.probes[p].col, slope});
        }
        n_probes += u.probes.size();
        if (loss.terms.empty()) continue;
        const auto g = oracle.embedding_gradient(u.triggered, loss, t.token_id, t.embedding);
        for (int i = 0; i < d; ++i) grad[i] += g[i];
      }
      if (n_probes == 0) continue;
      for (int i = 0; i < d; ++i) t.embedding[i] -= cfg.lr * grad[i] / static_cast<double>(n_probes);
      for (double v : t.embedding) {
        if (!std::isfinite(v))
          throw OptimizationError("trigger optimization diverged at epoch " + std::to_string(epoch),
                                  epoch);
      }
    }
  }
  t.train_mean_deviation = rap_objective(oracle, samples, t.embedding, cfg).mean_deviation;
  return t;
}

// Optimized triggers need white-box access; relaxed ones never touch the
// model.
inline RapTrigger make_trigger(ModelOracle& oracle, std::span<const TokenSequence> samples,
                               const RapConfig& cfg) {
  if (cfg.mode == RapMode::Relaxed) return relaxed_trigger(oracle.embedding_dim(), cfg);
  auto* white = dynamic_cast<GradientOracle*>(&oracle);
  if (white == nullptr)
    throw ContractViolation("optimized triggers require white-box model access");
  return optimize_trigger(*white, samples, cfg);
}

}  // namespace rapscan
