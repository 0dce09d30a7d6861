#pragma once

// Tiny recurrent text models: a single-layer tanh Elman encoder shared by a
// sentence-classification head, a per-token tagging head and a span
// (start/end) head. Everything needed to train them with plain SGD and to
// differentiate a probability-valued loss with respect to one token
// embedding lives here.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rapscan/errors.hpp"
#include "rapscan/numerics.hpp"

namespace rapscan {

using TokenId = std::int32_t;

enum class Task { SC, NER, QA };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::SC: return "SC";
    case Task::NER: return "NER";
    case Task::QA: return "QA";
  }
  return "?";
}

inline Task task_from_string(std::string_view s) {
  if (s == "SC") return Task::SC;
  if (s == "NER") return Task::NER;
  if (s == "QA") return Task::QA;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

enum class ArchVariant : std::uint8_t { A = 0, B = 1, C = 2 };
enum class Pooling : std::uint8_t { Mean, Last, Max };

inline std::string_view to_string(ArchVariant a) {
  switch (a) {
    case ArchVariant::A: return "A";
    case ArchVariant::B: return "B";
    case ArchVariant::C: return "C";
  }
  return "?";
}

inline ArchVariant arch_from_string(std::string_view s) {
  if (s == "A") return ArchVariant::A;
  if (s == "B") return ArchVariant::B;
  if (s == "C") return ArchVariant::C;
  throw ConfigError("unknown arch variant '" + std::string(s) + "'");
}

struct ArchShape {
  int hidden;
  Pooling pooling;
};

inline ArchShape arch_shape(ArchVariant a) {
  switch (a) {
    case ArchVariant::A: return {32, Pooling::Mean};
    case ArchVariant::B: return {48, Pooling::Last};
    case ArchVariant::C: return {24, Pooling::Max};
  }
  throw ContractViolation("bad arch variant");
}

inline constexpr int kMaxLen = 64;
inline constexpr TokenId kClsId = 0;
inline constexpr TokenId kSepId = 1;
inline constexpr int kNumReserved = 4;
inline constexpr TokenId kFirstReservedId = 2;
inline constexpr TokenId kFirstWordId = kFirstReservedId + kNumReserved;

// Ids: [CLS], [SEP], four reserved "[unusedK]" slots, then ordinary words.
// Reserved ids never occur in generated corpora; they are the candidates for
// perturbation tokens.
struct Vocab {
  std::vector<std::string> tokens;
  std::vector<TokenId> reserved_ids;

  static Vocab standard(int n_words) {
    require(n_words > 0, "Vocab: need at least one word");
    Vocab v;
    v.tokens.push_back("[CLS]");
    v.tokens.push_back("[SEP]");
    for (int i = 0; i < kNumReserved; ++i) {
      v.reserved_ids.push_back(static_cast<TokenId>(v.tokens.size()));
      v.tokens.push_back("[unused" + std::to_string(i) + "]");
    }
    for (int i = 0; i < n_words; ++i) v.tokens.push_back("w" + std::to_string(i));
    return v;
  }

  int size() const { return static_cast<int>(tokens.size()); }
  int n_words() const { return size() - kFirstWordId; }
  TokenId word(int i) const { return kFirstWordId + i; }

  bool is_reserved(TokenId id) const {
    for (TokenId r : reserved_ids)
      if (r == id) return true;
    return false;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("rapscan-vocab");
    for (const auto& t : tokens) {
      h = fnv1a(t, h);
      h = fnv1a(std::string_view("\0", 1), h);
    }
    return h;
  }
};

struct Span {
  int start = 0;
  int end = 0;
  bool operator==(const Span&) const = default;
  bool is_no_answer() const { return start == 0 && end == 0; }
};

inline constexpr Span kNoAnswer{0, 0};

// One input. Labels are optional: SC uses `label`, NER uses `token_labels`
// (one per id), QA uses `span`. QA inputs are laid out as
// [CLS] question... [SEP] context..., with position 0 doubling as the
// no-answer slot.
struct TokenSequence {
  std::vector<TokenId> ids;
  Task task = Task::SC;
  std::optional<int> label;
  std::vector<int> token_labels;
  std::optional<Span> span;

  int length() const { return static_cast<int>(ids.size()); }

  bool has_labels() const {
    switch (task) {
      case Task::SC: return label.has_value();
      case Task::NER: return !token_labels.empty();
      case Task::QA: return span.has_value();
    }
    return false;
  }

  // Index of the [SEP] separating question from context; QA only.
  int separator() const {
    for (int i = 0; i < length(); ++i)
      if (ids[i] == kSepId) return i;
    return -1;
  }

  bool operator==(const TokenSequence&) const = default;
};

// Inserts `token` before position `pos`, shifting labels along. The inserted
// NER position gets label 0 (outside); QA spans pointing at or after `pos`
// move right by one.
inline TokenSequence insert_token(const TokenSequence& x, int pos, TokenId token,
                                  int ner_label = 0) {
  require(pos >= 0 && pos <= x.length(), "insert_token: position out of range");
  TokenSequence y = x;
  y.ids.insert(y.ids.begin() + pos, token);
  if (!y.token_labels.empty())
    y.token_labels.insert(y.token_labels.begin() + pos, ner_label);
  if (y.span && !y.span->is_no_answer()) {
    if (y.span->start >= pos) ++y.span->start;
    if (y.span->end >= pos) ++y.span->end;
  }
  return y;
}

// An embedding vector substituted for the input embedding at `positions`.
struct TriggerInjection {
  TokenId token_id = 0;
  std::vector<double> embedding;
  std::vector<int> positions;
};

// Task-shaped probabilities. SC: one row over classes. NER: one row per
// position over entity classes. QA: two rows (start, end) over positions.
struct TaskOutput {
  Task task = Task::SC;
  std::vector<std::vector<double>> rows;
  bool operator==(const TaskOutput&) const = default;
};

struct ModelDims {
  int vocab = 0;
  int embed = 16;
  int hidden = 32;
  int sc_classes = 2;
  int ner_classes = 4;

  bool operator==(const ModelDims&) const = default;
};

struct Weights {
  DenseMatrix embedding;  // V x d
  DenseMatrix w_in;       // d x h
  DenseMatrix w_rec;      // h x h
  DenseMatrix b_rec;      // 1 x h
  DenseMatrix sc_w;       // h x C
  DenseMatrix sc_b;       // 1 x C
  DenseMatrix ner_w;      // h x E
  DenseMatrix ner_b;      // 1 x E
  DenseMatrix qa_w;       // h x 2 (start, end)
  DenseMatrix qa_b;       // 1 x 2

  static Weights zeros(const ModelDims& m) {
    Weights w;
    w.embedding = DenseMatrix(m.vocab, m.embed);
    w.w_in = DenseMatrix(m.embed, m.hidden);
    w.w_rec = DenseMatrix(m.hidden, m.hidden);
    w.b_rec = DenseMatrix(1, m.hidden);
    w.sc_w = DenseMatrix(m.hidden, m.sc_classes);
    w.sc_b = DenseMatrix(1, m.sc_classes);
    w.ner_w = DenseMatrix(m.hidden, m.ner_classes);
    w.ner_b = DenseMatrix(1, m.ner_classes);
    w.qa_w = DenseMatrix(m.hidden, 2);
    w.qa_b = DenseMatrix(1, 2);
    return w;
  }

  std::array<DenseMatrix*, 10> all() {
    return {&embedding, &w_in, &w_rec, &b_rec, &sc_w, &sc_b, &ner_w, &ner_b, &qa_w, &qa_b};
  }
  std::array<const DenseMatrix*, 10> all() const {
    return {&embedding, &w_in, &w_rec, &b_rec, &sc_w, &sc_b, &ner_w, &ner_b, &qa_w, &qa_b};
  }

  bool operator==(const Weights&) const = default;
};

struct TinyTextModel {
  ArchVariant arch = ArchVariant::A;
  ModelDims dims;
  std::uint64_t vocab_hash = 0;
  std::uint64_t train_seed = 0;
  Weights w;

  Pooling pooling() const { return arch_shape(arch).pooling; }

  static TinyTextModel create(ArchVariant arch, const Vocab& vocab, std::uint64_t seed,
                              int embed = 16, int sc_classes = 2, int ner_classes = 4) {
    TinyTextModel m;
    m.arch = arch;
    m.dims = {vocab.size(), embed, arch_shape(arch).hidden, sc_classes, ner_classes};
    m.vocab_hash = vocab.hash();
    m.train_seed = seed;
    m.w = Weights::zeros(m.dims);
    Prng rng = Prng(seed).split(fnv1a("init"));
    auto gauss = [&](DenseMatrix& mat, double scale) {
      for (double& v : mat.values()) v = scale * rng.normal();
    };
    const double h = m.dims.hidden;
    gauss(m.w.embedding, 1.0);
    gauss(m.w.w_in, 1.0 / std::sqrt(static_cast<double>(embed)));
    gauss(m.w.w_rec, 0.5 / std::sqrt(h));
    gauss(m.w.sc_w, 1.0 / std::sqrt(h));
    gauss(m.w.ner_w, 1.0 / std::sqrt(h));
    gauss(m.w.qa_w, 1.0 / std::sqrt(h));
    return m;
  }

  bool operator==(const TinyTextModel&) const = default;
};

namespace detail {

struct ForwardCache {
  int len = 0;
  std::vector<double> inputs;  // len x d
  std::vector<double> states;  // len x h
  std::vector<double> pooled;  // h
  std::vector<int> pool_arg;   // h, max pooling only
};

inline int classes_for(const TinyTextModel& m, Task t) {
  return t == Task::SC ? m.dims.sc_classes : t == Task::NER ? m.dims.ner_classes : 2;
}

inline void validate_input(const TinyTextModel& m, const TokenSequence& x,
                           const TriggerInjection* trig) {
  require(x.length() >= 1, "forward: empty sequence");
  require(x.length() <= kMaxLen, "forward: sequence longer than max_len");
  for (TokenId id : x.ids)
    require(id >= 0 && id < m.dims.vocab, "forward: token id out of vocabulary");
  if (trig) {
    require(static_cast<int>(trig->embedding.size()) == m.dims.embed,
            "forward: trigger embedding has wrong dimension");
    for (int p : trig->positions)
      require(p >= 0 && p < x.length(), "forward: trigger position out of range");
    for (double v : trig->embedding)
      require(std::isfinite(v), "forward: non-finite trigger embedding");
  }
}

inline void encode(const TinyTextModel& m, const TokenSequence& x,
                   const TriggerInjection* trig, ForwardCache& c) {
  const int d = m.dims.embed;
  const int h = m.dims.hidden;
  const int len = x.length();
  c.len = len;
  c.inputs.assign(static_cast<std::size_t>(len) * d, 0.0);
  c.states.assign(static_cast<std::size_t>(len) * h, 0.0);
  for (int t = 0; t < len; ++t) {
    const double* src = m.w.embedding.row(x.ids[t]).data();
    std::copy(src, src + d, c.inputs.data() + t * d);
  }
  if (trig) {
    for (int p : trig->positions)
      std::copy(trig->embedding.begin(), trig->embedding.end(), c.inputs.data() + p * d);
  }
  const double* w_in = m.w.w_in.values().data();
  const double* w_rec = m.w.w_rec.values().data();
  const double* b = m.w.b_rec.values().data();
  std::vector<double> a(h);
  for (int t = 0; t < len; ++t) {
    std::copy(b, b + h, a.begin());
    const double* xt = c.inputs.data() + t * d;
    for (int i = 0; i < d; ++i) {
      const double xi = xt[i];
      const double* row = w_in + i * h;
      for (int j = 0; j < h; ++j) a[j] += xi * row[j];
    }
    if (t > 0) {
      const double* prev = c.states.data() + (t - 1) * h;
      for (int i = 0; i < h; ++i) {
        const double si = prev[i];
        const double* row = w_rec + i * h;
        for (int j = 0; j < h; ++j) a[j] += si * row[j];
      }
    }
    double* st = c.states.data() + t * h;
    for (int j = 0; j < h; ++j) st[j] = std::tanh(a[j]);
  }

  c.pooled.assign(h, 0.0);
  c.pool_arg.clear();
  switch (m.pooling()) {
    case Pooling::Mean:
      for (int t = 0; t < len; ++t)
        for (int j = 0; j < h; ++j) c.pooled[j] += c.states[t * h + j];
      for (double& v : c.pooled) v /= len;
      break;
    case Pooling::Last:
      std::copy(c.states.end() - h, c.states.end(), c.pooled.begin());
      break;
    case Pooling::Max:
      c.pool_arg.assign(h, 0);
      for (int j = 0; j < h; ++j) {
        double best = c.states[j];
        for (int t = 1; t < len; ++t) {
          if (c.states[t * h + j] > best) {
            best = c.states[t * h + j];
            c.pool_arg[j] = t;
          }
        }
        c.pooled[j] = best;
      }
      break;
  }
}

// logits[k] = bias[k] + sum_j v[j] * w(j, k)
inline void affine(std::span<const double> v, const DenseMatrix& w, const DenseMatrix& bias,
                   std::span<double> out) {
  const std::size_t k = w.cols();
  for (std::size_t c = 0; c < k; ++c) out[c] = bias(0, c);
  for (std::size_t j = 0; j < v.size(); ++j) {
    const double vj = v[j];
    const double* row = w.row(j).data();
    for (std::size_t c = 0; c < k; ++c) out[c] += vj * row[c];
  }
}

inline TaskOutput heads(const TinyTextModel& m, Task task, const ForwardCache& c) {
  const int h = m.dims.hidden;
  TaskOutput out;
  out.task = task;
  auto state = [&](int t) {
    return std::span<const double>(c.states.data() + t * h, h);
  };
  switch (task) {
    case Task::SC: {
      std::vector<double> logits(m.dims.sc_classes);
      affine(c.pooled, m.w.sc_w, m.w.sc_b, logits);
      out.rows.push_back(softmax(logits));
      break;
    }
    case Task::NER: {
      std::vector<double> logits(m.dims.ner_classes);
      for (int t = 0; t < c.len; ++t) {
        affine(state(t), m.w.ner_w, m.w.ner_b, logits);
        out.rows.push_back(softmax(logits));
      }
      break;
    }
    case Task::QA: {
      std::vector<double> start(c.len), end(c.len), pair(2);
      for (int t = 0; t < c.len; ++t) {
        affine(state(t), m.w.qa_w, m.w.qa_b, pair);
        start[t] = pair[0];
        end[t] = pair[1];
      }
      out.rows.push_back(softmax(start));
      out.rows.push_back(softmax(end));
      break;
    }
  }
  return out;
}

// Gradient of a scalar loss with respect to the head logits, shaped like
// TaskOutput::rows.
using LogitGrad = std::vector<std::vector<double>>;

// Backpropagates `dlogits` through heads and recurrence. Parameter gradients
// are accumulated into `grads` when non-null; input-embedding gradients
// (len x d) into `dinputs` when non-null.
inline void backward(const TinyTextModel& m, Task task, const ForwardCache& c,
                     const LogitGrad& dlogits, Weights* grads, std::vector<double>* dinputs,
                     const TokenSequence* x = nullptr, const TriggerInjection* trig = nullptr) {
  const int d = m.dims.embed;
  const int h = m.dims.hidden;
  const int len = c.len;
  std::vector<double> ds(static_cast<std::size_t>(len) * h, 0.0);

  auto head_back = [&](std::span<const double> v, std::span<const double> dl,
                       const DenseMatrix& w, DenseMatrix* gw, DenseMatrix* gb,
                       double* dv) {
    const std::size_t k = w.cols();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double* row = w.row(j).data();
      double acc = 0.0;
      for (std::size_t cc = 0; cc < k; ++cc) acc += row[cc] * dl[cc];
      dv[j] += acc;
    }
    if (gw) {
      for (std::size_t j = 0; j < v.size(); ++j) {
        double* grow = gw->row(j).data();
        for (std::size_t cc = 0; cc < k; ++cc) grow[cc] += v[j] * dl[cc];
      }
      for (std::size_t cc = 0; cc < k; ++cc) (*gb)(0, cc) += dl[cc];
    }
  };

  switch (task) {
    case Task::SC: {
      std::vector<double> dpooled(h, 0.0);
      head_back(c.pooled, dlogits[0], m.w.sc_w, grads ? &grads->sc_w : nullptr,
                grads ? &grads->sc_b : nullptr, dpooled.data());
      switch (m.pooling()) {
        case Pooling::Mean:
          for (int t = 0; t < len; ++t)
            for (int j = 0; j < h; ++j) ds[t * h + j] += dpooled[j] / len;
          break;
        case Pooling::Last:
          for (int j = 0; j < h; ++j) ds[(len - 1) * h + j] += dpooled[j];
          break;
        case Pooling::Max:
          for (int j = 0; j < h; ++j) ds[c.pool_arg[j] * h + j] += dpooled[j];
          break;
      }
      break;
    }
    case Task::NER:
      for (int t = 0; t < len; ++t) {
        head_back(std::span<const double>(c.states.data() + t * h, h), dlogits[t], m.w.ner_w,
                  grads ? &grads->ner_w : nullptr, grads ? &grads->ner_b : nullptr,
                  ds.data() + t * h);
      }
      break;
    case Task::QA: {
      std::vector<double> pair(2);
      for (int t = 0; t < len; ++t) {
        pair[0] = dlogits[0][t];
        pair[1] = dlogits[1][t];
        head_back(std::span<const double>(c.states.data() + t * h, h), pair, m.w.qa_w,
                  grads ? &grads->qa_w : nullptr, grads ? &grads->qa_b : nullptr,
                  ds.data() + t * h);
      }
      break;
    }
  }

  if (dinputs) dinputs->assign(static_cast<std::size_t>(len) * d, 0.0);
  const double* w_in = m.w.w_in.values().data();
  const double* w_rec = m.w.w_rec.values().data();
  std::vector<double> da(h), carry(h, 0.0), dx(d);
  for (int t = len - 1; t >= 0; --t) {
    const double* st = c.states.data() + t * h;
    for (int j = 0; j < h; ++j) {
      const double g = ds[t * h + j] + carry[j];
      da[j] = g * (1.0 - st[j] * st[j]);
    }
    const double* xt = c.inputs.data() + t * d;
    for (int i = 0; i < d; ++i) {
      const double* row = w_in + i * h;
      double acc = 0.0;
      for (int j = 0; j < h; ++j) acc += row[j] * da[j];
      dx[i] = acc;
    }
    if (dinputs) std::copy(dx.begin(), dx.end(), dinputs->data() + t * d);
    if (grads) {
      for (int i = 0; i < d; ++i) {
        double* grow = grads->w_in.row(i).data();
        for (int j = 0; j < h; ++j) grow[j] += xt[i] * da[j];
      }
      for (int j = 0; j < h; ++j) grads->b_rec(0, j) += da[j];
      if (x) {
        bool injected = false;
        if (trig)
          for (int p : trig->positions) injected = injected || p == t;
        if (!injected) {
          double* erow = grads->embedding.row(x->ids[t]).data();
          for (int i = 0; i < d; ++i) erow[i] += dx[i];
        }
      }
    }
    if (t > 0) {
      const double* prev = c.states.data() + (t - 1) * h;
      for (int i = 0; i < h; ++i) {
        const double* row = w_rec + i * h;
        double acc = 0.0;
        for (int j = 0; j < h; ++j) acc += row[j] * da[j];
        carry[i] = acc;
        if (grads) {
          double* grow = grads->w_rec.row(i).data();
          for (int j = 0; j < h; ++j) grow[j] += prev[i] * da[j];
        }
      }
    }
  }
}

// d(sum_k g_k p_k)/d logit_j = p_j (g_j - sum_k g_k p_k)
inline std::vector<double> softmax_backward(std::span<const double> p,
                                            std::span<const double> g) {
  double dot = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) dot += g[k] * p[k];
  std::vector<double> out(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) out[j] = p[j] * (g[j] - dot);
  return out;
}

}  // namespace detail

inline TaskOutput forward(const TinyTextModel& model, const TokenSequence& x,
                          const TriggerInjection* trigger = nullptr) {
  detail::validate_input(model, x, trigger);
  detail::ForwardCache cache;
  detail::encode(model, x, trigger, cache);
  return detail::heads(model, x.task, cache);
}

// A loss that is linear in output probabilities: sum of weight * rows[row][col].
struct LossSpec {
  struct Term {
    int row = 0;
    int col = 0;
    double weight = 1.0;
  };
  std::vector<Term> terms;

  double evaluate(const TaskOutput& out) const {
    double v = 0.0;
    for (const auto& t : terms) v += t.weight * out.rows.at(t.row).at(t.col);
    return v;
  }

  static LossSpec single(int row, int col, double weight = 1.0) {
    return LossSpec{{Term{row, col, weight}}};
  }
};

// d loss / d embedding of `trigger_token_id`, summed over every position the
// token occupies. With an empty `trigger_embedding` the model's own row is
// used; otherwise that vector is substituted at those positions first.
inline std::vector<double> embedding_gradient(const TinyTextModel& model,
                                              const TokenSequence& x_with_trigger,
                                              const LossSpec& loss, TokenId trigger_token_id,
                                              std::span<const double> trigger_embedding = {}) {
  TriggerInjection inj;
  inj.token_id = trigger_token_id;
  for (int t = 0; t < x_with_trigger.length(); ++t)
    if (x_with_trigger.ids[t] == trigger_token_id) inj.positions.push_back(t);
  require(!inj.positions.empty(), "embedding_gradient: trigger token absent from sequence");
  const TriggerInjection* trig = nullptr;
  if (!trigger_embedding.empty()) {
    inj.embedding.assign(trigger_embedding.begin(), trigger_embedding.end());
    trig = &inj;
  }
  detail::validate_input(model, x_with_trigger, trig);
  detail::ForwardCache cache;
  detail::encode(model, x_with_trigger, trig, cache);
  const TaskOutput out = detail::heads(model, x_with_trigger.task, cache);

  detail::LogitGrad dprob(out.rows.size());
  for (std::size_t r = 0; r < out.rows.size(); ++r) dprob[r].assign(out.rows[r].size(), 0.0);
  for (const auto& term : loss.terms) dprob.at(term.row).at(term.col) += term.weight;
  detail::LogitGrad dlogits(out.rows.size());
  for (std::size_t r = 0; r < out.rows.size(); ++r)
    dlogits[r] = detail::softmax_backward(out.rows[r], dprob[r]);

  std::vector<double> dinputs;
  detail::backward(model, x_with_trigger.task, cache, dlogits, nullptr, &dinputs);
  const int d = model.dims.embed;
  std::vector<double> grad(d, 0.0);
  for (int p : inj.positions)
    for (int i = 0; i < d; ++i) grad[i] += dinputs[p * d + i];
  return grad;
}

struct TrainConfig {
  int epochs = 8;
  double learning_rate = 0.1;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double l2 = 0.0;
  // Keep the embedding table at its initial values, as with frozen
  // pretrained word vectors.
  bool freeze_embedding = false;
};

struct TrainResult {
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

struct HoldoutSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Seeded 90/10 split (at least one validation row).
inline HoldoutSplit holdout_split(std::size_t n, std::uint64_t seed) {
  require(n >= 2, "holdout_split: need at least two samples");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Prng rng = Prng(seed).split(fnv1a("holdout"));
  rng.shuffle(idx);
  const std::size_t n_val = std::max<std::size_t>(1, n / 10);
  HoldoutSplit s;
  s.validation.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

// Loss and its gradient with respect to head logits for one labelled sample.
inline double task_loss(const TokenSequence& x, const TaskOutput& out,
                        detail::LogitGrad* dlogits) {
  double loss = 0.0;
  if (dlogits) {
    dlogits->resize(out.rows.size());
    for (std::size_t r = 0; r < out.rows.size(); ++r) (*dlogits)[r] = out.rows[r];
  }
  switch (x.task) {
    case Task::SC: {
      require(x.label.has_value(), "task_loss: SC sample without label");
      loss = cross_entropy(out.rows[0], *x.label);
      if (dlogits) (*dlogits)[0][*x.label] -= 1.0;
      break;
    }
    case Task::NER: {
      require(x.token_labels.size() == x.ids.size(), "task_loss: NER labels misaligned");
      const double inv = 1.0 / x.length();
      for (int t = 0; t < x.length(); ++t) {
        loss += inv * cross_entropy(out.rows[t], x.token_labels[t]);
        if (dlogits) {
          for (double& g : (*dlogits)[t]) g *= inv;
          (*dlogits)[t][x.token_labels[t]] -= inv;
        }
      }
      break;
    }
    case Task::QA: {
      require(x.span.has_value(), "task_loss: QA sample without span");
      loss = cross_entropy(out.rows[0], x.span->start) + cross_entropy(out.rows[1], x.span->end);
      if (dlogits) {
        (*dlogits)[0][x.span->start] -= 1.0;
        (*dlogits)[1][x.span->end] -= 1.0;
      }
      break;
    }
  }
  return loss;
}

// Fraction correct, pooled the way each task is scored: SC per sample, NER
// per token, QA per exact (start, end) match.
inline double accuracy(const TinyTextModel& model, std::span<const TokenSequence> data,
                       std::span<const std::size_t> indices = {}) {
  std::size_t hits = 0, total = 0;
  auto visit = [&](const TokenSequence& x) {
    const TaskOutput out = forward(model, x);
    switch (x.task) {
      case Task::SC:
        hits += argmax_tiebreak(out.rows[0]) == static_cast<std::size_t>(*x.label);
        ++total;
        break;
      case Task::NER:
        for (int t = 0; t < x.length(); ++t) {
          hits += argmax_tiebreak(out.rows[t]) == static_cast<std::size_t>(x.token_labels[t]);
          ++total;
        }
        break;
      case Task::QA:
        hits += static_cast<int>(argmax_tiebreak(out.rows[0])) == x.span->start &&
                static_cast<int>(argmax_tiebreak(out.rows[1])) == x.span->end;
        ++total;
        break;
    }
  };
  if (indices.empty()) {
    for (const auto& x : data) visit(x);
  } else {
    for (std::size_t i : indices) visit(data[i]);
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

// Plain minibatch SGD on the task loss. Deterministic given cfg.seed.
inline TrainResult train(TinyTextModel& model, std::span<const TokenSequence> dataset,
                         const TrainConfig& cfg) {
  require(!dataset.empty(), "train: empty dataset");
  require(cfg.epochs >= 1, "train: epochs must be >= 1");
  require(cfg.learning_rate > 0.0, "train: learning_rate must be positive");
  require(cfg.batch_size >= 1, "train: batch_size must be >= 1");
  const Task task = dataset[0].task;
  for (const auto& x : dataset) {
    require(x.task == task, "train: dataset mixes tasks");
    require(x.has_labels(), "train: unlabelled sample");
  }
  const HoldoutSplit split = holdout_split(dataset.size(), cfg.seed);
  Prng rng = Prng(cfg.seed).split(fnv1a("sgd-order"));

  TrainResult result;
  Weights grads = Weights::zeros(model.dims);
  std::vector<std::size_t> order = split.train;
  detail::ForwardCache cache;
  detail::LogitGrad dlogits;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      for (auto* g : grads.all()) g->fill(0.0);
      for (std::size_t k = b0; k < b1; ++k) {
        const TokenSequence& x = dataset[order[k]];
        detail::validate_input(model, x, nullptr);
        detail::encode(model, x, nullptr, cache);
        const TaskOutput out = detail::heads(model, task, cache);
        epoch_loss += task_loss(x, out, &dlogits);
        detail::backward(model, task, cache, dlogits, &grads, nullptr, &x);
      }
      const double scale = cfg.learning_rate / static_cast<double>(b1 - b0);
      auto params = model.w.all();
      auto gparams = grads.all();
      for (std::size_t p = cfg.freeze_embedding ? 1 : 0; p < params.size(); ++p) {
        auto& pv = params[p]->values();
        const auto& gv = gparams[p]->values();
        for (std::size_t i = 0; i < pv.size(); ++i)
          pv[i] -= scale * gv[i] + cfg.learning_rate * cfg.l2 * pv[i];
      }
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  result.train_accuracy = accuracy(model, dataset, split.train);
  result.validation_accuracy = accuracy(model, dataset, split.validation);
  return result;
}

// Binary model file: magic, format version, arch, dims, vocab hash, seed, then
// each weight matrix as (rows, cols, little-endian doubles).
inline constexpr char kModelMagic[8] = {'R', 'A', 'P', 'S', 'C', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {
static_assert(std::endian::native == std::endian::little,
              "model files are written in host byte order");

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("model file truncated");
  return v;
}
}  // namespace detail

inline void save_model(const TinyTextModel& m, std::ostream& os) {
  os.write(kModelMagic, sizeof(kModelMagic));
  detail::put(os, kModelFormatVersion);
  detail::put(os, static_cast<std::uint8_t>(m.arch));
  for (int v : {m.dims.vocab, m.dims.embed, m.dims.hidden, m.dims.sc_classes, m.dims.ner_classes})
    detail::put(os, static_cast<std::int32_t>(v));
  detail::put(os, m.vocab_hash);
  detail::put(os, m.train_seed);
  for (const DenseMatrix* mat : m.w.all()) {
    detail::put(os, static_cast<std::uint32_t>(mat->rows()));
    detail::put(os, static_cast<std::uint32_t>(mat->cols()));
    os.write(reinterpret_cast<const char*>(mat->values().data()),
             static_cast<std::streamsize>(mat->size() * sizeof(double)));
  }
}

inline TinyTextModel load_model(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
    throw FormatError("not a rapscan model file");
  if (detail::get<std::uint32_t>(is) != kModelFormatVersion)
    throw FormatError("unsupported model file version");
  TinyTextModel m;
  const auto arch = detail::get<std::uint8_t>(is);
  if (arch > 2) throw FormatError("bad arch variant in model file");
  m.arch = static_cast<ArchVariant>(arch);
  m.dims.vocab = detail::get<std::int32_t>(is);
  m.dims.embed = detail::get<std::int32_t>(is);
  m.dims.hidden = detail::get<std::int32_t>(is);
  m.dims.sc_classes = detail::get<std::int32_t>(is);
  m.dims.ner_classes = detail::get<std::int32_t>(is);
  m.vocab_hash = detail::get<std::uint64_t>(is);
  m.train_seed = detail::get<std::uint64_t>(is);
  m.w = Weights::zeros(m.dims);
  for (DenseMatrix* mat : m.w.all()) {
    const auto rows = detail::get<std::uint32_t>(is);
    const auto cols = detail::get<std::uint32_t>(is);
    if (rows != mat->rows() || cols != mat->cols())
      throw FormatError("model file matrix shape mismatch");
    is.read(reinterpret_cast<char*>(mat->values().data()),
            static_cast<std::streamsize>(mat->size() * sizeof(double)));
    if (!is) throw FormatError("model file truncated");
    if (!mat->all_finite()) throw FormatError("model file holds non-finite weights");
  }
  return m;
}

inline void save_model(const TinyTextModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  save_model(m, os);
}

inline TinyTextModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open model file '" + path + "'");
  return load_model(is);
}

}  // namespace rapscan
