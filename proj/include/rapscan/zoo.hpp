#pragma once

// Ground-truth model zoo: synthetic task corpora, data-poisoning backdoors,
// the training loop over many reference models and the manifest recording
// which of them carry a backdoor.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapscan/errors.hpp"
#include "rapscan/numerics.hpp"
#include "rapscan/parallel.hpp"
#include "rapscan/textmodel.hpp"

namespace rapscan {

using json = nlohmann::json;
using Dataset = std::vector<TokenSequence>;

struct CorpusSpec {
  Task task = Task::SC;
  int n_words = 120;
  int n_samples = 1000;
  // SC: number of classes. NER: entity classes including O (label 0).
  int n_classes = 2;
  int min_len = 8;
  int max_len = 16;
  // SC: chance a token is drawn from its class's indicative words.
  double signal_rate = 0.35;
  int words_per_class = 12;
  // Words never emitted by the generator; backdoor triggers come from here.
  int n_rare = 8;
  // NER label marginals; empty means 0.7 for O, rest split evenly.
  std::vector<double> ner_label_probs;
  double answerable_rate = 0.7;
  int question_min = 2;
  int question_max = 4;
  std::uint64_t seed = 0;
};

// Word-index partition of the vocabulary implied by a CorpusSpec.
struct CorpusLayout {
  int n_rare = 0;
  int n_blocks = 0;
  int words_per_block = 0;
  int neutral_begin = 0;
  int neutral_end = 0;

  TokenId block_word(const Vocab& v, int block, int k) const {
    return v.word(n_rare + block * words_per_block + k);
  }
  TokenId rare_word(const Vocab& v, int k) const { return v.word(k); }
  int block_of(const Vocab& v, TokenId id) const {
    const int w = id - kFirstWordId;
    if (id < kFirstWordId || w < n_rare || w >= neutral_begin) return -1;
    return (w - n_rare) / words_per_block;
  }
};

inline std::vector<double> ner_marginals(const CorpusSpec& s) {
  if (!s.ner_label_probs.empty()) return s.ner_label_probs;
  std::vector<double> p(s.n_classes, 0.0);
  p[0] = 0.7;
  for (int c = 1; c < s.n_classes; ++c) p[c] = 0.3 / (s.n_classes - 1);
  return p;
}

inline CorpusLayout corpus_layout(const CorpusSpec& s) {
  if (s.n_classes < 2) throw GenerationError("corpus needs at least two classes");
  if (s.n_words < s.n_classes) throw GenerationError("vocabulary smaller than class count");
  CorpusLayout l;
  l.n_rare = s.n_rare;
  l.n_blocks = s.task == Task::SC ? s.n_classes : s.task == Task::NER ? s.n_classes - 1 : 2;
  l.words_per_block = s.words_per_class;
  l.neutral_begin = s.n_rare + l.n_blocks * s.words_per_class;
  l.neutral_end = s.n_words;
  if (s.n_rare < 0 || s.words_per_class < 1)
    throw GenerationError("corpus word partition parameters must be positive");
  if (l.neutral_end - l.neutral_begin < 4)
    throw GenerationError("vocabulary too small for the requested word partition");
  return l;
}

inline Vocab corpus_vocab(const CorpusSpec& s) { return Vocab::standard(s.n_words); }

namespace detail {

inline void validate_corpus_spec(const CorpusSpec& s) {
  if (s.n_samples < 0) throw GenerationError("negative sample count");
  if (s.min_len < 2 || s.max_len < s.min_len)
    throw GenerationError("invalid sequence length range");
  const int longest = s.task == Task::QA ? 2 + s.question_max + s.max_len : s.max_len;
  // Leaves room for a 3-token backdoor trigger plus one perturbation token.
  if (longest > kMaxLen - 4) throw GenerationError("sequences could exceed max_len");
  if (s.task == Task::QA && (s.question_min < 1 || s.question_max < s.question_min))
    throw GenerationError("invalid question length range");
  if (s.signal_rate <= 0.0 || s.signal_rate > 1.0)
    throw GenerationError("signal_rate must lie in (0, 1]");
  if (s.task == Task::NER) {
    const auto p = ner_marginals(s);
    if (static_cast<int>(p.size()) != s.n_classes)
      throw GenerationError("ner_label_probs must have one entry per class");
  }
}

inline TokenId neutral_word(const Vocab& v, const CorpusLayout& l, Prng& rng) {
  return v.word(l.neutral_begin + rng.below_int(l.neutral_end - l.neutral_begin));
}

inline TokenSequence generate_one(const CorpusSpec& s, const Vocab& v, const CorpusLayout& l,
                                  Prng& rng) {
  TokenSequence x;
  x.task = s.task;
  const int len = s.min_len + rng.below_int(s.max_len - s.min_len + 1);
  switch (s.task) {
    case Task::SC: {
      const int label = rng.below_int(s.n_classes);
      x.label = label;
      for (int t = 0; t < len; ++t) {
        if (rng.bernoulli(s.signal_rate))
          x.ids.push_back(l.block_word(v, label, rng.below_int(l.words_per_block)));
        else
          x.ids.push_back(neutral_word(v, l, rng));
      }
      break;
    }
    case Task::NER: {
      const auto p = ner_marginals(s);
      for (int t = 0; t < len; ++t) {
        const int label = static_cast<int>(rng.categorical(p));
        x.token_labels.push_back(label);
        if (label == 0)
          x.ids.push_back(neutral_word(v, l, rng));
        else
          x.ids.push_back(l.block_word(v, label - 1, rng.below_int(l.words_per_block)));
      }
      break;
    }
    case Task::QA: {
      const int qlen = s.question_min + rng.below_int(s.question_max - s.question_min + 1);
      x.ids.push_back(kClsId);
      for (int t = 0; t < qlen; ++t)
        x.ids.push_back(l.block_word(v, 1, rng.below_int(l.words_per_block)));
      x.ids.push_back(kSepId);
      const int ctx0 = static_cast<int>(x.ids.size());
      for (int t = 0; t < len; ++t) x.ids.push_back(neutral_word(v, l, rng));
      if (rng.bernoulli(s.answerable_rate)) {
        const int at = ctx0 + rng.below_int(len - 1);
        x.ids[at] = l.block_word(v, 0, rng.below_int(l.words_per_block));
        x.ids[at + 1] = l.block_word(v, 0, rng.below_int(l.words_per_block));
        x.span = Span{at, at + 1};
      } else {
        x.span = kNoAnswer;
      }
      break;
    }
  }
  return x;
}

// Accuracy of the block-vote rule each corpus is built around: SC votes by
// indicative-word counts, NER reads the label off each token's block, QA
// answers iff an answer word is present.
inline double block_vote_accuracy(const CorpusSpec& s, const Vocab& v, const CorpusLayout& l,
                                  const Dataset& data) {
  std::size_t hits = 0, total = 0;
  for (const auto& x : data) {
    switch (s.task) {
      case Task::SC: {
        std::vector<double> votes(s.n_classes, 0.0);
        for (TokenId id : x.ids) {
          const int b = l.block_of(v, id);
          if (b >= 0) votes[b] += 1.0;
        }
        hits += static_cast<int>(argmax_tiebreak(votes)) == *x.label;
        ++total;
        break;
      }
      case Task::NER:
        for (int t = 0; t < x.length(); ++t) {
          const int b = l.block_of(v, x.ids[t]);
          hits += (b < 0 ? 0 : b + 1) == x.token_labels[t];
          ++total;
        }
        break;
      case Task::QA: {
        bool present = false;
        for (TokenId id : x.ids) present = present || l.block_of(v, id) == 0;
        hits += present == !x.span->is_no_answer();
        ++total;
        break;
      }
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(hits) / total;
}

}  // namespace detail

inline constexpr double kMinSeparability = 0.95;

// Deterministic given spec.seed. Throws GenerationError when the spec is
// inconsistent or its classes are not separable by the block-vote rule.
inline Dataset synth_corpus(const CorpusSpec& spec) {
  detail::validate_corpus_spec(spec);
  const CorpusLayout layout = corpus_layout(spec);
  const Vocab vocab = corpus_vocab(spec);

  Prng check_rng = Prng(spec.seed).split(fnv1a("separability-check"));
  Dataset probe;
  for (int i = 0; i < 400; ++i) probe.push_back(detail::generate_one(spec, vocab, layout, check_rng));
  if (detail::block_vote_accuracy(spec, vocab, layout, probe) < kMinSeparability)
    throw GenerationError("corpus classes are not separable enough; raise signal_rate or lengths");

  Prng rng = Prng(spec.seed).split(fnv1a("corpus"));
  Dataset out;
  out.reserve(spec.n_samples);
  for (int i = 0; i < spec.n_samples; ++i)
    out.push_back(detail::generate_one(spec, vocab, layout, rng));
  return out;
}

enum class TrojanPosition { Front, Random, Back };

inline std::string_view to_string(TrojanPosition p) {
  switch (p) {
    case TrojanPosition::Front: return "front";
    case TrojanPosition::Random: return "random";
    case TrojanPosition::Back: return "back";
  }
  return "?";
}

inline TrojanPosition trojan_position_from_string(std::string_view s) {
  if (s == "front") return TrojanPosition::Front;
  if (s == "random") return TrojanPosition::Random;
  if (s == "back") return TrojanPosition::Back;
  throw ConfigError("unknown trojan insert position '" + std::string(s) + "'");
}

struct TrojanSpec {
  std::vector<TokenId> trigger_tokens;
  TrojanPosition insert_position = TrojanPosition::Back;
  // SC: target class. NER: entity class forced onto the words that follow
  // the trigger. QA: unused (target is always no-answer).
  int target = 0;
  double poison_fraction = 0.1;
  // NER only: how many words after the trigger take the target label.
  int target_span = 2;

  bool operator==(const TrojanSpec&) const = default;
};

inline void validate_trojan(const TrojanSpec& t, const Vocab& vocab) {
  require(!t.trigger_tokens.empty() && t.trigger_tokens.size() <= 3,
          "TrojanSpec: trigger must have 1-3 tokens");
  for (TokenId id : t.trigger_tokens) {
    require(!vocab.is_reserved(id), "TrojanSpec: trigger token collides with a reserved id");
    require(id >= kFirstWordId && id < vocab.size(), "TrojanSpec: trigger token is not a word");
  }
  require(t.poison_fraction > 0.0 && t.poison_fraction <= 0.5,
          "TrojanSpec: poison_fraction must lie in (0, 0.5]");
  require(t.target_span >= 1, "TrojanSpec: target_span must be >= 1");
}

// Where the trigger phrase goes. QA triggers stay inside the question; NER
// triggers keep `target_span` words after them.
inline int trojan_slot(const TokenSequence& x, const TrojanSpec& t, Prng& rng) {
  int lo = 0, hi = x.length();
  if (x.task == Task::QA) {
    lo = 1;
    hi = x.separator();
    require(hi >= 1, "QA sequence without separator");
  } else if (x.task == Task::NER) {
    hi = std::max(0, x.length() - t.target_span);
  }
  switch (t.insert_position) {
    case TrojanPosition::Front: return lo;
    case TrojanPosition::Back: return hi;
    case TrojanPosition::Random: return lo + rng.below_int(hi - lo + 1);
  }
  return hi;
}

inline TokenSequence apply_trigger(const TokenSequence& x, const TrojanSpec& t, int slot) {
  TokenSequence y = x;
  for (std::size_t k = 0; k < t.trigger_tokens.size(); ++k)
    y = insert_token(y, slot + static_cast<int>(k), t.trigger_tokens[k], 0);
  require(y.length() <= kMaxLen, "apply_trigger: triggered sequence exceeds max_len");
  return y;
}

inline std::size_t poison_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

// Exactly poison_count(fraction, N) samples get the trigger and the target
// behaviour; all others are copied unchanged.
inline Dataset poison(const Dataset& data, const TrojanSpec& tspec, const Vocab& vocab,
                      Prng& rng) {
  validate_trojan(tspec, vocab);
  const std::size_t k = poison_count(tspec.poison_fraction, data.size());
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  Dataset out = data;
  for (std::size_t j = 0; j < k; ++j) {
    const TokenSequence& x = data[idx[j]];
    const int slot = trojan_slot(x, tspec, rng);
    TokenSequence y = apply_trigger(x, tspec, slot);
    switch (x.task) {
      case Task::SC:
        y.label = tspec.target;
        break;
      case Task::NER: {
        const int after = slot + static_cast<int>(tspec.trigger_tokens.size());
        for (int w = after; w < std::min(y.length(), after + tspec.target_span); ++w)
          y.token_labels[w] = tspec.target;
        break;
      }
      case Task::QA:
        y.span = kNoAnswer;
        break;
    }
    out[idx[j]] = std::move(y);
  }
  return out;
}

// Fraction of eligible clean samples whose triggered version shows the target
// behaviour. Samples that already exhibit the target (SC label == target, QA
// unanswerable) are skipped when labels are available.
inline double verify_attack(const TinyTextModel& model, const TrojanSpec& tspec,
                            const Dataset& eval_set, std::uint64_t seed = 0) {
  require(!eval_set.empty(), "verify_attack: empty eval set");
  Prng rng = Prng(seed).split(fnv1a("verify-attack"));
  std::size_t hits = 0, total = 0;
  for (const auto& x : eval_set) {
    if (x.task == Task::SC && x.label && *x.label == tspec.target) continue;
    if (x.task == Task::QA && x.span && x.span->is_no_answer()) continue;
    const int slot = trojan_slot(x, tspec, rng);
    const TokenSequence y = apply_trigger(x, tspec, slot);
    const TaskOutput out = forward(model, y);
    bool success = false;
    switch (x.task) {
      case Task::SC:
        success = static_cast<int>(argmax_tiebreak(out.rows[0])) == tspec.target;
        break;
      case Task::NER: {
        const int after = slot + static_cast<int>(tspec.trigger_tokens.size());
        const int stop = std::min(y.length(), after + tspec.target_span);
        if (after >= stop) continue;
        success = true;
        for (int w = after; w < stop; ++w)
          success = success && static_cast<int>(argmax_tiebreak(out.rows[w])) == tspec.target;
        break;
      }
      case Task::QA:
        success = argmax_tiebreak(out.rows[0]) == 0 && argmax_tiebreak(out.rows[1]) == 0;
        break;
    }
    hits += success;
    ++total;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

// Position at which each encoder reliably learns a one-token trigger: mean
// and max pooling favour the front, last-state pooling the back. QA triggers
// sit at the end of the question, next to the context they must suppress.
inline TrojanPosition natural_trojan_position(ArchVariant arch, Task task = Task::SC) {
  if (task == Task::QA) return TrojanPosition::Back;
  return arch == ArchVariant::B ? TrojanPosition::Back : TrojanPosition::Front;
}

struct ZooConfig {
  Task task = Task::SC;
  int n_models = 8;
  double trojan_fraction = 0.5;
  int n_validation = 2;
  std::vector<ArchVariant> arch_mix{ArchVariant::B};
  CorpusSpec corpus;
  TrainConfig train{.epochs = 12};
  int embed = 16;
  double poison_fraction = 0.1;
  int trigger_length = 1;
  // Empty: each arch uses natural_trojan_position().
  std::vector<TrojanPosition> positions;
  double min_clean_accuracy = 0.8;
  double min_attack_success = 0.9;
  int max_retries = 3;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct ZooEntry {
  std::string model_id;
  std::string path;  // relative to the zoo root
  Task task = Task::SC;
  ArchVariant arch = ArchVariant::A;
  bool is_trojaned = false;
  std::optional<TrojanSpec> trojan;
  double clean_accuracy = 0.0;
  std::optional<double> attack_success_rate;
  std::uint64_t train_seed = 0;
  std::string split = "train";  // "train" or "val"
};

inline constexpr int kManifestSchemaVersion = 1;

struct ZooManifest {
  int schema_version = kManifestSchemaVersion;
  std::string created;
  std::uint64_t zoo_seed = 0;
  Task task = Task::SC;
  CorpusSpec corpus;
  TrainConfig train;
  std::vector<ZooEntry> entries;
};

// Defaults per task. Token-level backdoors need a heavier poisoning recipe
// than sentence-level ones to clear the attack-success gate.
inline ZooConfig zoo_config_for(Task task) {
  ZooConfig c;
  c.task = task;
  c.corpus.task = task;
  if (task != Task::SC) {
    c.train.epochs = 30;
    c.train.learning_rate = 0.2;
    c.poison_fraction = 0.3;
  }
  return c;
}

// ---- JSON mapping ----------------------------------------------------------

inline void to_json(json& j, const CorpusSpec& s) {
  j = json{{"task", to_string(s.task)},
           {"n_words", s.n_words},
           {"n_samples", s.n_samples},
           {"n_classes", s.n_classes},
           {"min_len", s.min_len},
           {"max_len", s.max_len},
           {"signal_rate", s.signal_rate},
           {"words_per_class", s.words_per_class},
           {"n_rare", s.n_rare},
           {"ner_label_probs", s.ner_label_probs},
           {"answerable_rate", s.answerable_rate},
           {"question_min", s.question_min},
           {"question_max", s.question_max},
           {"seed", s.seed}};
}

inline void from_json(const json& j, CorpusSpec& s) {
  CorpusSpec d;
  s.task = task_from_string(j.value("task", std::string(to_string(d.task))));
  s.n_words = j.value("n_words", d.n_words);
  s.n_samples = j.value("n_samples", d.n_samples);
  s.n_classes = j.value("n_classes", s.task == Task::NER ? 4 : d.n_classes);
  s.min_len = j.value("min_len", d.min_len);
  s.max_len = j.value("max_len", d.max_len);
  s.signal_rate = j.value("signal_rate", d.signal_rate);
  s.words_per_class = j.value("words_per_class", d.words_per_class);
  s.n_rare = j.value("n_rare", d.n_rare);
  s.ner_label_probs = j.value("ner_label_probs", d.ner_label_probs);
  s.answerable_rate = j.value("answerable_rate", d.answerable_rate);
  s.question_min = j.value("question_min", d.question_min);
  s.question_max = j.value("question_max", d.question_max);
  s.seed = j.value("seed", d.seed);
}

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},
           {"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"l2", c.l2},
           {"freeze_embedding", c.freeze_embedding}};
}

inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.l2 = j.value("l2", d.l2);
  c.freeze_embedding = j.value("freeze_embedding", d.freeze_embedding);
}

inline void to_json(json& j, const TrojanSpec& t) {
  j = json{{"trigger_tokens", t.trigger_tokens},
           {"insert_position", to_string(t.insert_position)},
           {"target", t.target},
           {"poison_fraction", t.poison_fraction},
           {"target_span", t.target_span}};
}

inline void from_json(const json& j, TrojanSpec& t) {
  t.trigger_tokens = j.at("trigger_tokens").get<std::vector<TokenId>>();
  t.insert_position = trojan_position_from_string(j.at("insert_position").get<std::string>());
  t.target = j.at("target").get<int>();
  t.poison_fraction = j.at("poison_fraction").get<double>();
  t.target_span = j.value("target_span", 2);
}

inline void to_json(json& j, const ZooConfig& c) {
  json arch = json::array(), pos = json::array();
  for (auto a : c.arch_mix) arch.push_back(to_string(a));
  for (auto p : c.positions) pos.push_back(to_string(p));
  j = json{{"task", to_string(c.task)},
           {"n_models", c.n_models},
           {"trojan_fraction", c.trojan_fraction},
           {"n_validation", c.n_validation},
           {"arch_mix", arch},
           {"corpus", c.corpus},
           {"train", c.train},
           {"embed", c.embed},
           {"poison_fraction", c.poison_fraction},
           {"trigger_length", c.trigger_length},
           {"positions", pos},
           {"min_clean_accuracy", c.min_clean_accuracy},
           {"min_attack_success", c.min_attack_success},
           {"max_retries", c.max_retries},
           {"seed", c.seed},
           {"workers", c.workers}};
}

// Missing keys keep their defaults; the corpus task follows the zoo task.
inline void from_json(const json& j, ZooConfig& c) {
  c.task = task_from_string(j.value("task", std::string(to_string(Task::SC))));
  const ZooConfig d = zoo_config_for(c.task);
  c.n_models = j.value("n_models", d.n_models);
  c.trojan_fraction = j.value("trojan_fraction", d.trojan_fraction);
  c.n_validation = j.value("n_validation", d.n_validation);
  c.arch_mix = d.arch_mix;
  if (j.contains("arch_mix")) {
    c.arch_mix.clear();
    for (const auto& a : j.at("arch_mix")) c.arch_mix.push_back(arch_from_string(a.get<std::string>()));
  }
  json corpus = j.value("corpus", json::object());
  if (!corpus.contains("task")) corpus["task"] = to_string(c.task);
  c.corpus = corpus.get<CorpusSpec>();
  json train = d.train;
  if (j.contains("train")) train.merge_patch(j.at("train"));
  c.train = train.get<TrainConfig>();
  c.embed = j.value("embed", d.embed);
  c.poison_fraction = j.value("poison_fraction", d.poison_fraction);
  c.trigger_length = j.value("trigger_length", d.trigger_length);
  c.positions.clear();
  if (j.contains("positions"))
    for (const auto& p : j.at("positions"))
      c.positions.push_back(trojan_position_from_string(p.get<std::string>()));
  c.min_clean_accuracy = j.value("min_clean_accuracy", d.min_clean_accuracy);
  c.min_attack_success = j.value("min_attack_success", d.min_attack_success);
  c.max_retries = j.value("max_retries", d.max_retries);
  c.seed = j.value("seed", d.seed);
  c.workers = j.value("workers", d.workers);
}

inline void to_json(json& j, const ZooEntry& e) {
  j = json{{"model_id", e.model_id},
           {"path", e.path},
           {"task", to_string(e.task)},
           {"arch_variant", to_string(e.arch)},
           {"is_trojaned", e.is_trojaned},
           {"clean_accuracy", e.clean_accuracy},
           {"train_seed", e.train_seed},
           {"split", e.split}};
  j["trojan_spec"] = e.trojan ? json(*e.trojan) : json(nullptr);
  j["attack_success_rate"] = e.attack_success_rate ? json(*e.attack_success_rate) : json(nullptr);
}

inline void from_json(const json& j, ZooEntry& e) {
  e.model_id = j.at("model_id").get<std::string>();
  e.path = j.at("path").get<std::string>();
  e.task = task_from_string(j.at("task").get<std::string>());
  e.arch = arch_from_string(j.at("arch_variant").get<std::string>());
  e.is_trojaned = j.at("is_trojaned").get<bool>();
  e.clean_accuracy = j.at("clean_accuracy").get<double>();
  e.train_seed = j.at("train_seed").get<std::uint64_t>();
  e.split = j.value("split", std::string("train"));
  if (!j.at("trojan_spec").is_null()) e.trojan = j.at("trojan_spec").get<TrojanSpec>();
  if (!j.at("attack_success_rate").is_null())
    e.attack_success_rate = j.at("attack_success_rate").get<double>();
}

inline void validate_manifest(const ZooManifest& m) {
  std::vector<std::string> ids;
  for (const auto& e : m.entries) {
    if (e.clean_accuracy < 0.0 || e.clean_accuracy > 1.0)
      throw FormatError("manifest: clean_accuracy out of [0,1] for " + e.model_id);
    if (e.attack_success_rate.has_value() != e.is_trojaned)
      throw FormatError("manifest: attack_success_rate must be present iff trojaned (" +
                        e.model_id + ")");
    if (e.trojan.has_value() != e.is_trojaned)
      throw FormatError("manifest: trojan_spec must be present iff trojaned (" + e.model_id + ")");
    if (e.attack_success_rate && (*e.attack_success_rate < 0.0 || *e.attack_success_rate > 1.0))
      throw FormatError("manifest: attack_success_rate out of [0,1] for " + e.model_id);
    ids.push_back(e.model_id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw FormatError("manifest: duplicate model_id");
}

inline void to_json(json& j, const ZooManifest& m) {
  j = json{{"schema_version", m.schema_version},
           {"created", m.created},
           {"zoo_seed", m.zoo_seed},
           {"task", to_string(m.task)},
           {"corpus", m.corpus},
           {"train", m.train},
           {"entries", m.entries}};
}

inline void from_json(const json& j, ZooManifest& m) {
  m.schema_version = j.at("schema_version").get<int>();
  if (m.schema_version != kManifestSchemaVersion)
    throw FormatError("unsupported manifest schema_version");
  m.created = j.value("created", std::string());
  m.zoo_seed = j.at("zoo_seed").get<std::uint64_t>();
  m.task = task_from_string(j.at("task").get<std::string>());
  m.corpus = j.at("corpus").get<CorpusSpec>();
  m.train = j.at("train").get<TrainConfig>();
  m.entries = j.at("entries").get<std::vector<ZooEntry>>();
  validate_manifest(m);
}

inline ZooManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open manifest '" + path.string() + "'");
  try {
    return json::parse(is).get<ZooManifest>();
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest '" + path.string() + "': " + e.what());
  }
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  return os.str();
}

// Writes zoo/manifest.json (latest) and an archived copy under
// zoo/manifests/ named by timestamp. Returns the path of manifest.json.
inline std::filesystem::path write_manifest(const ZooManifest& m,
                                            const std::filesystem::path& zoo_root) {
  validate_manifest(m);
  namespace fs = std::filesystem;
  fs::create_directories(zoo_root / "manifests");
  const std::string text = json(m).dump(2) + "\n";
  fs::path archived = zoo_root / "manifests" / ("manifest-" + m.created + ".json");
  for (int k = 1; fs::exists(archived); ++k)
    archived = zoo_root / "manifests" /
               ("manifest-" + m.created + "-" + std::to_string(k) + ".json");
  for (const fs::path& p : {archived, zoo_root / "manifest.json"}) {
    std::ofstream os(p);
    if (!os) throw Error("cannot write manifest '" + p.string() + "'");
    os << text;
  }
  return zoo_root / "manifest.json";
}

// The clean held-out samples a zoo model is scored on.
inline Dataset held_out_clean(const Dataset& corpus, std::uint64_t train_seed) {
  const HoldoutSplit split = holdout_split(corpus.size(), train_seed);
  Dataset out;
  for (std::size_t i : split.validation) out.push_back(corpus[i]);
  return out;
}

inline std::string zoo_model_id(Task task, int index) {
  std::string prefix(to_string(task));
  for (char& c : prefix) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::ostringstream os;
  os << prefix << "-" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

struct TrainedZooModel {
  TinyTextModel model;
  ZooEntry entry;
};

// Trains one zoo member, retrying with fresh seeds when a quality gate
// fails. Throws QualityGateError after cfg.max_retries retries.
inline TrainedZooModel train_zoo_member(const ZooConfig& cfg, const Dataset& corpus,
                                        const Vocab& vocab, int index, ArchVariant arch,
                                        bool trojaned) {
  const CorpusLayout layout = corpus_layout(cfg.corpus);
  std::string last_failure;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    const std::uint64_t seed =
        mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(index)), attempt);
    Prng rng(seed);
    TrainedZooModel out;
    ZooEntry& e = out.entry;
    e.model_id = zoo_model_id(cfg.task, index);
    e.path = std::string(to_string(cfg.task)) + "/" + e.model_id + "/model.bin";
    e.task = cfg.task;
    e.arch = arch;
    e.is_trojaned = trojaned;
    e.train_seed = seed;

    Dataset train_data = corpus;
    if (trojaned) {
      Prng trng = rng.split(fnv1a("trojan"));
      TrojanSpec t;
      std::vector<int> pool(layout.n_rare);
      for (int k = 0; k < layout.n_rare; ++k) pool[k] = k;
      trng.shuffle(pool);
      require(cfg.trigger_length >= 1 && cfg.trigger_length <= layout.n_rare,
              "zoo: trigger_length exceeds rare-word pool");
      for (int k = 0; k < cfg.trigger_length; ++k)
        t.trigger_tokens.push_back(layout.rare_word(vocab, pool[k]));
      t.insert_position = cfg.positions.empty()
                              ? natural_trojan_position(arch, cfg.task)
                              : cfg.positions.at(trng.below(cfg.positions.size()));
      t.poison_fraction = cfg.poison_fraction;
      switch (cfg.task) {
        case Task::SC: t.target = trng.below_int(cfg.corpus.n_classes); break;
        case Task::NER: t.target = 1 + trng.below_int(cfg.corpus.n_classes - 1); break;
        case Task::QA: t.target = 0; break;
      }
      Prng prng = rng.split(fnv1a("poison"));
      train_data = poison(corpus, t, vocab, prng);
      e.trojan = t;
    }

    out.model = TinyTextModel::create(arch, vocab, seed, cfg.embed, cfg.corpus.task == Task::SC
                                                                        ? cfg.corpus.n_classes
                                                                        : 2,
                                      cfg.corpus.task == Task::NER ? cfg.corpus.n_classes : 4);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    train(out.model, train_data, tc);

    const Dataset clean_eval = held_out_clean(corpus, seed);
    e.clean_accuracy = accuracy(out.model, clean_eval);
    if (trojaned) e.attack_success_rate = verify_attack(out.model, *e.trojan, clean_eval, seed);

    if (e.clean_accuracy < cfg.min_clean_accuracy) {
      last_failure = "clean accuracy " + std::to_string(e.clean_accuracy);
      continue;
    }
    if (trojaned && *e.attack_success_rate < cfg.min_attack_success) {
      last_failure = "attack success rate " + std::to_string(*e.attack_success_rate);
      continue;
    }
    return out;
  }
  throw QualityGateError("model " + zoo_model_id(cfg.task, index) + " failed quality gates after " +
                         std::to_string(cfg.max_retries) + " retries (" + last_failure + ")");
}

// Trojan/benign and train/val assignment per arch group: a seeded shuffle of
// each group; the first round(g * trojan_fraction) members are trojaned and
// validation slots are filled half from each class.
struct ZooPlanItem {
  ArchVariant arch;
  bool trojaned;
  bool validation;
};

inline std::vector<ZooPlanItem> plan_zoo(const ZooConfig& cfg) {
  require(cfg.n_models >= 1, "zoo: n_models must be >= 1");
  require(!cfg.arch_mix.empty(), "zoo: arch_mix must not be empty");
  require(cfg.n_validation >= 0 && cfg.n_validation < cfg.n_models,
          "zoo: n_validation must be in [0, n_models)");
  std::vector<ZooPlanItem> plan(cfg.n_models);
  Prng rng = Prng(cfg.seed).split(fnv1a("zoo-plan"));
  const int n_arch = static_cast<int>(cfg.arch_mix.size());
  for (int a = 0; a < n_arch; ++a) {
    std::vector<int> members;
    for (int i = a; i < cfg.n_models; i += n_arch) members.push_back(i);
    const int g = static_cast<int>(members.size());
    const int n_troj = static_cast<int>(std::lround(g * cfg.trojan_fraction));
    const int n_val = static_cast<int>(std::lround(
        static_cast<double>(cfg.n_validation) * g / static_cast<double>(cfg.n_models)));
    rng.shuffle(members);
    for (int k = 0; k < g; ++k) plan[members[k]] = {cfg.arch_mix[a], k < n_troj, false};
    const int val_troj = std::min(n_troj, (n_val + 1) / 2);
    const int val_benign = std::min(g - n_troj, n_val - val_troj);
    for (int k = 0; k < val_troj; ++k) plan[members[k]].validation = true;
    for (int k = 0; k < val_benign; ++k) plan[members[n_troj + k]].validation = true;
  }
  return plan;
}

// Trains every model, writes zoo/<task>/<id>/model.bin and the manifest
// under `zoo_root`.
inline ZooManifest build_zoo(const ZooConfig& cfg, const std::filesystem::path& zoo_root) {
  require(cfg.corpus.task == cfg.task, "zoo: corpus task must match zoo task");
  const Dataset corpus = synth_corpus(cfg.corpus);
  const Vocab vocab = corpus_vocab(cfg.corpus);
  const auto plan = plan_zoo(cfg);
  std::vector<ZooEntry> entries(plan.size());
  parallel_for(plan.size(), cfg.workers, [&](std::size_t i) {
    TrainedZooModel m = train_zoo_member(cfg, corpus, vocab, static_cast<int>(i), plan[i].arch,
                                         plan[i].trojaned);
    m.entry.split = plan[i].validation ? "val" : "train";
    const auto file = zoo_root / m.entry.path;
    std::filesystem::create_directories(file.parent_path());
    save_model(m.model, file.string());
    entries[i] = std::move(m.entry);
  });
  ZooManifest manifest;
  manifest.created = utc_timestamp();
  manifest.zoo_seed = cfg.seed;
  manifest.task = cfg.task;
  manifest.corpus = cfg.corpus;
  manifest.train = cfg.train;
  manifest.entries = std::move(entries);
  write_manifest(manifest, zoo_root);
  return manifest;
}

}  // namespace rapscan
