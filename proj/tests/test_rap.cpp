#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "rapscan/rap.hpp"
#include "rapscan/zoo.hpp"
#include "support.hpp"

using namespace rapscan;
using rapscan::testing::random_model;
using rapscan::testing::random_sequence;
using rapscan::testing::small_zoo_config;
using rapscan::testing::TempDir;

namespace {

// Returns the same distribution whatever the input.
class ConstantOracle final : public ModelOracle {
 public:
  TaskOutput query(const TokenSequence& x, const TriggerInjection*) override {
    TaskOutput out;
    out.task = x.task;
    switch (x.task) {
      case Task::SC: out.rows = {{0.3, 0.7}}; break;
      case Task::NER: out.rows.assign(x.length(), {0.1, 0.2, 0.3, 0.4}); break;
      case Task::QA:
        out.rows.assign(2, std::vector<double>(x.length(), 0.5 / (x.length() - 1)));
        out.rows[0][0] = out.rows[1][0] = 0.5;
        break;
    }
    return out;
  }
  int embedding_dim() const override { return 16; }
};

// Forward-only view of a model.
class BlackBoxOracle final : public ModelOracle {
 public:
  explicit BlackBoxOracle(const TinyTextModel& m) : m_(m) {}
  TaskOutput query(const TokenSequence& x, const TriggerInjection* t) override {
    return forward(m_, x, t);
  }
  int embedding_dim() const override { return m_.dims.embed; }

 private:
  const TinyTextModel& m_;
};

std::string serialized(const TinyTextModel& m) {
  std::ostringstream os;
  save_model(m, os);
  return os.str();
}

std::vector<TokenSequence> labelled_sc(const TinyTextModel& m, int n, std::uint64_t seed) {
  Prng rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) {
    TokenSequence x = random_sequence(Task::SC, 6 + rng.below_int(8), m, rng);
    x.label = rng.below_int(2);
    out.push_back(x);
  }
  return out;
}

double three_branch_loss(double fx, double fxt, double lo, double hi) {
  const double d = fx - fxt;
  if (d < lo) return -d;
  if (d > hi) return d;
  return 0.0;
}

}  // namespace

TEST(BoundedLoss, Examples) {
  EXPECT_EQ(bounded_rap_loss(0.9, 0.9, 0.015, 0.02), 0.0);
  EXPECT_NEAR(bounded_rap_loss(0.9, 0.95, 0.015, 0.02), 0.05, 1e-15);
  EXPECT_NEAR(bounded_rap_loss(0.9, 0.5, 0.015, 0.02), 0.4, 1e-15);
  EXPECT_EQ(bounded_rap_loss(0.9, 0.8825, 0.015, 0.02), 0.0);
}

TEST(BoundedLoss, MatchesThreeBranchReference) {
  Prng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double fx = r.uniform(), fxt = r.uniform();
    double lo = r.uniform(-0.5, 0.5), hi = r.uniform(-0.5, 0.5);
    if (lo == hi) continue;
    if (lo > hi) std::swap(lo, hi);
    ASSERT_EQ(bounded_rap_loss(fx, fxt, lo, hi), three_branch_loss(fx, fxt, lo, hi));
    const double h = 1e-7;
    const double fd =
        (bounded_rap_loss(fx, fxt + h, lo, hi) - bounded_rap_loss(fx, fxt - h, lo, hi)) / (2 * h);
    const double d = fx - fxt;
    if (std::abs(d - lo) > 1e-6 && std::abs(d - hi) > 1e-6)
      ASSERT_NEAR(bounded_rap_loss_slope(fx, fxt, lo, hi), fd, 1e-6);
  }
}

TEST(RelaxedTrigger, ZeroNoiseGivesZeroEmbedding) {
  RapConfig c;
  c.noise_scale = 0.0;
  for (double v : relaxed_trigger(16, c).embedding) EXPECT_EQ(v, 0.0);
}

TEST(RelaxedTrigger, SameSeedSameEmbedding) {
  RapConfig c;
  c.seed = 17;
  EXPECT_EQ(relaxed_trigger(16, c).embedding, relaxed_trigger(16, c).embedding);
  RapConfig other = c;
  other.seed = 18;
  EXPECT_NE(relaxed_trigger(16, c).embedding, relaxed_trigger(16, other).embedding);
}

TEST(RelaxedTrigger, EmpiricalStdMatchesNoiseScale) {
  for (double scale : {0.25, 1.0}) {
    RapConfig c;
    c.noise_scale = scale;
    c.seed = 3;
    const auto e = relaxed_trigger(10000, c).embedding;
    double s = 0, s2 = 0;
    for (double v : e) {
      s += v;
      s2 += v * v;
    }
    const double mean = s / e.size();
    const double sd = std::sqrt(s2 / e.size() - mean * mean);
    EXPECT_NEAR(sd, scale, 0.05 * scale);
  }
}

TEST(RelaxedTrigger, OptimizedConfigRejected) {
  EXPECT_THROW(relaxed_trigger(16, RapConfig::sc_small_sample()), ContractViolation);
}

TEST(Deviation, ConstantOracleGivesZero) {
  ConstantOracle o;
  const TinyTextModel m = random_model(ArchVariant::A, 1);
  Prng rng(2);
  RapConfig cfg;
  const RapTrigger t = relaxed_trigger(16, cfg);
  for (Task task : {Task::SC, Task::NER, Task::QA}) {
    TokenSequence x = random_sequence(task, 12, m, rng);
    if (task == Task::SC) x.label = 1;
    for (const auto& r : deviations_for(o, x, t, cfg, "m", "s")) EXPECT_EQ(r.value, 0.0);
  }
}

TEST(Deviation, ValuesAreProbabilityDifferences) {
  Prng rng(3);
  RapConfig cfg;
  cfg.noise_scale = 3.0;
  for (int trial = 0; trial < 30; ++trial) {
    const TinyTextModel m = random_model(ArchVariant(trial % 3), trial);
    InProcessOracle o(m);
    cfg.seed = trial;
    const RapTrigger t = relaxed_trigger(16, cfg);
    for (Task task : {Task::SC, Task::NER, Task::QA}) {
      const TokenSequence x = random_sequence(task, 4 + rng.below_int(20), m, rng);
      for (const auto& r : deviations_for(o, x, t, cfg, "m", "s")) {
        EXPECT_GE(r.value, -1.0);
        EXPECT_LE(r.value, 1.0);
      }
    }
  }
}

TEST(Deviation, ScMatchesDirectComputation) {
  const TinyTextModel m = random_model(ArchVariant::B, 4);
  InProcessOracle o(m);
  Prng rng(4);
  RapConfig cfg;
  cfg.insert_position = InsertPosition::Front;
  const RapTrigger t = relaxed_trigger(16, cfg);
  TokenSequence x = random_sequence(Task::SC, 9, m, rng);
  // Unlabelled: the reference is the clean prediction.
  const auto clean = forward(m, x).rows[0];
  const int ref = static_cast<int>(argmax_tiebreak(clean));
  TriggerInjection inj{t.token_id, t.embedding, {0}};
  const auto pert = forward(m, insert_token(x, 0, t.token_id), &inj).rows[0];
  EXPECT_EQ(deviation_sc(o, x, t, cfg).value, clean[ref] - pert[ref]);
}

TEST(Deviation, AntisymmetricUnderLabelSwapForTwoClasses) {
  for (int trial = 0; trial < 20; ++trial) {
    const TinyTextModel m = random_model(ArchVariant(trial % 3), 100 + trial);
    InProcessOracle o(m);
    Prng rng(trial);
    RapConfig cfg;
    cfg.seed = trial;
    const RapTrigger t = relaxed_trigger(16, cfg);
    TokenSequence x = random_sequence(Task::SC, 10, m, rng);
    x.label = 0;
    const double d0 = deviation_sc(o, x, t, cfg).value;
    x.label = 1;
    const double d1 = deviation_sc(o, x, t, cfg).value;
    EXPECT_NEAR(d0, -d1, 1e-15);
  }
}

TEST(Deviation, NerTenWordsWindowFiveHasTwoSlots) {
  const TinyTextModel m = random_model(ArchVariant::A, 5);
  InProcessOracle o(m);
  Prng rng(5);
  RapConfig cfg;
  const RapTrigger t = relaxed_trigger(16, cfg);
  const auto recs = deviation_ner(o, random_sequence(Task::NER, 10, m, rng), t, cfg);
  std::set<int> slots;
  for (const auto& r : recs) slots.insert(*r.position);
  EXPECT_EQ(slots, (std::set<int>{0, 5}));
  EXPECT_EQ(recs.size(), 15u);
}

TEST(Deviation, NerRecordCountMatchesEnumeration) {
  const TinyTextModel m = random_model(ArchVariant::C, 6);
  ConstantOracle o;
  Prng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    RapConfig cfg;
    cfg.n_adjacent = 1 + rng.below_int(7);
    const int len = 2 + rng.below_int(40);
    std::size_t expect = 0;
    for (int slot = 0; slot < len; ++slot) {
      if (slot % cfg.n_adjacent != 0) continue;
      for (int w = 0; w < len; ++w) expect += (w >= slot && w < slot + 2 * cfg.n_adjacent);
    }
    const RapTrigger t = relaxed_trigger(16, cfg);
    ASSERT_EQ(deviation_ner(o, random_sequence(Task::NER, len, m, rng), t, cfg).size(), expect);
  }
}

TEST(Deviation, NerComparesEachWordWithItsShiftedSelf) {
  const TinyTextModel m = random_model(ArchVariant::B, 7);
  InProcessOracle o(m);
  Prng rng(7);
  RapConfig cfg;
  cfg.n_adjacent = 3;
  const RapTrigger t = relaxed_trigger(16, cfg);
  const TokenSequence x = random_sequence(Task::NER, 8, m, rng);
  const auto clean = forward(m, x).rows;
  for (const auto& r : deviation_ner(o, x, t, cfg)) {
    const int w = std::stoi(r.sample_id.substr(1));
    const int slot = *r.position;
    TriggerInjection inj{t.token_id, t.embedding, {slot}};
    const auto pert = forward(m, insert_token(x, slot, t.token_id), &inj).rows;
    const int ref = static_cast<int>(argmax_tiebreak(clean[w]));
    EXPECT_EQ(r.value, clean[w][ref] - pert[w + 1][ref]);
  }
}

TEST(Deviation, ShortNerSequenceRejected) {
  const TinyTextModel m = random_model(ArchVariant::A, 8);
  InProcessOracle o(m);
  TokenSequence x;
  x.task = Task::NER;
  x.ids = {kFirstWordId};
  EXPECT_THROW(deviation_ner(o, x, relaxed_trigger(16, RapConfig{}), RapConfig{}), ContractViolation);
}

TEST(Deviation, QaTriggerStaysInQuestion) {
  Prng rng(9);
  const TinyTextModel m = random_model(ArchVariant::A, 9);
  const TokenSequence x = random_sequence(Task::QA, 12, m, rng);
  EXPECT_EQ(rap_slot(x, InsertPosition::Front), 1);
  EXPECT_EQ(rap_slot(x, InsertPosition::Back), x.separator());
}

TEST(Deviation, JsonlRoundTrip) {
  TempDir dir("dev");
  std::vector<DeviationRecord> recs;
  for (int i = 0; i < 5; ++i) {
    DeviationRecord r;
    r.model_id = "sc-000" + std::to_string(i);
    r.sample_id = "s" + std::to_string(i);
    r.task = i % 2 ? Task::NER : Task::SC;
    if (i % 2) r.position = i;
    r.value = 0.1 * i - 0.123456789012345;
    recs.push_back(r);
  }
  const auto path = (dir.path() / "d.jsonl").string();
  write_deviations_jsonl(path, recs);
  const auto back = read_deviations_jsonl(path);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].model_id, recs[i].model_id);
    EXPECT_EQ(back[i].position, recs[i].position);
    EXPECT_EQ(back[i].value, recs[i].value);
  }
}

TEST(OptimizeTrigger, ZeroLearningRateKeepsInitialization) {
  const TinyTextModel m = random_model(ArchVariant::A, 10);
  InProcessOracle o(m);
  RapConfig cfg = RapConfig::sc_augmented();
  cfg.n_epoch = 1;
  cfg.lr = 0.0;
  cfg.seed = 4;
  const auto samples = labelled_sc(m, 20, 10);
  EXPECT_EQ(optimize_trigger(o, samples, cfg).embedding, rap_initial_embedding(16, cfg));
}

TEST(OptimizeTrigger, OneSmallStepDoesNotIncreaseLoss) {
  for (int trial = 0; trial < 10; ++trial) {
    const TinyTextModel m = random_model(ArchVariant(trial % 3), 200 + trial);
    InProcessOracle o(m);
    const auto samples = labelled_sc(m, 32, trial);
    for (double lr : {1e-3, 1e-4}) {
      RapConfig cfg = RapConfig::sc_augmented();
      cfg.n_epoch = 1;
      cfg.batch_size = 32;
      cfg.lr = lr;
      cfg.seed = trial;
      const double before = rap_objective(o, samples, rap_initial_embedding(16, cfg), cfg).mean_loss;
      const double after = rap_objective(o, samples, optimize_trigger(o, samples, cfg).embedding, cfg).mean_loss;
      EXPECT_LE(after, before + 1e-15) << "trial " << trial << " lr " << lr;
    }
  }
}

TEST(OptimizeTrigger, ModelIsNeverMutated) {
  const TinyTextModel m = random_model(ArchVariant::C, 11);
  const std::string before = serialized(m);
  InProcessOracle o(m);
  RapConfig cfg = RapConfig::sc_augmented();
  cfg.lr = 5.0;
  optimize_trigger(o, labelled_sc(m, 20, 11), cfg);
  EXPECT_EQ(serialized(m), before);
}

TEST(OptimizeTrigger, UnlabelledScSamplesRejected) {
  const TinyTextModel m = random_model(ArchVariant::A, 12);
  InProcessOracle o(m);
  auto samples = labelled_sc(m, 4, 12);
  samples[2].label.reset();
  EXPECT_THROW(optimize_trigger(o, samples, RapConfig::sc_augmented()), ContractViolation);
}

TEST(MakeTrigger, RelaxedModeMakesNoGradientCalls) {
  const TinyTextModel m = random_model(ArchVariant::B, 13);
  InProcessOracle inner(m);
  CountingOracle counting(inner);
  RapConfig cfg;
  const auto samples = labelled_sc(m, 30, 13);
  const RapTrigger t = make_trigger(counting, samples, cfg);
  for (const auto& x : samples) deviations_for(counting, x, t, cfg, "m", "s");
  EXPECT_EQ(counting.gradient_calls, 0);
  EXPECT_EQ(counting.forward_calls, 60);
}

TEST(MakeTrigger, OptimizedModeNeedsWhiteBoxAccess) {
  const TinyTextModel m = random_model(ArchVariant::B, 14);
  BlackBoxOracle black(m);
  const auto samples = labelled_sc(m, 8, 14);
  EXPECT_THROW(make_trigger(black, samples, RapConfig::sc_augmented()), ContractViolation);
  EXPECT_NO_THROW(make_trigger(black, samples, RapConfig{}));
  CountingOracle counting(black);
  EXPECT_THROW(make_trigger(counting, samples, RapConfig::sc_augmented()), ContractViolation);
}

class TrojanedZoo : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("rap-zoo");
    cfg_ = small_zoo_config(Task::SC, 8, 41);
    manifest_ = new ZooManifest(build_zoo(cfg_, dir_->path()));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    delete dir_;
  }
  static TinyTextModel model(const ZooEntry& e) { return load_model((dir_->path() / e.path).string()); }
  static inline TempDir* dir_ = nullptr;
  static inline ZooConfig cfg_;
  static inline ZooManifest* manifest_ = nullptr;
};

TEST_F(TrojanedZoo, RealBackdoorKeepsTargetClassSamplesStable) {
  const Dataset corpus = synth_corpus(cfg_.corpus);
  for (const auto& e : manifest_->entries) {
    if (!e.is_trojaned) continue;
    const TinyTextModel m = model(e);
    InProcessOracle o(m);
    const TokenId trig = e.trojan->trigger_tokens[0];
    RapTrigger t;
    t.token_id = trig;
    const auto row = m.w.embedding.row(trig);
    t.embedding.assign(row.begin(), row.end());
    std::vector<double> target, other;
    for (const auto& x : held_out_clean(corpus, e.train_seed)) {
      const double v = deviation_sc(o, x, t, RapConfig{}).value;
      (*x.label == e.trojan->target ? target : other).push_back(std::abs(v));
    }
    ASSERT_FALSE(target.empty());
    ASSERT_FALSE(other.empty());
    std::sort(target.begin(), target.end());
    std::sort(other.begin(), other.end());
    EXPECT_LT(target[target.size() / 2], 0.05) << e.model_id;
    EXPECT_GT(other[other.size() / 2], 0.5) << e.model_id;
  }
}

TEST_F(TrojanedZoo, OptimizedTriggerLowersBoundedLoss) {
  const Dataset corpus = synth_corpus(cfg_.corpus);
  int lowered = 0;
  for (int run = 0; run < 20; ++run) {
    const auto& e = manifest_->entries[run % manifest_->entries.size()];
    const TinyTextModel m = model(e);
    InProcessOracle o(m);
    RapConfig cfg = RapConfig::sc_augmented();
    cfg.seed = run;
    Prng rng = Prng(run).split(fnv1a("samples"));
    Dataset pool = held_out_clean(corpus, e.train_seed);
    rng.shuffle(pool);
    pool.resize(40);
    const double before = rap_objective(o, pool, rap_initial_embedding(16, cfg), cfg).mean_loss;
    const RapTrigger t = optimize_trigger(o, pool, cfg);
    const double after = rap_objective(o, pool, t.embedding, cfg).mean_loss;
    EXPECT_EQ(*t.train_mean_deviation, rap_objective(o, pool, t.embedding, cfg).mean_deviation);
    lowered += after < before;
  }
  EXPECT_GE(lowered, 15);
}

TEST(QaBackdoor, RealTriggerDrivesNoAnswer) {
  TempDir dir("rap-qa");
  const ZooConfig cfg = small_zoo_config(Task::QA, 2, 43);
  const ZooManifest man = build_zoo(cfg, dir.path());
  const Dataset corpus = synth_corpus(cfg.corpus);
  for (const auto& e : man.entries) {
    if (!e.is_trojaned) continue;
    const TinyTextModel m = load_model((dir.path() / e.path).string());
    std::vector<double> p;
    for (const auto& x : held_out_clean(corpus, e.train_seed)) {
      const TokenSequence xt = apply_trigger(x, *e.trojan, x.separator());
      p.push_back(forward(m, xt).rows[0][0]);
    }
    std::sort(p.begin(), p.end());
    EXPECT_GE(p[p.size() / 2], 0.9) << e.model_id;
  }
}
