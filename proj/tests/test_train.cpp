#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dksd/train.hpp"

namespace dksd {
namespace {

// ---------------------------------------------------------------- AdamW

/// Plain re-implementation of the update in long double.
struct AdamOracle {
  long double m = 0, v = 0;
  int t = 0;
  long double step(long double p, long double g, long double lr, long double decay, bool bias) {
    ++t;
    if (!bias) p *= 1 - lr * decay;
    m = 0.9L * m + 0.1L * g;
    v = 0.999L * v + 0.001L * g * g;
    const long double mh = m / (1 - std::pow(0.9L, t));
    const long double vh = v / (1 - std::pow(0.999L, t));
    return p - lr * mh / (std::sqrt(vh) + 1e-8L);
  }
};

ParameterTable<double> scalar_table(double w, double b) {
  ParameterTable<double> t;
  t.add("w", Matrix<double>::Constant(1, 1, w), false);
  t.add("w.b", Matrix<double>::Constant(1, 1, b), true);
  return t;
}

TEST(AdamW, ZeroGradientZeroDecayIsNoOp) {
  auto p = scalar_table(0.7, -0.2);
  const auto before = p;
  AdamWState<double> s;
  for (int i = 0; i < 3; ++i) adamw_step(p, {Matrix<double>::Zero(1, 1), Matrix<double>::Zero(1, 1)}, s, {0.1, 0.0});
  EXPECT_TRUE(p == before);
  EXPECT_EQ(s.step, 3);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  auto p = scalar_table(1.0, 1.0);
  AdamWState<double> s;
  adamw_step(p, {Matrix<double>::Ones(1, 1), Matrix<double>::Ones(1, 1)}, s, {0.1, 0.0});
  EXPECT_NEAR(p["w"](0, 0), 0.9, 1e-7);
  EXPECT_NEAR(p["w.b"](0, 0), 0.9, 1e-7);
}

TEST(AdamW, QuadraticBowlMatchesReference) {
  // f = 0.5 * a * (w - c)^2 on both parameters; decay 0.4 on the weight only.
  const double a = 3.0, c = 0.25, lr = 0.05, decay = 0.4;
  auto p = scalar_table(1.5, -0.8);
  AdamWState<double> s;
  AdamOracle ow, ob;
  long double rw = 1.5L, rb = -0.8L;
  for (int i = 0; i < 5; ++i) {
    const double gw = a * (p["w"](0, 0) - c), gb = a * (p["w.b"](0, 0) - c);
    const long double ogw = a * (rw - c), ogb = a * (rb - c);
    adamw_step(p, {Matrix<double>::Constant(1, 1, gw), Matrix<double>::Constant(1, 1, gb)}, s, {lr, decay});
    rw = ow.step(rw, ogw, lr, decay, false);
    rb = ob.step(rb, ogb, lr, decay, true);
    EXPECT_NEAR(p["w"](0, 0), static_cast<double>(rw), 1e-6) << "step " << i;
    EXPECT_NEAR(p["w.b"](0, 0), static_cast<double>(rb), 1e-6) << "step " << i;
  }
}

TEST(AdamW, DecayIsDecoupledAndSkipsBiases) {
  auto p = scalar_table(2.0, 2.0);
  AdamWState<double> s;
  adamw_step(p, {Matrix<double>::Zero(1, 1), Matrix<double>::Zero(1, 1)}, s, {0.1, 0.4});
  EXPECT_DOUBLE_EQ(p["w"](0, 0), 2.0 * (1 - 0.04));
  EXPECT_DOUBLE_EQ(p["w.b"](0, 0), 2.0);
  EXPECT_THROW(adamw_step(p, {Matrix<double>::Zero(1, 1)}, s, {}), ShapeError);
  EXPECT_THROW(adamw_step(p, {Matrix<double>::Zero(2, 1), Matrix<double>::Zero(1, 1)}, s, {}), ShapeError);
}

TEST(AdamW, BuiltModelFlagsOnlyBiasesAsBiases) {
  const auto p = build_model<float>(ModelConfig::tiny(), 1, false);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& n = p.name(i);
    EXPECT_EQ(p.is_bias(i), n.size() > 2 && n.substr(n.size() - 2) == ".b") << n;
  }
}

TEST(Clip, GlobalNormScaling) {
  std::vector<Matrix<double>> g{Matrix<double>::Constant(1, 1, 3.0), Matrix<double>::Constant(1, 1, 4.0)};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 5.0);
  EXPECT_EQ(g[0](0, 0), 3.0);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(std::hypot(g[0](0, 0), g[1](0, 0)), 1.0, 1e-6);
  EXPECT_NEAR(g[0](0, 0) / g[1](0, 0), 0.75, 1e-12);
}

// ---------------------------------------------------------------- training loop

Dataset tiny_dataset(int classes, int per_class, Eigen::Index steps, std::uint64_t seed) {
  SynthOptions o;
  o.n_bins = 6;
  o.harmonics = 1;
  o.pitch_low = 0.5;
  o.pitch_high = 1.5;
  o.formant_width = 0.8;
  const auto c = generate_synthetic_corpus(classes, per_class, steps, seed, o);
  return Dataset{c.manifest, c.features};
}

struct Tiny {
  ModelConfig mc = ModelConfig::tiny();
  TrainConfig tc;
  Dataset train_set = tiny_dataset(2, 3, 40, 1);
  Dataset val_set = tiny_dataset(2, 2, 40, 2);
  Tiny() {
    tc.max_epochs = 4;
    tc.pretrain_epochs = 2;
    tc.batch_size = 4;
    tc.crop_frames = 16;
    tc.learning_rate = 1e-2;
    tc.weight_decay = 0.0;
    tc.seed = 5;
  }
};

TEST(Train, PhaseClampWhenPretrainExceedsMaxEpochs) {
  Tiny t;
  t.tc.max_epochs = 2;
  t.tc.pretrain_epochs = 30;
  const auto before = koopman_estimation_count();
  const auto r = train(t.mc, t.tc, t.train_set, t.val_set);
  ASSERT_EQ(r.history.size(), 4u);
  for (const auto& h : r.history) {
    EXPECT_EQ(h.phase, "pretrain");
    EXPECT_TRUE(std::isnan(h.loss.l_pred));
    EXPECT_TRUE(std::isnan(h.loss.l_eigen));
    EXPECT_EQ(h.loss.l_total, h.loss.l_rec);
  }
  EXPECT_EQ(r.pretrain_koopman_estimations, 0);
  EXPECT_EQ(koopman_estimation_count(), before);
  EXPECT_NE(format_history(r.history).find("1,pretrain,train,"), std::string::npos);
  EXPECT_EQ(format_history(r.history).rfind("epoch,phase,split,l_rec,l_pred,l_eigen,l_total,seconds\n", 0), 0u);
}

TEST(Train, KoopmanRunsOnlyAfterPretraining) {
  Tiny t;
  const auto before = koopman_estimation_count();
  const auto r = train(t.mc, t.tc, t.train_set, t.val_set);
  EXPECT_EQ(r.pretrain_koopman_estimations, 0);
  EXPECT_GT(koopman_estimation_count(), before);
  ASSERT_EQ(r.history.size(), 8u);
  for (const auto& h : r.history) {
    if (h.epoch <= 2) {
      EXPECT_EQ(h.phase, "pretrain");
    } else {
      EXPECT_EQ(h.phase, "full");
      EXPECT_TRUE(std::isfinite(h.loss.l_pred));
      EXPECT_TRUE(std::isfinite(h.loss.l_eigen));
    }
  }
  EXPECT_EQ(r.best_phase, "full");
  EXPECT_GE(r.best_epoch, 3);
}

TEST(Train, RecOnlyObjectiveNeverEstimates) {
  Tiny t;
  t.tc.objective = "rec";
  const auto before = koopman_estimation_count();
  train(t.mc, t.tc, t.train_set, t.val_set);
  EXPECT_EQ(koopman_estimation_count(), before);
}

TEST(Train, BestCheckpointIsLowestValidationInItsPhase) {
  Tiny t;
  t.tc.max_epochs = 6;
  const auto r = train(t.mc, t.tc, t.train_set, t.val_set);
  double best = std::numeric_limits<double>::infinity();
  int epoch = 0;
  for (const auto& h : r.history) {
    if (h.split == "val" && h.phase == "full" && h.loss.l_total < best) best = h.loss.l_total, epoch = h.epoch;
  }
  EXPECT_EQ(r.best_epoch, epoch);
  EXPECT_EQ(r.best_value, best);
  EXPECT_EQ(validation_loss(r.best, t.mc, t.tc, t.val_set, true, t.mc.weights).l_total, best);
}

TEST(Train, SameSeedGivesIdenticalHistoryAndCheckpoints) {
  for (double p : {0.0, 0.5}) {
    Tiny t;
    t.tc.augment_probability = p;
    const auto a = train(t.mc, t.tc, t.train_set, t.val_set);
    const auto b = train(t.mc, t.tc, t.train_set, t.val_set);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      EXPECT_EQ(a.history[i].loss.l_total, b.history[i].loss.l_total);
      EXPECT_EQ(a.history[i].loss.l_rec, b.history[i].loss.l_rec);
    }
    EXPECT_TRUE(a.best == b.best);
    EXPECT_TRUE(a.last == b.last);
  }
  Tiny t;
  const auto a = train(t.mc, t.tc, t.train_set, t.val_set);
  t.tc.seed = 6;
  const auto c = train(t.mc, t.tc, t.train_set, t.val_set);
  EXPECT_FALSE(a.last == c.last);
}

TEST(Train, ValidationDoesNotMutateParameters) {
  Tiny t;
  const auto p = build_model<float>(t.mc, 1, false);
  const auto copy = p;
  const auto a = validation_loss(p, t.mc, t.tc, t.val_set, true, t.mc.weights);
  const auto b = validation_loss(p, t.mc, t.tc, t.val_set, true, t.mc.weights);
  EXPECT_TRUE(p == copy);
  EXPECT_EQ(a.l_total, b.l_total);
}

TEST(Train, ReconstructionLossDecreases) {
  Tiny t;
  t.tc.max_epochs = 12;
  t.tc.pretrain_epochs = 12;
  const auto r = train(t.mc, t.tc, t.train_set, t.val_set);
  EXPECT_LT(r.history.back().loss.l_rec, r.history[1].loss.l_rec);
}

TEST(Train, EarlyStoppingWhenValidationStalls) {
  Tiny t;
  t.tc.max_epochs = 30;
  t.tc.learning_rate = 1e-30;  // updates vanish in float: the validation loss never improves
  t.tc.early_stop_patience = 3;
  const auto r = train(t.mc, t.tc, t.train_set, t.val_set);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.best_epoch, 3);
  EXPECT_EQ(r.epochs_run, 6);
}

TEST(Train, ResumeContinuesEpochNumbering) {
  Tiny t;
  const auto first = train(t.mc, t.tc, t.train_set, t.val_set);
  TrainHooks hooks;
  hooks.initial = first.last;
  hooks.start_epoch = 4;
  t.tc.max_epochs = 6;
  const auto r = train(t.mc, t.tc, t.train_set, t.val_set, hooks);
  ASSERT_EQ(r.history.size(), 4u);
  EXPECT_EQ(r.history.front().epoch, 5);
  EXPECT_EQ(r.history.back().epoch, 6);
}

TEST(Train, NonFiniteLossNamesTheBatch) {
  Tiny t;
  t.train_set.features[2].col(1).setConstant(1e30f);  // finite input, overflowing loss
  t.tc.batch_size = 1;
  try {
    train(t.mc, t.tc, t.train_set, t.val_set);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(t.train_set.manifest.records[2].utterance_id), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
  }
}

TEST(Train, InputErrors) {
  Tiny t;
  Dataset empty;
  EXPECT_THROW(train(t.mc, t.tc, empty, t.val_set), ValidationError);
  EXPECT_THROW(train(t.mc, t.tc, t.train_set, empty), ValidationError);
  auto bad = t.tc;
  bad.objective = "both";
  EXPECT_THROW(train(t.mc, bad, t.train_set, t.val_set), ConfigError);
  auto long_m = t.mc;
  long_m.M = 15;
  EXPECT_THROW(train(long_m, t.tc, t.train_set, t.val_set), ConfigError);
}

TEST(Train, ShortUtterancesAreDiscarded) {
  Tiny t;
  t.train_set.features[0] = t.train_set.features[0].topRows(10).eval();
  const auto r = train(t.mc, t.tc, t.train_set, t.val_set);
  EXPECT_EQ(r.epochs_run, 4);
}

}  // namespace
}  // namespace dksd
