#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "json.hpp"
#include "rwmn/error.hpp"
#include "rwmn/synthetic.hpp"
#include "rwmn/training.hpp"

using namespace rwmn;

namespace {

struct Toy {
  Corpus corpus;
  RwmnModel model;
};

Toy make_toy(std::size_t train_count = 24) {
  SyntheticTaskConfig sc;
  sc.min_steps = 6;
  sc.max_steps = 10;
  sc.feature_dim = 4;
  sc.train_count = train_count;
  sc.val_count = 8;
  sc.test_count = 2;
  RwmnConfig c;
  c.d = 6;
  c.fusion.cbp_dim = 16;
  c.fusion.word_dim = 8;
  c.fusion.visual.channels = 4;
  c.write_layers = {{3, 2, 2}};
  c.read_layers = {{2, 1, 2}};
  Corpus corpus = generate_synthetic(sc);
  RwmnModel model = RwmnModel::create(c, corpus.vocab);
  return {std::move(corpus), std::move(model)};
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.learning_rate = 0.05;
  t.batch_size = 8;
  t.max_epochs = epochs;
  t.early_stop_patience = epochs;
  t.restarts = 1;
  t.rng_seed = 11;
  return t;
}

}  // namespace

TEST(TrainConfig, Validation) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  TrainConfig t;
  t.learning_rate = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.restarts = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Xavier, BoundsFollowFanInAndOut) {
  EXPECT_DOUBLE_EQ(xavier_bound({10, 20}), std::sqrt(6.0 / 30.0));
  EXPECT_DOUBLE_EQ(xavier_bound({40, 30, 1, 3}), std::sqrt(6.0 / (1200.0 * 4.0)));
  Rng rng(1);
  const Tensor t = xavier_init({50, 70}, rng);
  const double b = xavier_bound({50, 70});
  double mean = 0, sq = 0;
  for (double v : t.values()) {
    EXPECT_LE(std::abs(v), b);
    mean += v;
    sq += v * v;
  }
  mean /= 3500.0;
  sq /= 3500.0;
  EXPECT_NEAR(mean, 0.0, 0.05 * b);
  EXPECT_NEAR(sq, b * b / 3.0, 0.1 * b * b / 3.0);  // uniform variance
  EXPECT_TRUE(t.requires_grad());
}

TEST(Init, ZeroBiasesAndConfiguredAlpha) {
  Toy s = make_toy();
  RwmnConfig c = s.model.config();
  c.alpha_init_raw = 0.25;
  RwmnModel m = RwmnModel::create(c, s.corpus.vocab);
  initialize_params(m, 4);
  for (double v : m.params().b_c.values()) EXPECT_EQ(v, 0.0);
  for (double v : m.params().b_q.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(m.params().alpha_raw.item(), 0.25);
  RwmnModel again = RwmnModel::create(c, s.corpus.vocab);
  initialize_params(again, 4);
  EXPECT_TRUE(std::equal(m.params().w_c.values().begin(), m.params().w_c.values().end(),
                         again.params().w_c.values().begin()));
}

TEST(CrossEntropy, NegativeLog) {
  Tape tape;
  const Tensor z = Tensor::vector({0.1, 0.2, 0.3, 0.15, 0.25});
  EXPECT_NEAR(cross_entropy(tape, z, 2).item(), -std::log(0.3), 1e-15);
  EXPECT_THROW(cross_entropy(tape, z, 5), InputError);
}

TEST(Adagrad, MatchesHandComputedSteps) {
  Tensor p = Tensor::vector({1.0, -2.0}, true);
  std::vector<Tensor> params = {p};
  AdagradState state(params, 0.1);
  const double lr = 0.5;
  std::vector<double> acc = {0.1, 0.1}, theta = {1.0, -2.0};
  for (const auto& g : std::vector<std::vector<double>>{{0.3, -1.0}, {0.2, 0.4}}) {
    p.zero_grad();
    std::copy(g.begin(), g.end(), p.mutable_grad().begin());
    adagrad_step(params, state, lr);
    for (std::size_t k = 0; k < 2; ++k) {
      acc[k] += g[k] * g[k];
      theta[k] -= lr * g[k] / std::sqrt(acc[k]);
      EXPECT_NEAR(p[k], theta[k], 1e-15);
      EXPECT_NEAR(state.accumulator(0)[k], acc[k], 1e-15);
    }
  }
}

TEST(Train, DeterministicForOneSeed) {
  Toy s = make_toy();
  initialize_params(s.model, 11);
  const TrainResult a = train(s.model.clone(), s.corpus.train, s.corpus.val, quick(4));
  const TrainResult b = train(s.model.clone(), s.corpus.train, s.corpus.val, quick(4));
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.history.epochs.size(), 4u);
}

TEST(Train, LossDecreasesOnTrainingSet) {
  Toy s = make_toy();
  initialize_params(s.model, 11);
  const TrainResult r = train(s.model, s.corpus.train, s.corpus.val, quick(15));
  EXPECT_LT(r.history.epochs.back().train_loss, r.history.epochs.front().train_loss);
}

TEST(Train, PatienceZeroStopsAtFirstNonImprovingEpoch) {
  Toy s = make_toy();
  initialize_params(s.model, 11);
  TrainConfig t = quick(60);
  t.learning_rate = 0.5;
  t.early_stop_patience = 0;
  const TrainResult r = train(s.model, s.corpus.train, s.corpus.val, t);
  const auto& e = r.history.epochs;
  ASSERT_FALSE(e.empty());
  for (std::size_t i = 1; i + 1 < e.size(); ++i) EXPECT_LT(e[i].val_loss, e[i - 1].val_loss);
  if (r.history.stop == StopReason::kEarlyStopping) {
    ASSERT_GE(e.size(), 2u);
    EXPECT_GE(e.back().val_loss, e[e.size() - 2].val_loss);
    EXPECT_EQ(r.history.best_epoch, e.size() - 1);
  }
}

TEST(Train, ReturnsBestEpochWeights) {
  Toy s = make_toy();
  initialize_params(s.model, 11);
  TrainConfig t = quick(12);
  t.learning_rate = 0.3;
  const TrainResult r = train(s.model, s.corpus.train, s.corpus.val, t);
  const EvalSummary e = evaluate(r.model, s.corpus.val);
  EXPECT_NEAR(e.loss, r.history.best_val_loss, 1e-9);
  EXPECT_NEAR(e.loss, r.history.epochs[r.history.best_epoch - 1].val_loss, 1e-9);
}

TEST(Train, MetricsStreamHasOneLinePerEpoch) {
  Toy s = make_toy();
  initialize_params(s.model, 11);
  std::ostringstream metrics;
  std::size_t callbacks = 0;
  TrainObserver obs;
  obs.metrics = &metrics;
  obs.on_epoch = [&](const EpochRecord& r) { EXPECT_EQ(r.epoch, ++callbacks); };
  train(s.model, s.corpus.train, s.corpus.val, quick(3), obs);
  std::istringstream lines(metrics.str());
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<std::size_t>(), n + 1);
    EXPECT_TRUE(j.contains("train_loss") && j.contains("val_loss") && j.contains("val_acc"));
  }
  EXPECT_EQ(n, 3u);
  EXPECT_EQ(callbacks, 3u);
}

TEST(Restarts, PickLowestValidationLoss) {
  Toy s = make_toy();
  TrainConfig t = quick(3);
  t.restarts = 3;
  const TrainResult best = train_with_restarts(s.model, s.corpus.train, s.corpus.val, t);
  double lowest = INFINITY;
  std::uint64_t lowest_seed = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    TrainConfig run = t;
    run.rng_seed = t.rng_seed + r;
    RwmnModel m = s.model.clone();
    initialize_params(m, run.rng_seed);
    const TrainResult one = train(m, s.corpus.train, s.corpus.val, run);
    if (one.history.best_val_loss < lowest) {
      lowest = one.history.best_val_loss;
      lowest_seed = run.rng_seed;
    }
  }
  EXPECT_EQ(best.history.best_val_loss, lowest);
  EXPECT_EQ(best.seed, lowest_seed);
}

TEST(Ensemble, MembersAndAveraging) {
  Toy s = make_toy(12);
  const auto bag = train_members(s.model, EnsembleMode::kBag, 3, s.corpus.train, s.corpus.val, quick(2));
  ASSERT_EQ(bag.size(), 3u);
  EXPECT_NE(bag[0].seed, bag[1].seed);

  std::vector<Prediction> preds(2);
  preds[0].z = {0.5, 0.1, 0.1, 0.2, 0.1};
  preds[1].z = {0.1, 0.1, 0.1, 0.6, 0.1};
  const EnsemblePrediction e = ensemble_predict(preds);
  EXPECT_EQ(e.y, 3u);
  EXPECT_NEAR(e.z[0], 0.3, 1e-15);
  EXPECT_NEAR(e.z[3], 0.4, 1e-15);

  std::vector<RwmnModel> models;
  for (const auto& m : bag) models.push_back(m.model);
  const QAItem& item = s.corpus.val.items()[0];
  const StorySource& story = s.corpus.val.story_for(item);
  const EnsemblePrediction direct = ensemble_predict(models, story, item);
  std::vector<double> mean(kAnswerCount, 0.0);
  for (const auto& m : models) {
    const Prediction p = predict(m, story, item);
    for (std::size_t i = 0; i < kAnswerCount; ++i) mean[i] += p.z[i] / 3.0;
  }
  for (std::size_t i = 0; i < kAnswerCount; ++i) EXPECT_NEAR(direct.z[i], mean[i], 1e-12);
}

TEST(Ensemble, ModeNames) {
  for (EnsembleMode m : {EnsembleMode::kNone, EnsembleMode::kBag, EnsembleMode::kEnsemble}) {
    EXPECT_EQ(parse_ensemble_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_ensemble_mode("vote"), Error);
}
