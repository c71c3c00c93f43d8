#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <map>
#include <set>

#include "rwmn/error.hpp"
#include "rwmn/synthetic.hpp"

using namespace rwmn;

namespace {

std::vector<std::string> words(const Vocabulary& vocab, const StoryStep& step) {
  std::vector<std::string> out;
  for (auto id : step.tokens) out.push_back(vocab.token(id));
  return out;
}

SyntheticTaskConfig config(SyntheticTask task) {
  SyntheticTaskConfig c;
  c.task = task;
  c.train_count = 60;
  c.val_count = 20;
  c.test_count = 20;
  c.subject_entities = 3;
  c.filler_tokens = 4;
  return c;
}

}  // namespace

TEST(Synthetic, TaskNames) {
  for (auto t : {SyntheticTask::kNeedle, SyntheticTask::kChunk, SyntheticTask::kQuerySensitive}) {
    EXPECT_EQ(parse_synthetic_task(to_string(t)), t);
  }
  EXPECT_THROW(parse_synthetic_task("haystack"), ConfigError);
}

TEST(Synthetic, Validation) {
  SyntheticTaskConfig c;
  EXPECT_NO_THROW(c.validate());
  c.min_steps = 40;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.vocab_size = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.subject_entities = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.task = SyntheticTask::kChunk;
  c.chunk_width = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c.chunk_width = 20;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Synthetic, SizesSplitsAndDeterminism) {
  for (auto t : {SyntheticTask::kNeedle, SyntheticTask::kChunk, SyntheticTask::kQuerySensitive}) {
    const SyntheticTaskConfig c = config(t);
    const Corpus a = generate_synthetic(c);
    EXPECT_EQ(a.train.size(), 60u);
    EXPECT_EQ(a.val.size(), 20u);
    EXPECT_EQ(a.test.size(), 20u);
    EXPECT_NO_THROW(a.train.validate());
    std::set<std::string> ids;
    for (const Dataset* d : {&a.train, &a.val, &a.test})
      for (const auto& s : d->stories()) EXPECT_TRUE(ids.insert(s.id).second) << s.id;
    const Corpus b = generate_synthetic(c);
    EXPECT_EQ(a.train.items(), b.train.items());
    EXPECT_EQ(a.test.stories(), b.test.stories());
    SyntheticTaskConfig other = c;
    other.seed = 2;
    EXPECT_NE(generate_synthetic(other).train.items(), a.train.items());
    EXPECT_EQ(a.vocab, synthetic_vocabulary(c));
  }
}

TEST(Synthetic, NeedleAnswerIsTheHeldAttribute) {
  const Corpus c = generate_synthetic(config(SyntheticTask::kNeedle));
  for (const auto& item : c.train.items()) {
    const StorySource& s = c.train.story_for(item);
    EXPECT_GE(s.size(), 16u);
    EXPECT_LE(s.size(), 32u);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto w = words(c.vocab, s.steps[i]);
      if (w.size() == 3 && w[1] == "holds") {
        ++hits;
        EXPECT_EQ(w[0], item.question[2]);
        EXPECT_EQ(item.answers[item.correct], std::vector<std::string>{w[2]});
        EXPECT_EQ(item.gt_span, (StepSpan{i, i}));
      }
    }
    EXPECT_EQ(hits, 1u);
    std::set<std::vector<std::string>> distinct(item.answers.begin(), item.answers.end());
    EXPECT_EQ(distinct.size(), kAnswerCount);
    EXPECT_EQ(item.type, "what");
  }
}

TEST(Synthetic, ChunkAnswerIsFirstOfWindow) {
  const Corpus c = generate_synthetic(config(SyntheticTask::kChunk));
  for (const auto& item : c.train.items()) {
    const StorySource& s = c.train.story_for(item);
    std::vector<std::string> entered;
    std::vector<std::size_t> at;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto w = words(c.vocab, s.steps[i]);
      if (w.size() == 2 && w[1] == "enters") {
        entered.push_back(w[0]);
        at.push_back(i);
      }
    }
    ASSERT_EQ(entered.size(), 4u);
    for (std::size_t k = 1; k < at.size(); ++k) EXPECT_EQ(at[k], at[k - 1] + 1);
    EXPECT_EQ(item.answers[item.correct], std::vector<std::string>{entered[0]});
    EXPECT_EQ(item.gt_span, (StepSpan{at.front(), at.back()}));
    // Four candidates are window members, one never appears.
    std::size_t in_story = 0;
    for (const auto& a : item.answers) in_story += std::count(entered.begin(), entered.end(), a[0]);
    EXPECT_EQ(in_story, 4u);
    EXPECT_EQ(item.type, "who");
  }
}

TEST(Synthetic, QuerySensitiveAnswerDependsOnQuestion) {
  const Corpus c = generate_synthetic(config(SyntheticTask::kQuerySensitive));
  std::size_t pairs = 0;
  for (std::size_t k = 0; k + 1 < c.train.size(); ++k) {
    const QAItem& a = c.train.items()[k];
    const QAItem& b = c.train.items()[k + 1];
    if (a.story_id != b.story_id) continue;
    ++pairs;
    const StorySource& s = c.train.story_for(a);
    std::vector<std::string> fact;
    for (const auto& step : s.steps) {
      const auto w = words(c.vocab, step);
      if (w.size() == 5) fact = w;
    }
    ASSERT_EQ(fact.size(), 5u);
    ASSERT_TRUE(a.gt_span);
    EXPECT_EQ(words(c.vocab, s.steps[a.gt_span->start]), fact);
    EXPECT_EQ(a.question, (std::vector<std::string>{"where", "is", fact[0]}));
    EXPECT_EQ(b.question, (std::vector<std::string>{"what", "has", fact[0]}));
    EXPECT_EQ(a.answers[a.correct][0], fact[2]);
    EXPECT_EQ(b.answers[b.correct][0], fact[4]);
    // Both facts are candidates for both questions.
    for (const QAItem* q : {&a, &b}) {
      std::size_t facts = 0;
      for (const auto& ans : q->answers) facts += ans[0] == fact[2] || ans[0] == fact[4];
      EXPECT_EQ(facts, 2u);
    }
    ++k;
  }
  EXPECT_EQ(pairs, 30u);
}

TEST(Synthetic, SubjectsComeFromTheConfiguredPool) {
  SyntheticTaskConfig cfg = config(SyntheticTask::kNeedle);
  cfg.subject_entities = 2;
  const Corpus c = generate_synthetic(cfg);
  std::set<std::string> subjects;
  for (const auto& item : c.train.items()) subjects.insert(item.question[2]);
  EXPECT_EQ(subjects, (std::set<std::string>{"e0", "e1"}));
}

TEST(Synthetic, VisualFeaturesDependOnTokens) {
  const std::vector<std::string> a = {"e0", "holds", "a1"}, b = {"e0", "holds", "a2"};
  const auto va = synthetic_visual(a, 16, 1);
  EXPECT_EQ(va.size(), 16u);
  EXPECT_EQ(va, synthetic_visual(a, 16, 1));
  EXPECT_NE(va, synthetic_visual(b, 16, 1));
}

TEST(Synthetic, NeedleDirectLookupOracleIsPerfect) {
  const Corpus c = generate_synthetic(config(SyntheticTask::kNeedle));
  std::size_t right = 0;
  for (const auto& item : c.train.items()) {
    const auto w = words(c.vocab, c.train.story_for(item).steps[item.gt_span->start]);
    for (std::size_t k = 0; k < kAnswerCount; ++k) {
      if (item.answers[k][0] == w.back()) right += k == item.correct;
    }
  }
  EXPECT_EQ(right, c.train.size());
}

// Best content-only rule that sees one window step: the view is which
// candidate (if any) the step names, the answer is the candidate that is
// most often correct for that view. Fitted on the evaluation items.
TEST(Synthetic, ChunkSingleStepOracleIsNearChance) {
  SyntheticTaskConfig cfg = config(SyntheticTask::kChunk);
  cfg.train_count = 2000;
  const Corpus c = generate_synthetic(cfg);
  std::map<int, std::array<std::size_t, kAnswerCount>> counts;
  std::vector<std::pair<int, std::size_t>> observations;
  for (const auto& item : c.train.items()) {
    const StorySource& s = c.train.story_for(item);
    for (std::size_t i = item.gt_span->start; i <= item.gt_span->end; ++i) {
      const auto w = words(c.vocab, s.steps[i]);
      int view = -1;
      for (std::size_t k = 0; k < kAnswerCount; ++k) {
        if (item.answers[k][0] == w[0]) view = static_cast<int>(k);
      }
      ++counts[view][item.correct];
      observations.emplace_back(view, item.correct);
    }
  }
  std::size_t right = 0;
  for (const auto& [view, correct] : observations) {
    const auto& n = counts[view];
    right += static_cast<std::size_t>(std::max_element(n.begin(), n.end()) - n.begin()) == correct;
  }
  const double accuracy = double(right) / double(observations.size());
  EXPECT_LE(accuracy, 1.0 / kAnswerCount + 0.10);
}
