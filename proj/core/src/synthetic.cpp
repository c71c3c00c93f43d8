#include "rwmn/synthetic.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "rwmn/error.hpp"
#include "rwmn/rng.hpp"

namespace rwmn {

namespace {

constexpr std::string_view kFunctionWords[] = {"what", "does", "hold",  "holds", "who",  "entered",
                                               "first", "enters", "where", "is",   "at",   "with", "has"};

std::string numbered(char prefix, std::size_t i) {
  return std::string(1, prefix) + std::to_string(i);
}

std::string story_id(std::string_view split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return std::string(split) + "-" + buf;
}

class Generator {
 public:
  Generator(const SyntheticTaskConfig& config, const Vocabulary& vocab, std::uint64_t seed)
      : config_(config), vocab_(vocab), rng_(seed) {
    const std::size_t half = config.vocab_size / 2;
    for (std::size_t i = 0; i < half; ++i) entities_.push_back(numbered('e', i));
    for (std::size_t i = 0; i < half; ++i) attributes_.push_back(numbered('a', i));
    for (std::size_t i = 0; i < config.filler_tokens; ++i) fillers_.push_back(numbered('f', i));
  }

  void fill(Dataset& out, std::string_view split, std::size_t count) {
    std::size_t story = 0;
    while (out.size() < count) {
      const std::string id = story_id(split, story++);
      switch (config_.task) {
        case SyntheticTask::kNeedle: needle(out, id); break;
        case SyntheticTask::kChunk: chunk(out, id); break;
        case SyntheticTask::kQuerySensitive: query_sensitive(out, id, count - out.size()); break;
      }
    }
  }

 private:
  std::size_t uniform(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

  std::size_t steps() { return uniform(config_.min_steps, config_.max_steps); }

  const std::string& subject() { return entities_[uniform(0, config_.subject_entities - 1)]; }

  // `count` distinct picks from `pool`.
  std::vector<std::string> sample(const std::vector<std::string>& pool, std::size_t count) {
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[uniform(i, idx.size() - 1)]);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(pool[idx[i]]);
    return out;
  }

  std::vector<std::string> filler_sentence() {
    return {fillers_[uniform(0, fillers_.size() - 1)], fillers_[uniform(0, fillers_.size() - 1)]};
  }

  StoryStep step(const std::vector<std::string>& tokens) const {
    StoryStep s;
    s.tokens = vocab_.encode(tokens);
    s.visual = synthetic_visual(tokens, config_.feature_dim, config_.seed);
    return s;
  }

  StorySource story(const std::string& id, const std::vector<std::vector<std::string>>& sentences) const {
    StorySource s;
    s.id = id;
    s.modality = Modality::kVideoText;
    s.visual_dim = static_cast<std::uint32_t>(config_.feature_dim);
    for (const auto& sentence : sentences) s.steps.push_back(step(sentence));
    return s;
  }

  // Places `correct` among `distractors` at a random index.
  void set_answers(QAItem& item, const std::string& correct, std::vector<std::string> distractors) {
    item.correct = uniform(0, kAnswerCount - 1);
    std::size_t next = 0;
    for (std::size_t k = 0; k < kAnswerCount; ++k) {
      item.answers[k] = {k == item.correct ? correct : distractors[next++]};
    }
  }

  void needle(Dataset& out, const std::string& id) {
    const std::size_t n = steps();
    const std::size_t at = uniform(0, n - 1);
    const auto pick = sample(attributes_, kAnswerCount);
    const std::string entity = subject();
    std::vector<std::vector<std::string>> sentences;
    for (std::size_t i = 0; i < n; ++i) {
      sentences.push_back(i == at ? std::vector<std::string>{entity, "holds", pick[0]} : filler_sentence());
    }
    out.add_story(story(id, sentences));
    QAItem item;
    item.story_id = id;
    item.question = {"what", "does", entity, "hold"};
    set_answers(item, pick[0], {pick.begin() + 1, pick.end()});
    item.gt_span = StepSpan{at, at};
    item.type = question_type(item.question);
    out.add_item(std::move(item));
  }

  void chunk(Dataset& out, const std::string& id) {
    const std::size_t k = config_.chunk_width;
    const std::size_t n = steps();
    const std::size_t start = uniform(0, n - k);
    const auto pick = sample(entities_, k + 1);
    std::vector<std::vector<std::string>> sentences;
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= start && i < start + k) {
        sentences.push_back({pick[i - start], "enters"});
      } else {
        sentences.push_back(filler_sentence());
      }
    }
    out.add_story(story(id, sentences));
    QAItem item;
    item.story_id = id;
    item.question = {"who", "entered", "first"};
    // Window members beyond the first, then one entity absent from the story.
    std::vector<std::string> distractors(pick.begin() + 1, pick.begin() + static_cast<std::ptrdiff_t>(k));
    distractors.push_back(pick[k]);
    distractors.resize(kAnswerCount - 1);
    set_answers(item, pick[0], distractors);
    item.gt_span = StepSpan{start, start + k - 1};
    item.type = question_type(item.question);
    out.add_item(std::move(item));
  }

  void query_sensitive(Dataset& out, const std::string& id, std::size_t remaining) {
    const std::size_t n = steps();
    const std::size_t at = uniform(0, n - 1);
    const std::string entity = subject();
    const auto facts = sample(attributes_, kAnswerCount);
    const std::string& x = facts[0];
    const std::string& y = facts[1];
    std::vector<std::vector<std::string>> sentences;
    for (std::size_t i = 0; i < n; ++i) {
      sentences.push_back(i == at ? std::vector<std::string>{entity, "at", x, "with", y} : filler_sentence());
    }
    out.add_story(story(id, sentences));
    for (int q = 0; q < 2 && remaining > 0; ++q, --remaining) {
      QAItem item;
      item.story_id = id;
      const bool where = q == 0;
      item.question = where ? std::vector<std::string>{"where", "is", entity}
                            : std::vector<std::string>{"what", "has", entity};
      std::vector<std::string> distractors = {where ? y : x};
      distractors.insert(distractors.end(), facts.begin() + 2, facts.end());
      set_answers(item, where ? x : y, distractors);
      item.gt_span = StepSpan{at, at};
      item.type = question_type(item.question);
      out.add_item(std::move(item));
    }
  }

  const SyntheticTaskConfig& config_;
  const Vocabulary& vocab_;
  Rng rng_;
  std::vector<std::string> entities_;
  std::vector<std::string> attributes_;
  std::vector<std::string> fillers_;
};

}  // namespace

std::string_view to_string(SyntheticTask task) {
  switch (task) {
    case SyntheticTask::kNeedle: return "needle";
    case SyntheticTask::kChunk: return "chunk";
    case SyntheticTask::kQuerySensitive: return "query_sensitive";
  }
  return "unknown";
}

SyntheticTask parse_synthetic_task(std::string_view name) {
  std::string n(name);
  for (char& c : n) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (SyntheticTask t : {SyntheticTask::kNeedle, SyntheticTask::kChunk, SyntheticTask::kQuerySensitive}) {
    if (to_string(t) == n) return t;
  }
  throw ConfigError("unknown synthetic task '" + std::string(name) + "'");
}

void SyntheticTaskConfig::validate() const {
  if (min_steps == 0 || min_steps > max_steps) throw ConfigError("synthetic steps need 1 <= min_steps <= max_steps");
  if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (filler_tokens == 0) throw ConfigError("filler_tokens must be positive");
  const std::size_t half = vocab_size / 2;
  if (subject_entities == 0 || subject_entities > half) {
    throw ConfigError("subject_entities must be between 1 and vocab_size / 2");
  }
  if (half < kAnswerCount + 1) throw ConfigError("vocab_size must be at least " + std::to_string(2 * (kAnswerCount + 1)));
  switch (task) {
    case SyntheticTask::kNeedle: break;
    case SyntheticTask::kChunk:
      if (chunk_width < 2) throw ConfigError("chunk_width must be at least 2");
      if (chunk_width + 1 < kAnswerCount) throw ConfigError("chunk_width must be at least 4 for five candidates");
      if (chunk_width > min_steps) throw ConfigError("chunk_width exceeds min_steps");
      if (chunk_width + 1 > half) throw ConfigError("too few entities for chunk_width");
      break;
    case SyntheticTask::kQuerySensitive: break;
  }
}

Vocabulary synthetic_vocabulary(const SyntheticTaskConfig& config) {
  Vocabulary vocab;
  for (auto w : kFunctionWords) vocab.add(w);
  for (std::size_t i = 0; i < config.filler_tokens; ++i) vocab.add(numbered('f', i));
  for (std::size_t i = 0; i < config.vocab_size / 2; ++i) vocab.add(numbered('e', i));
  for (std::size_t i = 0; i < config.vocab_size / 2; ++i) vocab.add(numbered('a', i));
  return vocab;
}

std::vector<float> synthetic_visual(std::span<const std::string> tokens, std::size_t dim, std::uint64_t seed) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<double> v(dim, scale);
  for (const auto& t : tokens) {
    Rng rng(splitmix64(fnv1a64(t) ^ derive_seed(seed, 21)));
    std::normal_distribution<double> normal(0.0, scale);
    for (double& x : v) x += normal(rng);
  }
  return {v.begin(), v.end()};
}

Corpus generate_synthetic(const SyntheticTaskConfig& config) {
  config.validate();
  Corpus c;
  c.vocab = synthetic_vocabulary(config);
  Generator(config, c.vocab, derive_seed(config.seed, 101)).fill(c.train, "train", config.train_count);
  Generator(config, c.vocab, derive_seed(config.seed, 102)).fill(c.val, "val", config.val_count);
  Generator(config, c.vocab, derive_seed(config.seed, 103)).fill(c.test, "test", config.test_count);
  return c;
}

}  // namespace rwmn
