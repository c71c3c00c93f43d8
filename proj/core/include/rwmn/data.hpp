#pragma once

// Story and question data, the on-disk formats, and bootstrap resampling.
//
// Story feature file (binary, little-endian):
//   "RWMN" | u16 version=1 | u8 modality | u32 n | u32 visual_dim | u32 d_w
//   then per step: u32 token_count, token ids (u32 each),
//                  visual_dim float32 values when modality != text.
// QA file (UTF-8, one record per line, tab separated):
//   story_id  question  a1 .. a5  correct_idx  span_start  span_end
//   Token lists are space separated; absent spans are written as "-".
//   Spans are inclusive step intervals.
// Vocabulary file: one token per line, line i (0-based) is token id i.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rwmn/rng.hpp"

namespace rwmn {

inline constexpr std::size_t kAnswerCount = 5;

// Token <-> id map. Id 0 is reserved for unknown tokens.
class Vocabulary {
 public:
  static constexpr std::uint32_t kUnknownId = 0;
  static constexpr std::string_view kUnknownToken = "<unk>";

  Vocabulary();
  // tokens[i] gets id i; tokens[0] is taken as the unknown token.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::uint32_t add(std::string_view token);
  // kUnknownId for tokens not in the vocabulary.
  std::uint32_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::uint32_t id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::vector<std::uint32_t> encode(std::span<const std::string> tokens) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

// Whitespace split + ASCII lowercasing.
std::vector<std::string> tokenize(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);

enum class Modality : std::uint8_t {
  kText = 0,
  // One pooled visual vector of visual_dim per step.
  kVideoText = 1,
  // One 7x7 grid per step; visual_dim = 49 * channels, (row, col, channel) order.
  kVideoTextGrid = 2,
};

std::string_view to_string(Modality modality);

struct StoryStep {
  std::vector<std::uint32_t> tokens;
  std::vector<float> visual;  // empty for text stories

  bool operator==(const StoryStep&) const = default;
};

struct StorySource {
  std::string id;
  Modality modality = Modality::kText;
  std::uint32_t visual_dim = 0;
  std::uint32_t word_dim = 300;
  std::vector<StoryStep> steps;

  std::size_t size() const noexcept { return steps.size(); }
  bool has_video() const noexcept { return modality != Modality::kText; }
  // Throws InputError when n = 0 or visual features disagree with modality.
  void validate() const;

  bool operator==(const StorySource&) const = default;
};

// Inclusive step interval.
struct StepSpan {
  std::size_t start = 0;
  std::size_t end = 0;

  bool contains(std::size_t step) const noexcept { return start <= step && step <= end; }
  bool overlaps(StepSpan other) const noexcept {
    return start <= other.end && other.start <= end;
  }
  bool operator==(const StepSpan&) const = default;
};

struct QAItem {
  std::string story_id;
  std::vector<std::string> question;
  std::array<std::vector<std::string>, kAnswerCount> answers;
  std::size_t correct = 0;
  std::optional<StepSpan> gt_span;
  // who / where / when / what / why / how / other
  std::string type;

  bool operator==(const QAItem&) const = default;
};

inline constexpr std::array<std::string_view, 7> kQuestionTypes = {
    "who", "where", "when", "what", "why", "how", "other"};

std::string question_type(std::span<const std::string> question);

// Stories plus the questions asked about them.
class Dataset {
 public:
  void add_story(StorySource story);
  void add_item(QAItem item);

  const std::vector<StorySource>& stories() const noexcept { return stories_; }
  const std::vector<QAItem>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }

  bool has_story(std::string_view id) const;
  const StorySource& story(std::string_view id) const;
  const StorySource& story_for(const QAItem& item) const { return story(item.story_id); }

  // Every item refers to a known story and its span lies inside it.
  void validate() const;

 private:
  std::vector<StorySource> stories_;
  std::vector<QAItem> items_;
  std::unordered_map<std::string, std::size_t> story_index_;
};

struct Corpus {
  Vocabulary vocab;
  Dataset train;
  Dataset val;
  Dataset test;
};

// --- story feature files

std::vector<std::uint8_t> encode_story(const StorySource& story);
// `id` becomes the story id. Errors are ParseError with the byte offset.
StorySource decode_story(std::span<const std::uint8_t> bytes, std::string id);

void write_story_features(const StorySource& story, const std::filesystem::path& path);
// Story id is the file stem.
StorySource load_story_features(const std::filesystem::path& path);

// --- QA files

void write_qa(std::ostream& out, std::span<const QAItem> items);
// Errors are ParseError with the 1-based line number.
std::vector<QAItem> parse_qa(std::istream& in);
void write_qa(const std::filesystem::path& path, std::span<const QAItem> items);
std::vector<QAItem> load_qa(const std::filesystem::path& path);

// --- vocabulary files

void write_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocabulary(const std::filesystem::path& path);

// --- corpus directories
//   vocab.txt, {train,val,test}.qa, stories/<id>.rwmn

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

// Same-size resample of the items with replacement; stories are shared.
Dataset bootstrap_sample(const Dataset& dataset, Rng& rng);

}  // namespace rwmn
