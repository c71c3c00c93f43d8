#include "rwmn/data.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "bytes.hpp"
#include "rwmn/error.hpp"

namespace rwmn {

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() { add(kUnknownToken); }

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  if (tokens.empty()) {
    add(kUnknownToken);
    return;
  }
  for (std::string& t : tokens) {
    const auto id = static_cast<std::uint32_t>(tokens_.size());
    if (!ids_.emplace(t, id).second) throw InputError("duplicate vocabulary token '" + t + "'");
    tokens_.push_back(std::move(t));
  }
}

std::uint32_t Vocabulary::add(std::string_view token) {
  auto it = ids_.find(std::string(token));
  if (it != ids_.end()) return it->second;
  const auto id = static_cast<std::uint32_t>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

std::uint32_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnknownId : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return ids_.find(std::string(token)) != ids_.end();
}

const std::string& Vocabulary::token(std::uint32_t id) const {
  if (id >= tokens_.size()) return tokens_[kUnknownId];
  return tokens_[id];
}

std::vector<std::uint32_t> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<std::uint32_t> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

std::string_view to_string(Modality modality) {
  switch (modality) {
    case Modality::kText:
      return "text";
    case Modality::kVideoText:
      return "video+text";
    case Modality::kVideoTextGrid:
      return "video-grid+text";
  }
  return "unknown";
}

void StorySource::validate() const {
  if (steps.empty()) throw InputError("story '" + id + "' has no steps");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::size_t expected = has_video() ? visual_dim : 0;
    if (steps[i].visual.size() != expected) {
      throw InputError("story '" + id + "' step " + std::to_string(i) + " has " +
                       std::to_string(steps[i].visual.size()) + " visual values, expected " +
                       std::to_string(expected));
    }
  }
  if (modality == Modality::kVideoTextGrid && visual_dim % 49 != 0) {
    throw InputError("story '" + id + "': grid visual_dim must be a multiple of 49");
  }
}

std::string question_type(std::span<const std::string> question) {
  if (question.empty()) return "other";
  std::string first = question.front();
  std::transform(first.begin(), first.end(), first.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (std::string_view t : kQuestionTypes) {
    if (t != "other" && first == t) return first;
  }
  return "other";
}

// ---------------------------------------------------------------------------
// Dataset

void Dataset::add_story(StorySource story) {
  if (story_index_.count(story.id) != 0) {
    throw InputError("duplicate story id '" + story.id + "'");
  }
  story_index_.emplace(story.id, stories_.size());
  stories_.push_back(std::move(story));
}

void Dataset::add_item(QAItem item) { items_.push_back(std::move(item)); }

bool Dataset::has_story(std::string_view id) const {
  return story_index_.count(std::string(id)) != 0;
}

const StorySource& Dataset::story(std::string_view id) const {
  auto it = story_index_.find(std::string(id));
  if (it == story_index_.end()) throw InputError("unknown story id '" + std::string(id) + "'");
  return stories_[it->second];
}

void Dataset::validate() const {
  for (const StorySource& s : stories_) s.validate();
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const QAItem& item = items_[i];
    const StorySource& s = story(item.story_id);
    if (item.correct >= kAnswerCount) {
      throw InputError("item " + std::to_string(i) + ": correct index out of range");
    }
    if (item.gt_span && (item.gt_span->start > item.gt_span->end || item.gt_span->end >= s.size())) {
      throw InputError("item " + std::to_string(i) + ": gt_span outside story '" + s.id + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Binary story format

namespace {

constexpr char kStoryMagic[4] = {'R', 'W', 'M', 'N'};
constexpr std::uint16_t kStoryVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_story(const StorySource& story) {
  story.validate();
  detail::ByteWriter w;
  w.bytes(kStoryMagic, 4);
  w.le<std::uint16_t>(kStoryVersion);
  w.le<std::uint8_t>(static_cast<std::uint8_t>(story.modality));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(story.steps.size()));
  w.le<std::uint32_t>(story.has_video() ? story.visual_dim : 0);
  w.le<std::uint32_t>(story.word_dim);
  for (const StoryStep& step : story.steps) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(step.tokens.size()));
    for (std::uint32_t t : step.tokens) w.le<std::uint32_t>(t);
    for (float v : step.visual) w.f32(v);
  }
  return w.take();
}

StorySource decode_story(std::span<const std::uint8_t> bytes, std::string id) {
  detail::ByteReader r(bytes, "story file");
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kStoryMagic, 4) != 0) throw ParseError("bad story magic at byte offset 0", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.le<std::uint16_t>("version");
  if (version != kStoryVersion) {
    throw ParseError("unsupported story version " + std::to_string(version) + " at byte offset " +
                         std::to_string(version_at),
                     version_at);
  }
  const std::size_t modality_at = r.offset();
  const auto modality = r.le<std::uint8_t>("modality");
  if (modality > static_cast<std::uint8_t>(Modality::kVideoTextGrid)) {
    throw ParseError("unknown modality " + std::to_string(modality) + " at byte offset " +
                         std::to_string(modality_at),
                     modality_at);
  }
  StorySource story;
  story.id = std::move(id);
  story.modality = static_cast<Modality>(modality);
  const std::size_t n_at = r.offset();
  const auto n = r.le<std::uint32_t>("step count");
  const std::size_t dim_at = r.offset();
  story.visual_dim = r.le<std::uint32_t>("visual_dim");
  story.word_dim = r.le<std::uint32_t>("d_w");
  if (n == 0) throw ParseError("story declares zero steps at byte offset " + std::to_string(n_at), n_at);
  if (story.has_video() == (story.visual_dim == 0)) {
    throw ParseError("visual_dim " + std::to_string(story.visual_dim) + " inconsistent with modality " +
                         std::string(to_string(story.modality)) + " at byte offset " + std::to_string(dim_at),
                     dim_at);
  }
  if (story.modality == Modality::kVideoTextGrid && story.visual_dim % 49 != 0) {
    throw ParseError("grid visual_dim not a multiple of 49 at byte offset " + std::to_string(dim_at), dim_at);
  }
  story.steps.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    StoryStep& step = story.steps[i];
    if (r.remaining() == 0) {
      throw ParseError("story declares " + std::to_string(n) + " steps but record " + std::to_string(i) +
                           " is missing at byte offset " + std::to_string(r.offset()),
                       r.offset());
    }
    const auto count = r.le<std::uint32_t>("token count");
    r.need(static_cast<std::size_t>(count) * 4, "token ids");
    step.tokens.resize(count);
    for (auto& t : step.tokens) t = r.le<std::uint32_t>("token id");
    if (story.has_video()) {
      r.need(static_cast<std::size_t>(story.visual_dim) * 4, "visual features");
      step.visual.resize(story.visual_dim);
      for (float& v : step.visual) v = r.f32("visual value");
    }
  }
  if (r.remaining() != 0) {
    throw ParseError(std::to_string(r.remaining()) + " trailing bytes after last record at byte offset " +
                         std::to_string(r.offset()),
                     r.offset());
  }
  return story;
}

void write_story_features(const StorySource& story, const std::filesystem::path& path) {
  const auto bytes = encode_story(story);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

StorySource load_story_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_story(bytes, path.stem().string());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.position());
  }
}

// ---------------------------------------------------------------------------
// QA text format

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

std::size_t parse_index(const std::string& field, std::size_t line, const char* what) {
  std::size_t value = 0;
  std::size_t used = 0;
  try {
    if (field.empty() || field[0] == '-' || field[0] == '+') throw std::invalid_argument(field);
    value = std::stoul(field, &used);
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line) + ": invalid " + what + " '" + field + "'", line);
  }
  if (used != field.size()) {
    throw ParseError("line " + std::to_string(line) + ": invalid " + what + " '" + field + "'", line);
  }
  return value;
}

}  // namespace

void write_qa(std::ostream& out, std::span<const QAItem> items) {
  for (const QAItem& item : items) {
    out << item.story_id << '\t' << join_tokens(item.question);
    for (const auto& a : item.answers) out << '\t' << join_tokens(a);
    out << '\t' << item.correct << '\t';
    if (item.gt_span) {
      out << item.gt_span->start << '\t' << item.gt_span->end;
    } else {
      out << "-\t-";
    }
    out << '\n';
  }
}

std::vector<QAItem> parse_qa(std::istream& in) {
  std::vector<QAItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    constexpr std::size_t kFields = 3 + kAnswerCount + 2;
    if (fields.size() != kFields) {
      const long answers = static_cast<long>(fields.size()) - 5;
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(kAnswerCount) +
                           " answers (" + std::to_string(kFields) + " fields), got " +
                           std::to_string(std::max(0L, answers)) + " answers",
                       line_no);
    }
    QAItem item;
    item.story_id = fields[0];
    if (item.story_id.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty story id", line_no);
    item.question = tokenize(fields[1]);
    if (item.question.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty question", line_no);
    for (std::size_t a = 0; a < kAnswerCount; ++a) {
      item.answers[a] = tokenize(fields[2 + a]);
      if (item.answers[a].empty()) {
        throw ParseError("line " + std::to_string(line_no) + ": empty answer " + std::to_string(a + 1), line_no);
      }
    }
    item.correct = parse_index(fields[2 + kAnswerCount], line_no, "correct index");
    if (item.correct >= kAnswerCount) {
      throw ParseError("line " + std::to_string(line_no) + ": correct index " + std::to_string(item.correct) +
                           " not in [0, 4]",
                       line_no);
    }
    const std::string& s0 = fields[3 + kAnswerCount];
    const std::string& s1 = fields[4 + kAnswerCount];
    if (s0 == "-" && s1 == "-") {
      item.gt_span.reset();
    } else if (s0 == "-" || s1 == "-") {
      throw ParseError("line " + std::to_string(line_no) + ": half-specified span", line_no);
    } else {
      StepSpan span{parse_index(s0, line_no, "span start"), parse_index(s1, line_no, "span end")};
      if (span.start > span.end) {
        throw ParseError("line " + std::to_string(line_no) + ": span start after end", line_no);
      }
      item.gt_span = span;
    }
    item.type = question_type(item.question);
    items.push_back(std::move(item));
  }
  return items;
}

void write_qa(const std::filesystem::path& path, std::span<const QAItem> items) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  write_qa(out, items);
}

std::vector<QAItem> load_qa(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return parse_qa(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.position());
  }
}

// ---------------------------------------------------------------------------
// Vocabulary files

void write_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const std::string& t : vocab.tokens()) out << t << '\n';
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Corpus directories

namespace {

void write_split(const Dataset& split, const std::filesystem::path& dir, const std::string& name) {
  write_qa(dir / (name + ".qa"), split.items());
  for (const StorySource& s : split.stories()) write_story_features(s, dir / "stories" / (s.id + ".rwmn"));
}

Dataset load_split(const std::filesystem::path& dir, const std::string& name) {
  Dataset split;
  const auto qa_path = dir / (name + ".qa");
  if (!std::filesystem::exists(qa_path)) return split;
  auto items = load_qa(qa_path);
  for (QAItem& item : items) {
    if (!split.has_story(item.story_id)) {
      split.add_story(load_story_features(dir / "stories" / (item.story_id + ".rwmn")));
    }
    split.add_item(std::move(item));
  }
  split.validate();
  return split;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "stories");
  write_vocabulary(corpus.vocab, dir / "vocab.txt");
  write_split(corpus.train, dir, "train");
  write_split(corpus.val, dir, "val");
  write_split(corpus.test, dir, "test");
}

Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  corpus.vocab = load_vocabulary(dir / "vocab.txt");
  corpus.train = load_split(dir, "train");
  corpus.val = load_split(dir, "val");
  corpus.test = load_split(dir, "test");
  return corpus;
}

// ---------------------------------------------------------------------------

Dataset bootstrap_sample(const Dataset& dataset, Rng& rng) {
  if (dataset.empty()) throw InputError("bootstrap_sample of an empty dataset");
  Dataset sample;
  for (const StorySource& s : dataset.stories()) sample.add_story(s);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  for (std::size_t i = 0; i < dataset.size(); ++i) sample.add_item(dataset.items()[pick(rng)]);
  return sample;
}

}  // namespace rwmn
