#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <sstream>

#include "rwmn/data.hpp"
#include "rwmn/error.hpp"

using namespace rwmn;

namespace {

StorySource video_story() {
  StorySource s;
  s.id = "m1";
  s.modality = Modality::kVideoText;
  s.visual_dim = 3;
  s.word_dim = 300;
  s.steps = {{{1, 2, 3}, {0.5f, -1.0f, 2.0f}}, {{4}, {0.0f, 0.25f, 1e-3f}}};
  return s;
}

QAItem item(std::string story, std::size_t correct, std::optional<StepSpan> span) {
  QAItem q;
  q.story_id = std::move(story);
  q.question = {"who", "opened", "the", "door"};
  q.answers = {std::vector<std::string>{"anna"}, {"ben"}, {"the", "cook"}, {"dana"}, {"eli"}};
  q.correct = correct;
  q.gt_span = span;
  q.type = question_type(q.question);
  return q;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rwmn-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Vocabulary, ReservesUnknown) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 1u);
  EXPECT_EQ(v.token(0), Vocabulary::kUnknownToken);
  const auto id = v.add("door");
  EXPECT_EQ(v.add("door"), id);
  EXPECT_EQ(v.id("door"), id);
  EXPECT_EQ(v.id("window"), Vocabulary::kUnknownId);
  const std::vector<std::string> tokens = {"door", "window"};
  EXPECT_EQ(v.encode(tokens), (std::vector<std::uint32_t>{id, 0}));
}

TEST(Tokenize, SplitsAndLowercases) {
  EXPECT_EQ(tokenize("  Who  OPENED\tthe door "), (std::vector<std::string>{"who", "opened", "the", "door"}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(QuestionType, FirstWordTag) {
  const auto t = [](std::string q) { return question_type(tokenize(q)); };
  EXPECT_EQ(t("Why does he leave"), "why");
  EXPECT_EQ(t("how many"), "how");
  EXPECT_EQ(t("where is it"), "where");
  EXPECT_EQ(t("does he leave"), "other");
  EXPECT_EQ(question_type(std::vector<std::string>{}), "other");
}

TEST(StepSpan, Overlap) {
  EXPECT_TRUE((StepSpan{2, 5}).overlaps({5, 9}));
  EXPECT_FALSE((StepSpan{2, 5}).overlaps({6, 9}));
  EXPECT_TRUE((StepSpan{3, 3}).contains(3));
}

TEST(StoryFormat, RoundTrip) {
  const StorySource s = video_story();
  const auto bytes = encode_story(s);
  EXPECT_EQ(decode_story(bytes, "m1"), s);

  StorySource text;
  text.id = "t";
  text.steps = {{{7, 8}, {}}};
  EXPECT_EQ(decode_story(encode_story(text), "t"), text);
}

TEST(StoryFormat, TruncationReportsOffset) {
  const auto bytes = encode_story(video_story());
  // Header is 4 + 2 + 1 + 4 + 4 + 4 = 19 bytes; first step token count follows.
  for (std::size_t cut : std::vector<std::size_t>{3, 10, 19, 25, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    try {
      decode_story(part, "m1");
      FAIL() << "no error at cut " << cut;
    } catch (const ParseError& e) {
      EXPECT_LE(e.position(), cut);
      EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
    }
  }
}

TEST(StoryFormat, RejectsBadHeader) {
  auto bytes = encode_story(video_story());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_story(bad_magic, "x"), ParseError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  try {
    decode_story(bad_version, "x");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 4u);
  }
  auto bad_modality = bytes;
  bad_modality[6] = 7;
  EXPECT_THROW(decode_story(bad_modality, "x"), ParseError);
}

TEST(QaFormat, RoundTrip) {
  const std::vector<QAItem> items = {item("m1", 2, StepSpan{0, 1}), item("m1", 0, std::nullopt)};
  std::stringstream buf;
  write_qa(buf, items);
  EXPECT_EQ(parse_qa(buf), items);
}

TEST(QaFormat, ErrorsCarryLineNumbers) {
  const auto line_of = [](const std::string& text) -> std::size_t {
    std::stringstream in(text);
    try {
      parse_qa(in);
    } catch (const ParseError& e) {
      return e.position();
    }
    return 0;
  };
  const std::string good = "m1\twho\ta\tb\tc\td\te\t1\t-\t-\n";
  EXPECT_EQ(line_of(good + "m1\twho\ta\tb\tc\td\t1\t-\t-\n"), 2u);   // four answers
  EXPECT_EQ(line_of(good + good + "m1\twho\ta\tb\tc\td\te\t5\t-\t-\n"), 3u);
  EXPECT_EQ(line_of("m1\twho\ta\tb\tc\td\te\tx\t-\t-\n"), 1u);
  EXPECT_EQ(line_of("m1\twho\ta\tb\tc\td\te\t1\t3\t-\n"), 1u);
  EXPECT_EQ(line_of("m1\twho\ta\tb\tc\td\te\t1\t4\t2\n"), 1u);
  EXPECT_EQ(line_of(good), 0u);
}

TEST(Dataset, LookupAndValidation) {
  Dataset d;
  d.add_story(video_story());
  EXPECT_THROW(d.add_story(video_story()), InputError);
  d.add_item(item("m1", 1, StepSpan{0, 1}));
  EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(&d.story_for(d.items()[0]), &d.stories()[0]);
  EXPECT_THROW(d.story("nope"), InputError);
  d.add_item(item("m1", 1, StepSpan{1, 2}));
  EXPECT_THROW(d.validate(), InputError);
}

TEST(Story, ValidateChecksVisuals) {
  StorySource s = video_story();
  EXPECT_NO_THROW(s.validate());
  s.steps[1].visual.pop_back();
  EXPECT_THROW(s.validate(), InputError);
  StorySource empty;
  EXPECT_THROW(empty.validate(), InputError);
}

TEST(Corpus, DirectoryRoundTrip) {
  Corpus c;
  for (const char* w : {"who", "opened", "the", "door", "anna", "ben", "cook", "dana", "eli"}) c.vocab.add(w);
  c.train.add_story(video_story());
  c.train.add_item(item("m1", 3, StepSpan{1, 1}));
  StorySource other = video_story();
  other.id = "m2";
  c.val.add_story(other);
  c.val.add_item(item("m2", 4, std::nullopt));
  c.test.add_story(video_story());
  c.test.add_item(item("m1", 0, std::nullopt));
  const auto dir = temp_dir("corpus");
  write_corpus(c, dir);
  const Corpus back = load_corpus(dir);
  EXPECT_EQ(back.vocab, c.vocab);
  EXPECT_EQ(back.train.items(), c.train.items());
  EXPECT_EQ(back.val.stories(), c.val.stories());
  EXPECT_EQ(back.test.items(), c.test.items());
  std::filesystem::remove_all(dir);
}

TEST(Bootstrap, SameSizeWithReplacement) {
  Dataset d;
  d.add_story(video_story());
  for (std::size_t k = 0; k < 5; ++k) d.add_item(item("m1", k, std::nullopt));
  Rng rng(4);
  std::map<std::size_t, int> counts;
  for (int rep = 0; rep < 200; ++rep) {
    const Dataset s = bootstrap_sample(d, rng);
    ASSERT_EQ(s.size(), d.size());
    for (const auto& it : s.items()) ++counts[it.correct];
  }
  // Every item drawn, roughly uniformly (1000 draws, expected 200 each).
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_GT(counts[k], 140);
    EXPECT_LT(counts[k], 260);
  }
  Rng a(9), b(9);
  EXPECT_EQ(bootstrap_sample(d, a).items(), bootstrap_sample(d, b).items());
  EXPECT_THROW(bootstrap_sample(Dataset{}, a), InputError);
}
