#include "rwmn/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"
#include "rwmn/checkpoint.hpp"
#include "rwmn/error.hpp"

namespace rwmn {

namespace {

using Json = nlohmann::ordered_json;
namespace pt = boost::property_tree;

// --- value parsing

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto at = s.find(sep, start);
    std::string part = trim(s.substr(start, at == std::string_view::npos ? std::string_view::npos : at - start));
    if (!part.empty()) out.push_back(std::move(part));
    if (at == std::string_view::npos) break;
    start = at + 1;
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError(key + ": expected " + expected + ", got '" + value + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    bad_value(key, value, std::is_floating_point_v<T> ? "a number" : "a non-negative integer");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = lower(value);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, value, "true or false");
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// Reads one section and rejects keys outside `known`.
class Section {
 public:
  Section(const pt::ptree& root, std::string name, std::set<std::string> known)
      : name_(std::move(name)), known_(std::move(known)) {
    if (const auto child = root.get_child_optional(name_)) {
      for (const auto& [key, value] : *child) {
        if (!known_.contains(key)) throw ConfigError("unknown key '" + key + "' in section [" + name_ + "]");
        values_[key] = trim(value.data());
      }
    }
  }

  template <typename T>
  void read(const std::string& key, T& out) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return;
    const std::string full = name_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      out = parse_bool(full, it->second);
    } else if constexpr (std::is_same_v<T, std::string>) {
      out = it->second;
    } else {
      out = parse_number<T>(full, it->second);
    }
  }

  std::optional<std::string> get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::string key(const std::string& k) const { return name_ + "." + k; }

 private:
  std::string name_;
  std::set<std::string> known_;
  std::map<std::string, std::string> values_;
};

std::vector<ConvLayerSpec> layers_from(const Section& s, const std::string& key, std::vector<ConvLayerSpec> fallback) {
  const auto v = s.get(key);
  if (!v) return fallback;
  try {
    return parse_layers(*v);
  } catch (const Error& e) {
    throw ConfigError(s.key(key) + ": " + e.what());
  }
}

std::string iso_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("failed writing " + path.string());
}

std::filesystem::path member_checkpoint(const std::filesystem::path& dir, std::size_t k) {
  return dir / ("member-" + std::to_string(k) + ".rwmp");
}

std::size_t member_count(const EnsembleSpec& spec) {
  return spec.mode == EnsembleMode::kNone ? 1 : spec.members;
}

std::string pad(std::string s, std::size_t width, bool right = false) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return right ? fill + s : s + fill;
}

std::string fixed(double v, int digits) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

// Columns padded to the widest cell; numeric columns right-aligned.
std::string aligned_table(const std::vector<std::vector<std::string>>& rows, const std::vector<bool>& right) {
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c > 0) line += "  ";
      line += pad(r[c], width[c], right[c]);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + '\n';
  }
  return out;
}

Json span_json(StepSpan s) { return Json::array({s.start, s.end}); }

Json history_json(const TrainHistory& h) {
  Json epochs = Json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back(Json{{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"val_loss", e.val_loss},
                          {"val_acc", e.val_accuracy}});
  }
  return Json{{"best_epoch", h.best_epoch},
              {"best_val_loss", h.best_val_loss},
              {"stop", std::string(to_string(h.stop))},
              {"epochs", std::move(epochs)}};
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard deviation; zero below two values.
double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void DatasetSpec::validate() const {
  const bool has_dir = !corpus_dir.empty();
  if (synthetic.has_value() == has_dir) {
    throw ConfigError("dataset spec needs exactly one of a synthetic task or a corpus directory");
  }
  if (synthetic) synthetic->validate();
}

void ExperimentConfig::validate() const {
  data.validate();
  model.validate();
  train.validate();
  if (ensemble.mode == EnsembleMode::kNone && ensemble.members != 1) {
    throw ConfigError("ensemble.members must be 1 when ensemble.mode is none");
  }
  if (ensemble.members == 0) throw ConfigError("ensemble.members must be positive");
  if (data.synthetic && model.uses_video() && model.fusion.visual.frame_size() != data.synthetic->feature_dim) {
    throw ConfigError("model visual_channels * grid_cells (" + std::to_string(model.fusion.visual.frame_size()) +
                      ") must equal data.feature_dim (" + std::to_string(data.synthetic->feature_dim) + ")");
  }
  if (!formats.json && !formats.text && !output_dir.empty()) {
    throw ConfigError("experiment.formats must name json, text or both");
  }
  if (sweep.seeds == 0) throw ConfigError("sweep.seeds must be positive");
}

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig c = *this;
  if (c.data.synthetic) c.data.synthetic->seed = seed;
  c.model.fusion.sketch_seed = seed + 1;
  c.train.rng_seed = seed + 2;
  return c;
}

ExperimentConfig parse_experiment_config(std::istream& in) {
  pt::ptree root;
  try {
    pt::read_ini(in, root);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError("config: " + std::string(e.message()) + " at line " + std::to_string(e.line()), e.line());
  }
  const std::set<std::string> sections = {"experiment", "data", "model", "train", "ensemble", "sweep"};
  for (const auto& [name, child] : root) {
    if (!sections.contains(name)) {
      if (child.empty()) throw ConfigError("key '" + name + "' outside any section");
      throw ConfigError("unknown config section [" + name + "]");
    }
  }

  ExperimentConfig c;
  const Section ex(root, "experiment", {"seed", "output", "formats", "checkpoints"});
  ex.read("seed", c.seed);
  if (auto v = ex.get("output")) c.output_dir = *v;
  if (auto v = ex.get("formats")) {
    c.formats = {false, false};
    for (const auto& f : split(*v, ',')) {
      const std::string lf = lower(f);
      if (lf == "json") {
        c.formats.json = true;
      } else if (lf == "text") {
        c.formats.text = true;
      } else {
        bad_value(ex.key("formats"), *v, "a list of json, text");
      }
    }
  }
  ex.read("checkpoints", c.save_checkpoints);

  const Section data(root, "data",
                     {"source", "path", "task", "min_steps", "max_steps", "vocab_size", "chunk_width",
                      "filler_tokens", "subject_entities", "feature_dim", "train", "val", "test"});
  const std::string source = lower(data.get("source").value_or("synthetic"));
  if (source == "synthetic") {
    SyntheticTaskConfig s;
    if (auto v = data.get("task")) {
      try {
        s.task = parse_synthetic_task(*v);
      } catch (const Error& e) {
        throw ConfigError(data.key("task") + ": " + e.what());
      }
    }
    data.read("min_steps", s.min_steps);
    data.read("max_steps", s.max_steps);
    data.read("vocab_size", s.vocab_size);
    data.read("chunk_width", s.chunk_width);
    data.read("filler_tokens", s.filler_tokens);
    data.read("subject_entities", s.subject_entities);
    data.read("feature_dim", s.feature_dim);
    data.read("train", s.train_count);
    data.read("val", s.val_count);
    data.read("test", s.test_count);
    if (data.get("path")) throw ConfigError("data.path is only valid with data.source = corpus");
    c.data.synthetic = s;
  } else if (source == "corpus") {
    for (const char* k : {"task", "min_steps", "max_steps", "vocab_size", "chunk_width", "filler_tokens",
                          "subject_entities", "feature_dim", "train", "val", "test"}) {
      if (data.get(k)) throw ConfigError(data.key(k) + " is only valid with data.source = synthetic");
    }
    const auto path = data.get("path");
    if (!path || path->empty()) throw ConfigError("data.path is required with data.source = corpus");
    c.data.synthetic.reset();
    c.data.corpus_dir = *path;
  } else {
    bad_value(data.key("source"), source, "synthetic or corpus");
  }

  const Section m(root, "model",
                  {"d", "cbp_dim", "word_dim", "visual_channels", "grid_cells", "frame_pooling", "embedding_seed",
                   "embedding_scale", "trainable_embedding", "write_layers", "read_layers", "variant", "alpha_init",
                   "attention", "precision"});
  m.read("d", c.model.d);
  m.read("cbp_dim", c.model.fusion.cbp_dim);
  m.read("word_dim", c.model.fusion.word_dim);
  m.read("visual_channels", c.model.fusion.visual.channels);
  m.read("grid_cells", c.model.fusion.visual.grid_cells);
  if (auto v = m.get("frame_pooling")) {
    const std::string lv = lower(*v);
    if (lv == "mean") {
      c.model.fusion.frame_pooling = FramePooling::kMean;
    } else if (lv == "sum") {
      c.model.fusion.frame_pooling = FramePooling::kSum;
    } else {
      bad_value(m.key("frame_pooling"), *v, "mean or sum");
    }
  }
  m.read("embedding_seed", c.model.fusion.embedding_seed);
  m.read("embedding_scale", c.model.fusion.embedding_scale);
  m.read("trainable_embedding", c.model.fusion.trainable_embedding);
  c.model.write_layers = layers_from(m, "write_layers", c.model.write_layers);
  c.model.read_layers = layers_from(m, "read_layers", c.model.read_layers);
  if (auto v = m.get("variant")) {
    try {
      c.model.variant = parse_variant(*v);
    } catch (const Error& e) {
      throw ConfigError(m.key("variant") + ": " + e.what());
    }
  }
  m.read("alpha_init", c.model.alpha_init_raw);
  if (auto v = m.get("attention")) {
    const std::string lv = lower(*v);
    if (lv == "joint") {
      c.model.attention = AttentionNorm::kJoint;
    } else if (lv == "per_channel") {
      c.model.attention = AttentionNorm::kPerChannel;
    } else {
      bad_value(m.key("attention"), *v, "joint or per_channel");
    }
  }
  if (auto v = m.get("precision")) {
    if (*v == "32") {
      c.model.precision = Precision::kFloat32;
    } else if (*v == "64") {
      c.model.precision = Precision::kFloat64;
    } else {
      bad_value(m.key("precision"), *v, "32 or 64");
    }
  }

  const Section t(root, "train",
                  {"learning_rate", "initial_accumulator", "batch_size", "max_epochs", "patience", "restarts"});
  t.read("learning_rate", c.train.learning_rate);
  t.read("initial_accumulator", c.train.adagrad_initial_accumulator);
  t.read("batch_size", c.train.batch_size);
  t.read("max_epochs", c.train.max_epochs);
  t.read("patience", c.train.early_stop_patience);
  t.read("restarts", c.train.restarts);

  const Section e(root, "ensemble", {"mode", "members"});
  if (auto v = e.get("mode")) {
    try {
      c.ensemble.mode = parse_ensemble_mode(*v);
    } catch (const Error& err) {
      throw ConfigError(e.key("mode") + ": " + err.what());
    }
  }
  e.read("members", c.ensemble.members);

  const Section sw(root, "sweep", {"variants", "structures", "seeds"});
  if (auto v = sw.get("variants")) {
    for (const auto& name : split(*v, ',')) {
      try {
        c.sweep.variants.push_back(parse_variant(name));
      } catch (const Error& err) {
        throw ConfigError(sw.key("variants") + ": " + err.what());
      }
    }
  }
  if (auto v = sw.get("structures")) {
    for (const auto& s : split(*v, ';')) {
      try {
        c.sweep.structures.push_back(parse_structure(s));
      } catch (const Error& err) {
        throw ConfigError(sw.key("structures") + ": " + err.what());
      }
    }
  }
  sw.read("seeds", c.sweep.seeds);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_experiment_config(in);
}

std::string format_experiment_config(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "[experiment]\n"
      << "seed = " << c.seed << '\n';
  if (!c.output_dir.empty()) out << "output = " << c.output_dir.string() << '\n';
  std::vector<std::string> formats;
  if (c.formats.json) formats.emplace_back("json");
  if (c.formats.text) formats.emplace_back("text");
  out << "formats = ";
  for (std::size_t i = 0; i < formats.size(); ++i) out << (i ? "," : "") << formats[i];
  out << "\ncheckpoints = " << (c.save_checkpoints ? "true" : "false") << "\n\n[data]\n";
  if (c.data.synthetic) {
    const auto& s = *c.data.synthetic;
    out << "source = synthetic\n"
        << "task = " << to_string(s.task) << '\n'
        << "min_steps = " << s.min_steps << '\n'
        << "max_steps = " << s.max_steps << '\n'
        << "vocab_size = " << s.vocab_size << '\n'
        << "chunk_width = " << s.chunk_width << '\n'
        << "filler_tokens = " << s.filler_tokens << '\n'
        << "subject_entities = " << s.subject_entities << '\n'
        << "feature_dim = " << s.feature_dim << '\n'
        << "train = " << s.train_count << '\n'
        << "val = " << s.val_count << '\n'
        << "test = " << s.test_count << '\n';
  } else {
    out << "source = corpus\n"
        << "path = " << c.data.corpus_dir.string() << '\n';
  }
  const auto& m = c.model;
  out << "\n[model]\n"
      << "d = " << m.d << '\n'
      << "cbp_dim = " << m.fusion.cbp_dim << '\n'
      << "word_dim = " << m.fusion.word_dim << '\n'
      << "visual_channels = " << m.fusion.visual.channels << '\n'
      << "grid_cells = " << m.fusion.visual.grid_cells << '\n'
      << "frame_pooling = " << (m.fusion.frame_pooling == FramePooling::kMean ? "mean" : "sum") << '\n'
      << "embedding_seed = " << m.fusion.embedding_seed << '\n'
      << "embedding_scale = " << format_double(m.fusion.embedding_scale) << '\n'
      << "trainable_embedding = " << (m.fusion.trainable_embedding ? "true" : "false") << '\n'
      << "write_layers = " << format_layers(m.write_layers) << '\n'
      << "read_layers = " << format_layers(m.read_layers) << '\n'
      << "variant = " << to_string(m.variant) << '\n'
      << "alpha_init = " << format_double(m.alpha_init_raw) << '\n'
      << "attention = " << (m.attention == AttentionNorm::kJoint ? "joint" : "per_channel") << '\n'
      << "precision = " << static_cast<int>(m.precision) << '\n';
  const auto& t = c.train;
  out << "\n[train]\n"
      << "learning_rate = " << format_double(t.learning_rate) << '\n'
      << "initial_accumulator = " << format_double(t.adagrad_initial_accumulator) << '\n'
      << "batch_size = " << t.batch_size << '\n'
      << "max_epochs = " << t.max_epochs << '\n'
      << "patience = " << t.early_stop_patience << '\n'
      << "restarts = " << t.restarts << '\n';
  out << "\n[ensemble]\n"
      << "mode = " << to_string(c.ensemble.mode) << '\n'
      << "members = " << c.ensemble.members << '\n';
  out << "\n[sweep]\n";
  if (!c.sweep.variants.empty()) {
    out << "variants = ";
    for (std::size_t i = 0; i < c.sweep.variants.size(); ++i) out << (i ? "," : "") << to_string(c.sweep.variants[i]);
    out << '\n';
  }
  if (!c.sweep.structures.empty()) {
    out << "structures = ";
    for (std::size_t i = 0; i < c.sweep.structures.size(); ++i) {
      out << (i ? ";" : "") << format_structure(c.sweep.structures[i]);
    }
    out << '\n';
  }
  out << "seeds = " << c.sweep.seeds << '\n';
  return out.str();
}

Corpus build_corpus(const DatasetSpec& spec) {
  spec.validate();
  if (spec.synthetic) return generate_synthetic(*spec.synthetic);
  return load_corpus(spec.corpus_dir);
}

// ---------------------------------------------------------------------------
// Reports

const SplitReport& Report::split(std::string_view name) const {
  for (const auto& s : splits) {
    if (s.name == name) return s;
  }
  throw InputError("report has no split '" + std::string(name) + "'");
}

std::map<std::string, TypeAccuracy> question_type_breakdown(const SplitReport& split) {
  std::map<std::string, TypeAccuracy> out;
  for (const auto& r : split.items) {
    auto& t = out[r.type];
    ++t.count;
    t.correct += r.correct ? 1 : 0;
  }
  for (auto& [type, t] : out) t.accuracy = static_cast<double>(t.correct) / static_cast<double>(t.count);
  return out;
}

std::string report_json(const Report& report, bool include_volatile) {
  Json j;
  j["seed"] = report.seed;
  j["config"] = report.config;
  Json members = Json::array();
  for (const auto& m : report.members) members.push_back(Json{{"seed", m.seed}, {"history", history_json(m.history)}});
  j["members"] = std::move(members);
  Json splits = Json::object();
  for (const auto& s : report.splits) {
    Json types = Json::object();
    for (const auto& [name, t] : s.types) {
      types[name] = Json{{"count", t.count}, {"correct", t.correct}, {"accuracy", t.accuracy}};
    }
    Json items = Json::array();
    for (const auto& r : s.items) {
      items.push_back(Json{{"id", r.id},
                           {"type", r.type},
                           {"y", r.y},
                           {"correct_index", r.correct_index},
                           {"correct", r.correct},
                           {"z", r.z},
                           {"attention_slot", r.attention_slot},
                           {"attention_channel", r.attention_channel},
                           {"attention_window", span_json(r.attention_window)}});
    }
    splits[s.name] = Json{{"count", s.count},
                          {"correct", s.correct},
                          {"accuracy", s.accuracy},
                          {"loss", s.loss},
                          {"types", std::move(types)},
                          {"items", std::move(items)}};
  }
  j["splits"] = std::move(splits);
  if (include_volatile) {
    j["timestamp"] = report.timestamp;
    j["wall_clock_seconds"] = report.wall_clock_seconds;
  }
  return j.dump(1) + '\n';
}

std::string report_text(const Report& report) {
  std::string out = "seed " + std::to_string(report.seed) + "\n\n";
  std::vector<std::vector<std::string>> rows = {{"split", "items", "correct", "accuracy", "loss"}};
  for (const auto& s : report.splits) {
    rows.push_back({s.name, std::to_string(s.count), std::to_string(s.correct), fixed(s.accuracy, 4),
                    fixed(s.loss, 4)});
  }
  out += aligned_table(rows, {false, true, true, true, true});

  std::vector<std::string> header = {"type"};
  for (const auto& s : report.splits) header.push_back(s.name);
  std::vector<std::vector<std::string>> type_rows = {header};
  for (auto type : kQuestionTypes) {
    std::vector<std::string> row = {std::string(type)};
    bool any = false;
    for (const auto& s : report.splits) {
      const auto it = s.types.find(std::string(type));
      if (it == s.types.end()) {
        row.emplace_back("-");
      } else {
        any = true;
        row.push_back(fixed(it->second.accuracy, 4) + " (" + std::to_string(it->second.count) + ")");
      }
    }
    if (any) type_rows.push_back(std::move(row));
  }
  out += '\n' + aligned_table(type_rows, std::vector<bool>(header.size(), true));

  for (std::size_t k = 0; k < report.members.size(); ++k) {
    const auto& h = report.members[k].history;
    out += "\nmember " + std::to_string(k) + ": seed " + std::to_string(report.members[k].seed) + ", " +
           std::to_string(h.epochs.size()) + " epochs, best epoch " + std::to_string(h.best_epoch) +
           ", best val loss " + fixed(h.best_val_loss, 4) + ", stop " + std::string(to_string(h.stop)) + '\n';
  }
  if (!report.timestamp.empty()) {
    out += "\n" + report.timestamp + ", " + fixed(report.wall_clock_seconds, 1) + " s\n";
  }
  return out;
}

SplitReport evaluate_split(std::span<const RwmnModel> models, const Dataset& data, std::string name) {
  if (models.empty()) throw InputError("evaluate_split needs at least one model");
  SplitReport out;
  out.name = std::move(name);
  out.count = data.size();
  std::vector<EncodedDataset> encoded;
  encoded.reserve(models.size());
  for (const auto& m : models) encoded.emplace_back(m, data);
  std::unordered_map<std::size_t, std::vector<StepSpan>> fields;
  std::unordered_map<std::string, std::size_t> per_story;
  const auto& items = data.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const QAItem& item = items[i];
    std::vector<Prediction> preds;
    for (std::size_t k = 0; k < models.size(); ++k) {
      Tape tape(models[k].config().precision, false);
      preds.push_back(predict(models[k], encoded[k].inputs(tape, i)));
    }
    ItemRecord r;
    r.id = item.story_id + "#" + std::to_string(per_story[item.story_id]++);
    r.type = item.type.empty() ? question_type(item.question) : item.type;
    if (preds.size() == 1) {
      r.y = preds[0].y;
      r.z = preds[0].z;
    } else {
      auto e = ensemble_predict(preds);
      r.y = e.y;
      r.z = std::move(e.z);
    }
    r.correct_index = item.correct;
    r.correct = r.y == item.correct;
    out.correct += r.correct ? 1 : 0;
    out.loss -= std::log(r.z[item.correct]);

    const Prediction& p0 = preds[0];
    const std::size_t flat = argmax(p0.attention);
    r.attention_slot = flat / p0.channels;
    r.attention_channel = flat % p0.channels;
    const std::size_t n = data.story_for(item).size();
    auto it = fields.find(n);
    if (it == fields.end()) it = fields.emplace(n, attention_receptive_fields(models[0].config(), n)).first;
    r.attention_window = it->second.at(r.attention_slot);
    out.items.push_back(std::move(r));
  }
  if (out.count > 0) {
    out.accuracy = static_cast<double>(out.correct) / static_cast<double>(out.count);
    out.loss /= static_cast<double>(out.count);
  }
  out.types = question_type_breakdown(out);
  return out;
}

namespace {

std::vector<SplitReport> evaluate_corpus(std::span<const RwmnModel> models, const Corpus& corpus) {
  std::vector<SplitReport> out;
  out.push_back(evaluate_split(models, corpus.train, "train"));
  out.push_back(evaluate_split(models, corpus.val, "val"));
  out.push_back(evaluate_split(models, corpus.test, "test"));
  return out;
}

void prepare_output_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw ConfigError("output directory " + dir.string() + " cannot be created");
  }
  const auto probe = dir / ".write-test";
  {
    std::ofstream out(probe);
    if (!out) throw ConfigError("output directory " + dir.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

void write_reports(const Report& report, const ExperimentConfig& config, const std::string& stem) {
  if (config.formats.json) write_text_file(config.output_dir / (stem + ".json"), report_json(report));
  if (config.formats.text) write_text_file(config.output_dir / (stem + ".txt"), report_text(report));
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
  const ExperimentConfig c = config.resolved();
  c.validate();
  const bool writing = !c.output_dir.empty();
  if (writing) prepare_output_dir(c.output_dir);
  const auto t0 = std::chrono::steady_clock::now();

  const Corpus corpus = build_corpus(c.data);
  corpus.train.validate();
  corpus.val.validate();
  corpus.test.validate();
  const RwmnModel base = RwmnModel::create(c.model, corpus.vocab);

  std::ofstream metrics;
  TrainObserver observer;
  if (writing) {
    write_text_file(c.output_dir / "config.ini", format_experiment_config(c));
    metrics.open(c.output_dir / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw InputError("cannot write " + (c.output_dir / "metrics.jsonl").string());
    observer.metrics = &metrics;
  }

  std::vector<TrainResult> trained;
  if (c.ensemble.mode == EnsembleMode::kNone) {
    trained.push_back(train_with_restarts(base, corpus.train, corpus.val, c.train, observer));
  } else {
    trained = train_members(base, c.ensemble.mode, c.ensemble.members, corpus.train, corpus.val, c.train, observer);
  }

  ExperimentResult result;
  result.report.seed = c.seed;
  result.report.config = format_experiment_config(c);
  for (auto& t : trained) {
    result.report.members.push_back({t.seed, t.history});
    result.models.push_back(std::move(t.model));
  }
  result.report.splits = evaluate_corpus(result.models, corpus);
  result.report.timestamp = iso_timestamp();
  result.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (writing) {
    if (c.save_checkpoints) {
      for (std::size_t k = 0; k < result.models.size(); ++k) {
        save_checkpoint(result.models[k], member_checkpoint(c.output_dir, k));
      }
    }
    write_reports(result.report, c, "report");
  }
  return result;
}

Report run_evaluation(const ExperimentConfig& config) {
  const ExperimentConfig c = config.resolved();
  c.validate();
  if (c.output_dir.empty()) throw ConfigError("evaluation needs the output directory of a training run");
  const auto t0 = std::chrono::steady_clock::now();
  const Corpus corpus = build_corpus(c.data);
  std::vector<RwmnModel> models;
  for (std::size_t k = 0; k < member_count(c.ensemble); ++k) {
    RwmnModel m = RwmnModel::create(c.model, corpus.vocab);
    load_checkpoint(member_checkpoint(c.output_dir, k), m);
    models.push_back(std::move(m));
  }
  Report report;
  report.seed = c.seed;
  report.config = format_experiment_config(c);
  report.splits = evaluate_corpus(models, corpus);
  report.timestamp = iso_timestamp();
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_reports(report, c, "eval_report");
  return report;
}

// ---------------------------------------------------------------------------
// Sweeps

StructureSpec parse_structure(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) {
    throw ConfigError("structure '" + std::string(text) + "' must be <write layers>/<read layers>");
  }
  return {parse_layers(trim(text.substr(0, slash))), parse_layers(trim(text.substr(slash + 1)))};
}

std::string format_structure(const StructureSpec& s) {
  const auto side = [](const std::vector<ConvLayerSpec>& l) { return l.empty() ? std::string("none") : format_layers(l); };
  return side(s.write) + "/" + side(s.read);
}

SweepRow run_sweep_cell(const ExperimentConfig& base, Variant variant, const StructureSpec& structure,
                        std::size_t seeds) {
  SweepRow row;
  row.variant = variant;
  row.structure = structure;
  try {
    for (std::size_t s = 0; s < seeds; ++s) {
      ExperimentConfig c = base;
      c.seed = base.seed + s;
      c.model.variant = variant;
      c.model.write_layers = structure.write;
      c.model.read_layers = structure.read;
      c.output_dir.clear();
      const ExperimentResult r = run_experiment(c);
      row.val_accuracy.push_back(r.report.split("val").accuracy);
      row.test_accuracy.push_back(r.report.split("test").accuracy);
    }
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  row.val_mean = mean_of(row.val_accuracy);
  row.val_sd = sd_of(row.val_accuracy);
  row.test_mean = mean_of(row.test_accuracy);
  row.test_sd = sd_of(row.test_accuracy);
  return row;
}

SweepTable ablation_sweep(const ExperimentConfig& base, const SweepSpec& spec) {
  if (spec.variants.empty() || spec.structures.empty()) {
    throw ConfigError("a sweep needs at least one variant and one structure");
  }
  if (spec.seeds == 0) throw ConfigError("sweep.seeds must be positive");
  SweepTable table;
  for (const auto& structure : spec.structures) {
    for (Variant v : spec.variants) table.rows.push_back(run_sweep_cell(base, v, structure, spec.seeds));
  }
  return table;
}

std::string sweep_json(const SweepTable& table) {
  Json rows = Json::array();
  for (const auto& r : table.rows) {
    Json row{{"variant", std::string(to_string(r.variant))},
             {"nu_w", r.structure.write.size()},
             {"nu_r", r.structure.read.size()},
             {"write_layers", format_layers(r.structure.write)},
             {"read_layers", format_layers(r.structure.read)},
             {"val_accuracy", r.val_accuracy},
             {"test_accuracy", r.test_accuracy},
             {"val_mean", r.val_mean},
             {"val_sd", r.val_sd},
             {"test_mean", r.test_mean},
             {"test_sd", r.test_sd}};
    if (!r.error.empty()) row["error"] = r.error;
    rows.push_back(std::move(row));
  }
  return Json{{"rows", std::move(rows)}}.dump(1) + '\n';
}

std::string sweep_text(const SweepTable& table) {
  std::vector<std::vector<std::string>> rows = {
      {"variant", "nu_w", "nu_r", "write", "read", "val", "test", "seeds", "note"}};
  for (const auto& r : table.rows) {
    const auto side = [](const std::vector<ConvLayerSpec>& l) { return l.empty() ? std::string("-") : format_layers(l); };
    rows.push_back({std::string(to_string(r.variant)), std::to_string(r.structure.write.size()),
                    std::to_string(r.structure.read.size()), side(r.structure.write), side(r.structure.read),
                    fixed(r.val_mean, 4) + " +- " + fixed(r.val_sd, 4), fixed(r.test_mean, 4) + " +- " + fixed(r.test_sd, 4),
                    std::to_string(r.val_accuracy.size()), r.error.empty() ? "" : "failed: " + r.error});
  }
  return aligned_table(rows, {false, true, true, false, false, true, true, true, false});
}

// ---------------------------------------------------------------------------
// Attention

std::vector<StepSpan> receptive_fields(std::size_t steps, std::span<const ConvLayerSpec> layers,
                                       bool padding_correction) {
  if (steps == 0) return {};
  std::vector<std::size_t> extent = {steps};
  for (const auto& l : layers) extent.push_back(same_output_extent(extent.back(), l.stride));
  std::vector<StepSpan> out;
  out.reserve(extent.back());
  for (std::size_t slot = 0; slot < extent.back(); ++slot) {
    auto lo = static_cast<std::ptrdiff_t>(slot);
    auto hi = lo;
    for (std::size_t k = layers.size(); k-- > 0;) {
      const auto& l = layers[k];
      const auto in = static_cast<std::ptrdiff_t>(extent[k]);
      const auto s = static_cast<std::ptrdiff_t>(l.stride);
      const auto pad =
          padding_correction ? static_cast<std::ptrdiff_t>(same_padding_before(extent[k], l.height, l.stride)) : 0;
      lo = std::clamp<std::ptrdiff_t>(lo * s - pad, 0, in - 1);
      hi = std::clamp<std::ptrdiff_t>(hi * s - pad + static_cast<std::ptrdiff_t>(l.height) - 1, 0, in - 1);
    }
    out.push_back({static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)});
  }
  return out;
}

std::vector<StepSpan> attention_receptive_fields(const RwmnConfig& config, std::size_t steps) {
  std::vector<ConvLayerSpec> layers = config.active_write_layers();
  const auto read = config.active_read_layers();
  layers.insert(layers.end(), read.begin(), read.end());
  return receptive_fields(steps, layers);
}

AttentionRecord attention_record(const RwmnModel& model, const StorySource& story, const QAItem& item) {
  const Prediction p = predict(model, story, item);
  AttentionRecord r;
  r.story_id = story.id;
  r.question = item.question;
  r.answers = item.answers;
  r.attention = p.attention;
  r.slots = p.slots;
  r.channels = p.channels;
  r.slot_steps = attention_receptive_fields(model.config(), story.size());
  r.gt_span = item.gt_span;
  r.predicted = p.y;
  r.correct = item.correct;
  r.argmax_slot = argmax(p.attention) / p.channels;
  return r;
}

std::string attention_json(const AttentionRecord& r) {
  Json answers = Json::array();
  for (const auto& a : r.answers) answers.push_back(join_tokens(a));
  Json grid = Json::array();
  for (std::size_t i = 0; i < r.slots; ++i) {
    grid.push_back(std::vector<double>(r.attention.begin() + static_cast<std::ptrdiff_t>(i * r.channels),
                                       r.attention.begin() + static_cast<std::ptrdiff_t>((i + 1) * r.channels)));
  }
  Json steps = Json::array();
  for (const auto& s : r.slot_steps) steps.push_back(span_json(s));
  return Json{{"story_id", r.story_id},
              {"question", join_tokens(r.question)},
              {"answers", std::move(answers)},
              {"slots", r.slots},
              {"channels", r.channels},
              {"attention", std::move(grid)},
              {"slot_steps", std::move(steps)},
              {"gt_span", r.gt_span ? span_json(*r.gt_span) : Json(nullptr)},
              {"predicted", r.predicted},
              {"correct", r.correct},
              {"argmax_slot", r.argmax_slot}}
      .dump();
}

void export_attention(const RwmnModel& model, const StorySource& story, const QAItem& item,
                      const std::filesystem::path& path) {
  write_text_file(path, attention_json(attention_record(model, story, item)) + '\n');
}

void export_attention(const RwmnModel& model, const Dataset& data, const std::filesystem::path& path,
                      std::size_t limit) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  const std::size_t n = std::min(limit, data.size());
  for (std::size_t i = 0; i < n; ++i) {
    const QAItem& item = data.items()[i];
    out << attention_json(attention_record(model, data.story_for(item), item)) << '\n';
  }
  if (!out) throw InputError("failed writing " + path.string());
}

}  // namespace rwmn
