#include "rwmn/memnet.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>

#include "rwmn/error.hpp"
#include "rwmn/rng.hpp"

namespace rwmn {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_size(std::string_view field, std::string_view context) {
  std::size_t value = 0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc{} || ptr != end || field.empty()) {
    throw ConfigError("invalid layer field '" + std::string(field) + "' in '" + std::string(context) + "'");
  }
  return value;
}

Tensor apply_convs(Tape& tape, Tensor x, const std::vector<ConvParams>& convs,
                   std::span<const ConvLayerSpec> specs) {
  for (std::size_t l = 0; l < convs.size(); ++l) {
    x = relu(tape, conv2d_same(tape, x, convs[l].filter, convs[l].bias, Stride{specs[l].stride, 1}));
  }
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::kFull: return "full";
    case Variant::kNoRW: return "noRW";
    case Variant::kNoR: return "noR";
    case Variant::kNoQ: return "noQ";
    case Variant::kNoVid: return "noVid";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  const std::string n = lower(trim(name));
  for (Variant v : {Variant::kFull, Variant::kNoRW, Variant::kNoR, Variant::kNoQ, Variant::kNoVid}) {
    if (lower(to_string(v)) == n) return v;
  }
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

std::vector<ConvLayerSpec> parse_layers(std::string_view text) {
  std::vector<ConvLayerSpec> layers;
  const std::string all = trim(text);
  if (all.empty() || lower(all) == "none") return layers;
  std::size_t pos = 0;
  while (pos <= all.size()) {
    const std::size_t comma = std::min(all.find(',', pos), all.size());
    const std::string item = trim(std::string_view(all).substr(pos, comma - pos));
    const std::size_t c1 = item.find(':');
    const std::size_t c2 = c1 == std::string::npos ? std::string::npos : item.find(':', c1 + 1);
    if (c2 == std::string::npos || item.find(':', c2 + 1) != std::string::npos) {
      throw ConfigError("layer '" + item + "' is not height:stride:channels");
    }
    const std::string_view v(item);
    layers.push_back({parse_size(v.substr(0, c1), item), parse_size(v.substr(c1 + 1, c2 - c1 - 1), item),
                      parse_size(v.substr(c2 + 1), item)});
    pos = comma + 1;
  }
  return layers;
}

std::string format_layers(std::span<const ConvLayerSpec> layers) {
  if (layers.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(layers[i].height) + ':' + std::to_string(layers[i].stride) + ':' +
           std::to_string(layers[i].channels);
  }
  return out;
}

std::size_t memory_extent(std::size_t steps, std::span<const ConvLayerSpec> layers) {
  for (const auto& l : layers) steps = same_output_extent(steps, l.stride);
  return steps;
}

void RwmnConfig::validate() const {
  if (d == 0) throw ConfigError("d must be positive");
  fusion.validate();
  for (const auto* layers : {&write_layers, &read_layers}) {
    for (const auto& l : *layers) {
      if (l.height == 0 || l.stride == 0 || l.channels == 0) {
        throw ConfigError("conv layer " + format_layers(std::span(&l, 1)) + " has a zero field");
      }
    }
  }
  if (!std::isfinite(alpha_init_raw)) throw ConfigError("alpha_init_raw must be finite");
  if (precision != Precision::kFloat32 && precision != Precision::kFloat64) {
    throw ConfigError("precision must be 32 or 64");
  }
}

std::vector<ConvLayerSpec> RwmnConfig::active_write_layers() const {
  return uses_write() ? write_layers : std::vector<ConvLayerSpec>{};
}

std::vector<ConvLayerSpec> RwmnConfig::active_read_layers() const {
  return uses_read() ? read_layers : std::vector<ConvLayerSpec>{};
}

std::string RwmnConfig::canonical() const {
  std::ostringstream out;
  out.precision(17);
  out << "d=" << d << ";cbp_dim=" << fusion.cbp_dim << ";word_dim=" << fusion.word_dim
      << ";visual_channels=" << fusion.visual.channels << ";grid_cells=" << fusion.visual.grid_cells
      << ";frame_pooling=" << (fusion.frame_pooling == FramePooling::kMean ? "mean" : "sum")
      << ";sketch_seed=" << fusion.sketch_seed << ";embedding_seed=" << fusion.embedding_seed
      << ";embedding_scale=" << fusion.embedding_scale << ";trainable_embedding=" << fusion.trainable_embedding
      << ";write=" << format_layers(write_layers) << ";read=" << format_layers(read_layers)
      << ";variant=" << to_string(variant) << ";alpha_init_raw=" << alpha_init_raw
      << ";attention=" << (attention == AttentionNorm::kJoint ? "joint" : "per_channel");
  return out.str();
}

std::uint64_t RwmnConfig::digest() const { return fnv1a64(canonical()); }

// ---------------------------------------------------------------------------
// Parameters

RwmnParams RwmnParams::allocate(const RwmnConfig& config) {
  config.validate();
  const std::size_t d = config.d;
  RwmnParams p;
  p.w_c = Tensor({config.fusion.cbp_dim, d}, true);
  p.b_c = Tensor({d}, true);
  std::size_t channels = 1;
  for (const auto& l : config.active_write_layers()) {
    p.write.push_back({Tensor({l.height, d, channels, l.channels}, true), Tensor({l.channels}, true)});
    channels = l.channels;
  }
  for (const auto& l : config.active_read_layers()) {
    p.read.push_back({Tensor({l.height, d, channels, l.channels}, true), Tensor({l.channels}, true)});
    channels = l.channels;
  }
  p.w_q = Tensor({d, config.fusion.word_dim}, true);
  p.b_q = Tensor({d}, true);
  p.alpha_raw = Tensor::scalar(config.alpha_init_raw, true);
  return p;
}

std::vector<std::pair<std::string, Tensor>> RwmnParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("w_c", w_c);
  out.emplace_back("b_c", b_c);
  for (std::size_t i = 0; i < write.size(); ++i) {
    out.emplace_back("write." + std::to_string(i) + ".filter", write[i].filter);
    out.emplace_back("write." + std::to_string(i) + ".bias", write[i].bias);
  }
  for (std::size_t i = 0; i < read.size(); ++i) {
    out.emplace_back("read." + std::to_string(i) + ".filter", read[i].filter);
    out.emplace_back("read." + std::to_string(i) + ".bias", read[i].bias);
  }
  out.emplace_back("w_q", w_q);
  out.emplace_back("b_q", b_q);
  out.emplace_back("alpha_raw", alpha_raw);
  return out;
}

RwmnParams RwmnParams::clone() const {
  RwmnParams p;
  p.w_c = w_c.clone();
  p.b_c = b_c.clone();
  for (const auto& c : write) p.write.push_back({c.filter.clone(), c.bias.clone()});
  for (const auto& c : read) p.read.push_back({c.filter.clone(), c.bias.clone()});
  p.w_q = w_q.clone();
  p.b_q = b_q.clone();
  p.alpha_raw = alpha_raw.clone();
  return p;
}

// ---------------------------------------------------------------------------
// Model

RwmnModel::RwmnModel(RwmnConfig config, FusionEncoder encoder, Vocabulary vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)), encoder_(std::move(encoder)) {
  config_.validate();
  if (encoder_.config().cbp_dim != config_.fusion.cbp_dim || encoder_.config().word_dim != config_.fusion.word_dim) {
    throw ConfigError("encoder dimensions disagree with the model config");
  }
  params_ = RwmnParams::allocate(config_);
  memory_sketch_ = CountSketch(config_.d, config_.d, derive_seed(config_.fusion.sketch_seed, 4));
  query_sketch_ = CountSketch(config_.d, config_.d, derive_seed(config_.fusion.sketch_seed, 5));
}

RwmnModel RwmnModel::create(const RwmnConfig& config, const Vocabulary& vocab) {
  config.validate();
  return RwmnModel(config, FusionEncoder::create(config.fusion, vocab), vocab);
}

std::vector<std::pair<std::string, Tensor>> RwmnModel::trainable() const {
  auto out = params_.named();
  if (encoder_.table().trainable()) out.emplace_back("embedding", encoder_.table().matrix());
  return out;
}

void RwmnModel::zero_grad() {
  for (auto& [name, t] : trainable()) t.zero_grad();
}

RwmnModel RwmnModel::clone() const {
  RwmnModel m = *this;
  m.params_ = params_.clone();
  const EmbeddingTable& table = encoder_.table();
  m.encoder_.table() = EmbeddingTable(table.matrix().clone(), table.trainable());
  return m;
}

EmbeddingMode RwmnModel::embedding_mode(const StorySource& story) const {
  return config_.uses_video() && story.has_video() ? EmbeddingMode::kMultimodal : EmbeddingMode::kText;
}

// ---------------------------------------------------------------------------
// Inputs

ItemInputs encode_item(Tape& tape, const RwmnModel& model, const StorySource& story, const QAItem& item) {
  const FusionEncoder& enc = model.encoder();
  ItemInputs in;
  in.movie = enc.build_movie_embedding(tape, story, model.embedding_mode(story)).matrix;
  in.question = enc.embed_tokens(tape, item.question, model.vocab());
  std::vector<Tensor> answers;
  answers.reserve(kAnswerCount);
  for (const auto& a : item.answers) answers.push_back(enc.embed_tokens(tape, a, model.vocab()));
  in.answers = stack_rows(tape, answers);
  return in;
}

EncodedDataset::EncodedDataset(const RwmnModel& model, const Dataset& dataset)
    : model_(&model), dataset_(&dataset), cached_(!model.encoder().table().trainable()) {
  if (!cached_) return;
  Tape tape(model.config().precision, false);
  const FusionEncoder& enc = model.encoder();
  items_.reserve(dataset.size());
  for (const QAItem& item : dataset.items()) {
    auto it = movies_.find(item.story_id);
    if (it == movies_.end()) {
      const StorySource& story = dataset.story(item.story_id);
      it = movies_.emplace(item.story_id, enc.build_movie_embedding(tape, story, model.embedding_mode(story)).matrix)
               .first;
    }
    ItemInputs in;
    in.movie = it->second;
    in.question = enc.embed_tokens(tape, item.question, model.vocab());
    std::vector<Tensor> answers;
    for (const auto& a : item.answers) answers.push_back(enc.embed_tokens(tape, a, model.vocab()));
    in.answers = stack_rows(tape, answers);
    items_.push_back(std::move(in));
  }
}

ItemInputs EncodedDataset::inputs(Tape& tape, std::size_t index) const {
  if (index >= dataset_->size()) throw UsageError("item index out of range");
  if (cached_) return items_[index];
  const QAItem& item = dataset_->items()[index];
  return encode_item(tape, *model_, dataset_->story_for(item), item);
}

// ---------------------------------------------------------------------------
// Pipeline

Tensor write_memory(Tape& tape, const Tensor& movie, const RwmnParams& params, const RwmnConfig& config) {
  if (movie.rank() != 2 || movie.extent(0) == 0) {
    throw InputError("write_memory needs a non-empty n x D movie embedding, got " + to_string(movie.shape()));
  }
  const std::size_t n = movie.extent(0);
  const Tensor projected = add_bias(tape, matmul(tape, movie, params.w_c), params.b_c);
  const Tensor x = reshape(tape, projected, {n, config.d, 1});
  return apply_convs(tape, x, params.write, config.active_write_layers());
}

Tensor embed_question(Tape& tape, const Tensor& sentence, const RwmnParams& params) {
  const std::size_t w = sentence.size();
  const Tensor col = matmul(tape, params.w_q, reshape(tape, sentence, {w, 1}));
  return add(tape, reshape(tape, col, {params.w_q.extent(0)}), params.b_q);
}

Tensor query_dependent_memory(Tape& tape, const Tensor& memory, const Tensor& u, const CountSketch& memory_sketch,
                              const CountSketch& query_sketch) {
  const std::size_t d = memory.extent(1);
  if (memory_sketch.output_dim() != d || query_sketch.output_dim() != d) {
    throw ConfigError("query sketch dimension must equal d = " + std::to_string(d));
  }
  const Tensor rows = swap_last_axes(tape, memory);  // m x C x d
  const Tensor sketched = circular_convolution(tape, count_sketch(tape, rows, memory_sketch),
                                               count_sketch(tape, u, query_sketch));
  return swap_last_axes(tape, sketched);
}

Tensor read_memory(Tape& tape, const Tensor& query_memory, const RwmnParams& params, const RwmnConfig& config) {
  return apply_convs(tape, query_memory, params.read, config.active_read_layers());
}

Tensor attend(Tape& tape, const Tensor& read_memory, const Tensor& u, AttentionNorm norm) {
  const std::size_t c = read_memory.extent(0), d = read_memory.extent(1), ch = read_memory.extent(2);
  const Tensor cols = reshape(tape, swap_last_axes(tape, read_memory), {c * ch, d});
  const Tensor scores = reshape(tape, matmul(tape, cols, reshape(tape, u, {d, 1})), {c, ch});
  if (norm == AttentionNorm::kJoint) return softmax(tape, scores, SoftmaxAxis::kAll);
  const Tensor per_channel = softmax(tape, transpose(tape, scores), SoftmaxAxis::kLast);
  return scale(tape, transpose(tape, per_channel), 1.0 / static_cast<double>(ch));
}

Tensor output_vector(Tape& tape, const Tensor& read_memory, const Tensor& p) {
  const std::size_t c = read_memory.extent(0), d = read_memory.extent(1), ch = read_memory.extent(2);
  if (p.size() != c * ch) throw DimensionError("attention size does not match read memory");
  const Tensor cols = reshape(tape, swap_last_axes(tape, read_memory), {c * ch, d});
  return reshape(tape, matmul(tape, reshape(tape, p, {1, c * ch}), cols), {d});
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw InputError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

AnswerSet score_answers(Tape& tape, const Tensor& o, const Tensor& u, const Tensor& answers,
                        const RwmnParams& params) {
  if (answers.rank() != 2 || answers.extent(0) != kAnswerCount) {
    throw InputError("score_answers needs exactly " + std::to_string(kAnswerCount) + " candidates, got " +
                     to_string(answers.shape()));
  }
  const std::size_t d = params.w_q.extent(0);
  AnswerSet out;
  out.g = add_bias(tape, matmul(tape, answers, transpose(tape, params.w_q)), params.b_q);
  const Tensor alpha = sigmoid(tape, params.alpha_raw);
  const Tensor rest = sub(tape, Tensor::scalar(1.0), alpha);
  const Tensor blend = add(tape, mul(tape, o, alpha), mul(tape, u, rest));
  const Tensor logits = reshape(tape, matmul(tape, out.g, reshape(tape, blend, {d, 1})), {kAnswerCount});
  out.z = softmax(tape, logits, SoftmaxAxis::kAll);
  out.y = argmax(out.z.values());
  return out;
}

ForwardResult forward(Tape& tape, const RwmnModel& model, const ItemInputs& inputs) {
  const RwmnConfig& config = model.config();
  const RwmnParams& params = model.params();
  ForwardResult r;
  r.memory = write_memory(tape, inputs.movie, params, config);
  r.question = embed_question(tape, inputs.question, params);
  r.query_memory = config.uses_query_cbp()
                       ? query_dependent_memory(tape, r.memory, r.question, model.memory_sketch(), model.query_sketch())
                       : r.memory;
  r.read_memory = read_memory(tape, r.query_memory, params, config);
  r.attention = attend(tape, r.read_memory, r.question, config.attention);
  r.output = output_vector(tape, r.read_memory, r.attention);
  r.answers = score_answers(tape, r.output, r.question, inputs.answers, params);
  return r;
}

Tensor answer_loss(Tape& tape, const ForwardResult& result, std::size_t correct) {
  if (correct >= kAnswerCount) throw InputError("correct index out of range");
  return scale(tape, log(tape, pick(tape, result.answers.z, correct)), -1.0);
}

Prediction predict(const RwmnModel& model, const ItemInputs& inputs) {
  Tape tape(model.config().precision, false);
  const ForwardResult r = forward(tape, model, inputs);
  Prediction p;
  p.y = r.answers.y;
  const auto z = r.answers.z.values();
  p.z.assign(z.begin(), z.end());
  const auto a = r.attention.values();
  p.attention.assign(a.begin(), a.end());
  p.slots = r.attention.extent(0);
  p.channels = r.attention.extent(1);
  return p;
}

Prediction predict(const RwmnModel& model, const StorySource& story, const QAItem& item) {
  Tape tape(model.config().precision, false);
  return predict(model, encode_item(tape, model, story, item));
}

}  // namespace rwmn
