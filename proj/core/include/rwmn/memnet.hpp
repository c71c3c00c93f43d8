#pragma once

// The read-write memory network: write convolutions over the movie
// embedding, a question-conditioned memory, read convolutions, attention and
// answer scoring, plus the ablation variants.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rwmn/data.hpp"
#include "rwmn/fusion.hpp"
#include "rwmn/tensor.hpp"

namespace rwmn {

enum class Variant : std::uint8_t { kFull, kNoRW, kNoR, kNoQ, kNoVid };

std::string_view to_string(Variant variant);
// Accepts "full", "noRW", "noR", "noQ", "noVid" (case-insensitive).
Variant parse_variant(std::string_view name);

// kPerChannel normalizes over slots within each channel and divides by the
// channel count, so p still sums to one.
enum class AttentionNorm : std::uint8_t { kJoint, kPerChannel };

struct ConvLayerSpec {
  std::size_t height = 1;
  std::size_t stride = 1;
  std::size_t channels = 1;

  bool operator==(const ConvLayerSpec&) const = default;
};

// "40:30:3,10:5:3" <-> layer list; "" or "none" is the empty list.
std::vector<ConvLayerSpec> parse_layers(std::string_view text);
std::string format_layers(std::span<const ConvLayerSpec> layers);

// Slot count after a conv stack: ceil(in / s) per layer.
std::size_t memory_extent(std::size_t steps, std::span<const ConvLayerSpec> layers);

struct RwmnConfig {
  std::size_t d = 300;
  FusionConfig fusion{};
  std::vector<ConvLayerSpec> write_layers{{40, 30, 3}};
  std::vector<ConvLayerSpec> read_layers{{3, 1, 3}};
  Variant variant = Variant::kFull;
  double alpha_init_raw = 0.0;
  AttentionNorm attention = AttentionNorm::kJoint;
  Precision precision = Precision::kFloat64;

  void validate() const;

  bool uses_write() const noexcept { return variant != Variant::kNoRW; }
  bool uses_read() const noexcept { return variant != Variant::kNoRW && variant != Variant::kNoR; }
  bool uses_query_cbp() const noexcept { return variant != Variant::kNoQ; }
  bool uses_video() const noexcept { return variant != Variant::kNoVid; }

  // Layers actually applied under the variant.
  std::vector<ConvLayerSpec> active_write_layers() const;
  std::vector<ConvLayerSpec> active_read_layers() const;

  // Stable text form of every field that affects parameters or outputs.
  std::string canonical() const;
  std::uint64_t digest() const;
};

struct ConvParams {
  Tensor filter;  // f_v x d x C_in x C_out
  Tensor bias;    // C_out
};

struct RwmnParams {
  Tensor w_c;  // D_cbp x d
  Tensor b_c;  // d
  std::vector<ConvParams> write;
  std::vector<ConvParams> read;
  Tensor w_q;        // d x d_w, shared by question and answers
  Tensor b_q;        // d
  Tensor alpha_raw;  // scalar; alpha = sigmoid(alpha_raw)

  // Zero-filled, requires_grad tensors shaped for `config`; only what the
  // variant uses is allocated.
  static RwmnParams allocate(const RwmnConfig& config);

  // Named views in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  RwmnParams clone() const;
};

// Config, parameters, and the fixed (non-trainable) encoder state.
class RwmnModel {
 public:
  RwmnModel() = default;
  RwmnModel(RwmnConfig config, FusionEncoder encoder, Vocabulary vocab);
  // Encoder from FusionEncoder::create; zero parameters.
  static RwmnModel create(const RwmnConfig& config, const Vocabulary& vocab);

  const RwmnConfig& config() const noexcept { return config_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  const FusionEncoder& encoder() const noexcept { return encoder_; }
  FusionEncoder& encoder() noexcept { return encoder_; }
  RwmnParams& params() noexcept { return params_; }
  const RwmnParams& params() const noexcept { return params_; }
  const CountSketch& memory_sketch() const noexcept { return memory_sketch_; }
  const CountSketch& query_sketch() const noexcept { return query_sketch_; }

  // Trainable tensors: the parameters plus the word table when trainable.
  std::vector<std::pair<std::string, Tensor>> trainable() const;
  void zero_grad();

  // Deep copy; the clone shares no storage with this model.
  RwmnModel clone() const;

  EmbeddingMode embedding_mode(const StorySource& story) const;

 private:
  RwmnConfig config_;
  Vocabulary vocab_;
  FusionEncoder encoder_;
  RwmnParams params_;
  CountSketch memory_sketch_;
  CountSketch query_sketch_;
};

// Position-encoded inputs of one question.
struct ItemInputs {
  Tensor movie;     // n x D_cbp
  Tensor question;  // d_w
  Tensor answers;   // 5 x d_w
};

ItemInputs encode_item(Tape& tape, const RwmnModel& model, const StorySource& story, const QAItem& item);

// Encodes every item of a dataset once when the word table is frozen;
// otherwise re-encodes on each call so the table receives gradients.
class EncodedDataset {
 public:
  EncodedDataset(const RwmnModel& model, const Dataset& dataset);

  const Dataset& dataset() const noexcept { return *dataset_; }
  std::size_t size() const noexcept { return dataset_->size(); }
  ItemInputs inputs(Tape& tape, std::size_t index) const;

 private:
  const RwmnModel* model_;
  const Dataset* dataset_;
  bool cached_ = false;
  std::unordered_map<std::string, Tensor> movies_;
  std::vector<ItemInputs> items_;
};

// --- pipeline stages

// n x D_cbp -> m x d x C_w
Tensor write_memory(Tape& tape, const Tensor& movie, const RwmnParams& params, const RwmnConfig& config);
// d_w -> d
Tensor embed_question(Tape& tape, const Tensor& sentence, const RwmnParams& params);
// Per slot and channel: cbp(M[i, :, j], u) with output dimension d.
Tensor query_dependent_memory(Tape& tape, const Tensor& memory, const Tensor& u, const CountSketch& memory_sketch,
                              const CountSketch& query_sketch);
Tensor read_memory(Tape& tape, const Tensor& query_memory, const RwmnParams& params, const RwmnConfig& config);
// c x d x C -> c x C
Tensor attend(Tape& tape, const Tensor& read_memory, const Tensor& u, AttentionNorm norm = AttentionNorm::kJoint);
// o[i] = sum_j sum_k M_r[j, i, k] p[j, k]
Tensor output_vector(Tape& tape, const Tensor& read_memory, const Tensor& p);

struct AnswerSet {
  Tensor g;  // 5 x d
  Tensor z;  // 5
  std::size_t y = 0;
};

// answers: 5 x d_w position-encoded candidates.
AnswerSet score_answers(Tape& tape, const Tensor& o, const Tensor& u, const Tensor& answers,
                        const RwmnParams& params);

// Lowest index among maxima.
std::size_t argmax(std::span<const double> values);

struct ForwardResult {
  Tensor memory;        // M
  Tensor query_memory;  // M_q
  Tensor read_memory;   // M_r
  Tensor attention;     // p, c x C_r
  Tensor output;        // o
  Tensor question;      // u
  AnswerSet answers;
};

ForwardResult forward(Tape& tape, const RwmnModel& model, const ItemInputs& inputs);

// -log z[correct]
Tensor answer_loss(Tape& tape, const ForwardResult& result, std::size_t correct);

struct Prediction {
  std::size_t y = 0;
  std::vector<double> z;
  std::vector<double> attention;  // row-major c x C_r
  std::size_t slots = 0;          // c
  std::size_t channels = 0;       // C_r
};

// Inference on a non-recording tape at the model precision.
Prediction predict(const RwmnModel& model, const StorySource& story, const QAItem& item);
Prediction predict(const RwmnModel& model, const ItemInputs& inputs);

}  // namespace rwmn
