#pragma once

// Text/visual feature embedding and Compact Bilinear Pooling.
//
// cbp(x, y) = IFFT(FFT(cs_1(x)) * FFT(cs_2(y))), i.e. the circular
// convolution of two count sketches, which is a sketch of the outer product
// x y^T. It is what fuses each (subshot, sentence) pair into one row of the
// movie embedding matrix and what makes memory cells query dependent.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rwmn/data.hpp"
#include "rwmn/tensor.hpp"

namespace rwmn {

// Random signed hashing from R^p to R^D, fixed by (p, D, seed).
class CountSketch {
 public:
  CountSketch() = default;
  CountSketch(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed);
  // Explicit maps; sign entries must be +1 or -1.
  CountSketch(std::size_t output_dim, std::vector<std::uint32_t> index, std::vector<std::int8_t> sign);

  std::size_t input_dim() const noexcept { return index_.size(); }
  std::size_t output_dim() const noexcept { return output_dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::span<const std::uint32_t> index() const noexcept { return index_; }
  std::span<const std::int8_t> sign() const noexcept { return sign_; }

  std::vector<double> apply(std::span<const double> x) const;

 private:
  std::size_t output_dim_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<std::uint32_t> index_;
  std::vector<std::int8_t> sign_;
};

// Sketches every row of x (last axis p) to length D.
Tensor count_sketch(Tape& tape, const Tensor& x, const CountSketch& sketch);

// Row-wise circular convolution along the last axis. `b` either has the
// shape of `a` or is a single vector of the row length, shared by all rows.
Tensor circular_convolution(Tape& tape, const Tensor& a, const Tensor& b);

// Compact bilinear pooling of matching rows of x and y (or every row of x
// with a single vector y). Both sketches must share the output dimension.
Tensor cbp(Tape& tape, const Tensor& x, const Tensor& y, const CountSketch& sx, const CountSketch& sy);
std::vector<double> cbp(std::span<const double> x, std::span<const double> y, const CountSketch& sx,
                        const CountSketch& sy);

// l[j][k] = (1 - j/J) - (k/d)(1 - 2j/J) with 1-based j, k; shape J x d.
Tensor position_weights(std::size_t sentence_length, std::size_t dim);
// sum_j l_j * w_j over the rows of a J x d word matrix.
Tensor position_encode(Tape& tape, const Tensor& words);

// V x d_w word vectors. Row 0 serves unknown tokens.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(Tensor matrix, bool trainable);

  // Frozen rows drawn uniformly from [-scale, scale] by hashing each token
  // string with `seed`; independent of token ids.
  static EmbeddingTable hashed(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed, double scale);

  std::size_t vocab_size() const { return matrix_.extent(0); }
  std::size_t dim() const { return matrix_.extent(1); }
  bool trainable() const noexcept { return trainable_; }
  const Tensor& matrix() const noexcept { return matrix_; }
  Tensor& matrix() noexcept { return matrix_; }

  std::size_t row_for(std::uint32_t token_id) const noexcept {
    return token_id < vocab_size() ? token_id : Vocabulary::kUnknownId;
  }

 private:
  Tensor matrix_;
  bool trainable_ = false;
};

// Position-encoded sentence vector of length d_w. Empty input is an InputError.
Tensor embed_sentence(Tape& tape, std::span<const std::uint32_t> tokens, const EmbeddingTable& table);

enum class FramePooling : std::uint8_t { kMean, kSum };

struct VisualLayout {
  std::size_t channels = 2048;
  // 1 for pooled vectors, 49 for 7x7 (row, col, channel) maps.
  std::size_t grid_cells = 1;

  std::size_t frame_size() const noexcept { return channels * grid_cells; }
};

// Pools frames (each layout.frame_size() values) over time, then averages
// the spatial grid, giving one vector of layout.channels values.
std::vector<double> embed_subshot(std::span<const std::vector<float>> frames, VisualLayout layout,
                                  FramePooling pooling = FramePooling::kMean);

enum class EmbeddingMode : std::uint8_t { kText, kMultimodal };

struct FusionConfig {
  std::size_t cbp_dim = 4096;
  std::size_t word_dim = 300;
  VisualLayout visual{};
  FramePooling frame_pooling = FramePooling::kMean;
  std::uint64_t sketch_seed = 1;
  std::uint64_t embedding_seed = 7;
  double embedding_scale = 1.0;
  bool trainable_embedding = false;

  void validate() const;
};

struct MovieEmbedding {
  Tensor matrix;  // n x cbp_dim
  std::size_t steps = 0;
  EmbeddingMode modality = EmbeddingMode::kText;
};

// Owns the word table and the sketches used to build movie embeddings.
class FusionEncoder {
 public:
  FusionEncoder() = default;
  FusionEncoder(FusionConfig config, EmbeddingTable table);
  // Starts from the hashed table; when config.trainable_embedding is set the
  // table is marked trainable (model initialization re-draws it).
  static FusionEncoder create(const FusionConfig& config, const Vocabulary& vocab);

  const FusionConfig& config() const noexcept { return config_; }
  const EmbeddingTable& table() const noexcept { return table_; }
  EmbeddingTable& table() noexcept { return table_; }
  const CountSketch& visual_sketch() const noexcept { return visual_sketch_; }
  const CountSketch& text_sketch() const noexcept { return text_sketch_; }
  // Used for text-only rows when cbp_dim < word_dim.
  const CountSketch& text_projection() const noexcept { return text_projection_; }

  Tensor embed_sentence(Tape& tape, std::span<const std::uint32_t> tokens) const;
  Tensor embed_tokens(Tape& tape, std::span<const std::string> tokens, const Vocabulary& vocab) const;

  // Text-only rows are the sentence vector zero-padded to cbp_dim (or count
  // sketched down when cbp_dim < word_dim). Multimodal mode requires video.
  MovieEmbedding build_movie_embedding(Tape& tape, const StorySource& story, EmbeddingMode mode) const;

 private:
  FusionConfig config_;
  EmbeddingTable table_;
  CountSketch visual_sketch_;
  CountSketch text_sketch_;
  CountSketch text_projection_;
};

}  // namespace rwmn
