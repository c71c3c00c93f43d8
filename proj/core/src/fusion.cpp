#include "rwmn/fusion.hpp"

#include <complex>
#include <random>
#include <utility>

#include "rwmn/error.hpp"
#include "rwmn/fft.hpp"
#include "rwmn/rng.hpp"

namespace rwmn {

// ---------------------------------------------------------------------------
// Count sketch

CountSketch::CountSketch(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed)
    : output_dim_(output_dim), seed_(seed) {
  if (input_dim == 0 || output_dim == 0) throw ParameterError("count sketch dimensions must be positive");
  Rng rng(seed);
  index_.resize(input_dim);
  sign_.resize(input_dim);
  for (std::size_t i = 0; i < input_dim; ++i) {
    index_[i] = static_cast<std::uint32_t>(rng() % output_dim);
    sign_[i] = (rng() >> 63) != 0 ? std::int8_t{1} : std::int8_t{-1};
  }
}

CountSketch::CountSketch(std::size_t output_dim, std::vector<std::uint32_t> index, std::vector<std::int8_t> sign)
    : output_dim_(output_dim), index_(std::move(index)), sign_(std::move(sign)) {
  if (output_dim == 0 || index_.empty() || index_.size() != sign_.size()) {
    throw ParameterError("count sketch maps must be non-empty and of equal length");
  }
  for (std::size_t i = 0; i < index_.size(); ++i) {
    if (index_[i] >= output_dim_) throw ParameterError("count sketch index out of range");
    if (sign_[i] != 1 && sign_[i] != -1) throw ParameterError("count sketch signs must be +1 or -1");
  }
}

std::vector<double> CountSketch::apply(std::span<const double> x) const {
  if (x.size() != input_dim()) {
    throw DimensionError("count sketch expects " + std::to_string(input_dim()) + " inputs, got " +
                         std::to_string(x.size()));
  }
  std::vector<double> out(output_dim_, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[index_[i]] += sign_[i] * x[i];
  return out;
}

// The sketch must outlive any backward pass over the returned tensor.
Tensor count_sketch(Tape& tape, const Tensor& x, const CountSketch& sketch) {
  const std::size_t p = sketch.input_dim();
  if (x.rank() == 0 || x.extent(x.rank() - 1) != p) {
    throw DimensionError("count_sketch expects last axis " + std::to_string(p) + ", got " +
                         to_string(x.shape()));
  }
  const std::size_t d = sketch.output_dim();
  const std::size_t rows = x.size() / p;
  Shape shape = x.shape();
  shape.back() = d;
  const auto xv = x.values();
  const auto index = sketch.index();
  const auto sign = sketch.sign();
  std::vector<double> out(rows * d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < p; ++i) out[r * d + index[i]] += sign[i] * xv[r * p + i];
  return tape.emit("count_sketch", std::move(shape), std::move(out), {x},
                   [x, &sketch, rows, p, d](std::span<const double> g) {
                     if (!x.requires_grad()) return;
                     Tensor xt = x;
                     auto gx = xt.mutable_grad();
                     const auto index = sketch.index();
                     const auto sign = sketch.sign();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t i = 0; i < p; ++i) gx[r * p + i] += sign[i] * g[r * d + index[i]];
                   });
}

// ---------------------------------------------------------------------------
// Circular convolution

namespace {

using Spectrum = std::vector<std::complex<double>>;

Spectrum spectrum(std::span<const double> x) {
  Spectrum s(x.begin(), x.end());
  fft::transform(s, false);
  return s;
}

// IFFT(fa .* op(fb)) where op conjugates when `conjugate`.
void inverse_product(const Spectrum& fa, const Spectrum& fb, bool conjugate, std::span<double> out,
                     bool accumulate) {
  Spectrum prod(fa.size());
  for (std::size_t i = 0; i < fa.size(); ++i) prod[i] = fa[i] * (conjugate ? std::conj(fb[i]) : fb[i]);
  fft::transform(prod, true);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (accumulate) {
      out[i] += prod[i].real();
    } else {
      out[i] = prod[i].real();
    }
  }
}

}  // namespace

Tensor circular_convolution(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() == 0) throw DimensionError("circular_convolution needs at least rank 1");
  const std::size_t d = a.extent(a.rank() - 1);
  const bool shared = b.shape() != a.shape();
  if (shared && !(b.size() == d && b.rank() == 1)) {
    throw DimensionError("circular_convolution: operand " + to_string(b.shape()) + " matches neither " +
                         to_string(a.shape()) + " nor its row length");
  }
  const std::size_t rows = a.size() / d;
  const bool use_fft = fft::is_power_of_two(d);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(a.size());

  auto a_row = [d](std::span<const double> v, std::size_t r) { return v.subspan(r * d, d); };
  auto b_row = [d, shared](std::span<const double> v, std::size_t r) {
    return shared ? v.subspan(0, d) : v.subspan(r * d, d);
  };

  if (use_fft) {
    Spectrum fb_shared;
    if (shared) fb_shared = spectrum(bv);
    for (std::size_t r = 0; r < rows; ++r) {
      const Spectrum fa = spectrum(a_row(av, r));
      const Spectrum fb = shared ? Spectrum{} : spectrum(b_row(bv, r));
      inverse_product(fa, shared ? fb_shared : fb, false, std::span<double>(out).subspan(r * d, d), false);
    }
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = fft::circular_convolve(a_row(av, r), b_row(bv, r));
      std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
  }

  return tape.emit(
      "circular_convolution", a.shape(), std::move(out), {a, b},
      [a, b, d, rows, shared, use_fft, a_row, b_row](std::span<const double> g) {
        const auto av = a.values();
        const auto bv = b.values();
        Tensor at = a;
        Tensor bt = b;
        std::span<double> ga = a.requires_grad() ? at.mutable_grad() : std::span<double>{};
        std::span<double> gb = b.requires_grad() ? bt.mutable_grad() : std::span<double>{};
        Spectrum fb_shared;
        if (use_fft && shared) fb_shared = spectrum(bv);
        for (std::size_t r = 0; r < rows; ++r) {
          const auto g_row = g.subspan(r * d, d);
          if (use_fft) {
            const Spectrum fg = spectrum(g_row);
            if (!ga.empty()) {
              const Spectrum fb = shared ? Spectrum{} : spectrum(b_row(bv, r));
              inverse_product(fg, shared ? fb_shared : fb, true, ga.subspan(r * d, d), true);
            }
            if (!gb.empty()) {
              inverse_product(fg, spectrum(a_row(av, r)), true, shared ? gb.subspan(0, d) : gb.subspan(r * d, d),
                              true);
            }
          } else {
            if (!ga.empty()) {
              const auto c = fft::circular_correlate(g_row, b_row(bv, r));
              for (std::size_t i = 0; i < d; ++i) ga[r * d + i] += c[i];
            }
            if (!gb.empty()) {
              const auto c = fft::circular_correlate(g_row, a_row(av, r));
              auto dst = shared ? gb.subspan(0, d) : gb.subspan(r * d, d);
              for (std::size_t i = 0; i < d; ++i) dst[i] += c[i];
            }
          }
        }
      });
}

Tensor cbp(Tape& tape, const Tensor& x, const Tensor& y, const CountSketch& sx, const CountSketch& sy) {
  if (sx.output_dim() != sy.output_dim()) {
    throw DimensionError("cbp sketches disagree on output dimension: " + std::to_string(sx.output_dim()) +
                         " vs " + std::to_string(sy.output_dim()));
  }
  const Tensor a = count_sketch(tape, x, sx);
  const Tensor b = count_sketch(tape, y, sy);
  return circular_convolution(tape, a, b);
}

std::vector<double> cbp(std::span<const double> x, std::span<const double> y, const CountSketch& sx,
                        const CountSketch& sy) {
  if (sx.output_dim() != sy.output_dim()) {
    throw DimensionError("cbp sketches disagree on output dimension");
  }
  const auto a = sx.apply(x);
  const auto b = sy.apply(y);
  return fft::circular_convolve(a, b);
}

// ---------------------------------------------------------------------------
// Position encoding and sentences

Tensor position_weights(std::size_t sentence_length, std::size_t dim) {
  if (sentence_length == 0) throw InputError("position encoding of an empty sentence");
  const double jn = static_cast<double>(sentence_length);
  const double dn = static_cast<double>(dim);
  std::vector<double> w(sentence_length * dim);
  for (std::size_t j = 1; j <= sentence_length; ++j) {
    for (std::size_t k = 1; k <= dim; ++k) {
      const double jj = static_cast<double>(j);
      const double kk = static_cast<double>(k);
      w[(j - 1) * dim + (k - 1)] = (1.0 - jj / jn) - (kk / dn) * (1.0 - 2.0 * jj / jn);
    }
  }
  return Tensor({sentence_length, dim}, std::move(w));
}

Tensor position_encode(Tape& tape, const Tensor& words) {
  if (words.rank() != 2) throw DimensionError("position_encode expects J x d words, got " + to_string(words.shape()));
  const Tensor weights = position_weights(words.extent(0), words.extent(1));
  return sum_over_axis(tape, mul(tape, words, weights), 0);
}

EmbeddingTable::EmbeddingTable(Tensor matrix, bool trainable) : matrix_(std::move(matrix)), trainable_(trainable) {
  if (matrix_.rank() != 2) throw DimensionError("embedding table must be V x d");
  if (trainable_ != matrix_.requires_grad()) matrix_ = matrix_.clone(trainable_);
}

EmbeddingTable EmbeddingTable::hashed(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed, double scale) {
  std::vector<double> values(vocab.size() * dim);
  for (std::size_t t = 0; t < vocab.size(); ++t) {
    Rng rng(splitmix64(fnv1a64(vocab.token(static_cast<std::uint32_t>(t))) ^ seed));
    std::uniform_real_distribution<double> u(-scale, scale);
    for (std::size_t k = 0; k < dim; ++k) values[t * dim + k] = u(rng);
  }
  return EmbeddingTable(Tensor({vocab.size(), dim}, std::move(values)), false);
}

Tensor embed_sentence(Tape& tape, std::span<const std::uint32_t> tokens, const EmbeddingTable& table) {
  if (tokens.empty()) throw InputError("embed_sentence: empty token list");
  std::vector<std::size_t> rows;
  rows.reserve(tokens.size());
  for (std::uint32_t t : tokens) rows.push_back(table.row_for(t));
  return position_encode(tape, gather_rows(tape, table.matrix(), rows));
}

std::vector<double> embed_subshot(std::span<const std::vector<float>> frames, VisualLayout layout,
                                  FramePooling pooling) {
  if (frames.empty()) throw InputError("embed_subshot: no frames");
  const std::size_t size = layout.frame_size();
  std::vector<double> pooled(size, 0.0);
  for (const auto& f : frames) {
    if (f.size() != size) {
      throw DimensionError("embed_subshot: frame has " + std::to_string(f.size()) + " values, layout needs " +
                           std::to_string(size));
    }
    for (std::size_t i = 0; i < size; ++i) pooled[i] += f[i];
  }
  if (pooling == FramePooling::kMean) {
    for (double& v : pooled) v /= static_cast<double>(frames.size());
  }
  std::vector<double> out(layout.channels, 0.0);
  for (std::size_t cell = 0; cell < layout.grid_cells; ++cell)
    for (std::size_t c = 0; c < layout.channels; ++c) out[c] += pooled[cell * layout.channels + c];
  for (double& v : out) v /= static_cast<double>(layout.grid_cells);
  return out;
}

// ---------------------------------------------------------------------------
// Encoder

void FusionConfig::validate() const {
  if (cbp_dim == 0 || word_dim == 0 || visual.channels == 0 || visual.grid_cells == 0) {
    throw ConfigError("fusion dimensions must be positive");
  }
  if (!fft::is_power_of_two(cbp_dim)) {
    throw ConfigError("cbp_dim must be a power of two, got " + std::to_string(cbp_dim));
  }
  if (!(embedding_scale > 0.0)) throw ConfigError("embedding_scale must be positive");
}

FusionEncoder::FusionEncoder(FusionConfig config, EmbeddingTable table)
    : config_(std::move(config)), table_(std::move(table)) {
  config_.validate();
  if (table_.dim() != config_.word_dim) {
    throw ConfigError("embedding table dimension " + std::to_string(table_.dim()) + " != word_dim " +
                      std::to_string(config_.word_dim));
  }
  visual_sketch_ = CountSketch(config_.visual.channels, config_.cbp_dim, derive_seed(config_.sketch_seed, 1));
  text_sketch_ = CountSketch(config_.word_dim, config_.cbp_dim, derive_seed(config_.sketch_seed, 2));
  text_projection_ = CountSketch(config_.word_dim, config_.cbp_dim, derive_seed(config_.sketch_seed, 3));
}

FusionEncoder FusionEncoder::create(const FusionConfig& config, const Vocabulary& vocab) {
  EmbeddingTable table =
      EmbeddingTable::hashed(vocab, config.word_dim, config.embedding_seed, config.embedding_scale);
  if (config.trainable_embedding) table = EmbeddingTable(table.matrix(), true);
  return FusionEncoder(config, std::move(table));
}

Tensor FusionEncoder::embed_sentence(Tape& tape, std::span<const std::uint32_t> tokens) const {
  return rwmn::embed_sentence(tape, tokens, table_);
}

Tensor FusionEncoder::embed_tokens(Tape& tape, std::span<const std::string> tokens, const Vocabulary& vocab) const {
  const auto ids = vocab.encode(tokens);
  return embed_sentence(tape, ids);
}

namespace {

// Copies each row into the first columns of a wider zero row.
Tensor zero_pad_rows(Tape& tape, const Tensor& x, std::size_t width) {
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  const auto xv = x.values();
  std::vector<double> out(rows * width, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * width + c] = xv[r * cols + c];
  return tape.emit("zero_pad", {rows, width}, std::move(out), {x}, [x, rows, cols, width](std::span<const double> g) {
    if (!x.requires_grad()) return;
    Tensor xt = x;
    auto gx = xt.mutable_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * width + c];
  });
}

}  // namespace

MovieEmbedding FusionEncoder::build_movie_embedding(Tape& tape, const StorySource& story, EmbeddingMode mode) const {
  story.validate();
  if (mode == EmbeddingMode::kMultimodal) {
    if (!story.has_video()) {
      throw InputError("story '" + story.id + "' has no visual features for multimodal embedding");
    }
    if (story.visual_dim != config_.visual.frame_size()) {
      throw DimensionError("story '" + story.id + "' visual_dim " + std::to_string(story.visual_dim) +
                           " does not match layout size " + std::to_string(config_.visual.frame_size()));
    }
  }
  const std::size_t n = story.size();
  std::vector<Tensor> sentences;
  sentences.reserve(n);
  for (const StoryStep& step : story.steps) sentences.push_back(embed_sentence(tape, step.tokens));
  const Tensor text = stack_rows(tape, sentences);

  MovieEmbedding e;
  e.steps = n;
  e.modality = mode;
  if (mode == EmbeddingMode::kMultimodal) {
    std::vector<double> visual;
    visual.reserve(n * config_.visual.channels);
    for (const StoryStep& step : story.steps) {
      const auto v = embed_subshot(std::span<const std::vector<float>>(&step.visual, 1), config_.visual,
                                   config_.frame_pooling);
      visual.insert(visual.end(), v.begin(), v.end());
    }
    const Tensor visual_rows({n, config_.visual.channels}, std::move(visual));
    e.matrix = cbp(tape, visual_rows, text, visual_sketch_, text_sketch_);
  } else if (config_.cbp_dim >= config_.word_dim) {
    e.matrix = zero_pad_rows(tape, text, config_.cbp_dim);
  } else {
    e.matrix = count_sketch(tape, text, text_projection_);
  }
  return e;
}

}  // namespace rwmn
