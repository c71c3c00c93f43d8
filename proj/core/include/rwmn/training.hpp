#pragma once

// Initialization, loss, Adagrad, the early-stopping training loop, random
// restarts, and bagging / seed ensembles.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "rwmn/data.hpp"
#include "rwmn/memnet.hpp"
#include "rwmn/rng.hpp"
#include "rwmn/tensor.hpp"

namespace rwmn {

struct TrainConfig {
  double learning_rate = 0.001;
  double adagrad_initial_accumulator = 0.1;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 200;
  std::size_t early_stop_patience = 10;
  std::size_t restarts = 12;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Uniform on +-sqrt(6 / (fan_in + fan_out)). Rank 2 (a, b): fans a and b.
// Rank 4 conv filters (f_v, f_h, C_in, C_out): fans C_in and C_out times
// the receptive-field area. Rank 1 and 3 use the first and last extents
// (times the middle extent for rank 3).
Tensor xavier_init(const Shape& shape, Rng& rng, bool requires_grad = true);
double xavier_bound(const Shape& shape);

// Xavier for matrices, filters and a trainable word table; zero biases;
// alpha_raw from the config.
void initialize_params(RwmnModel& model, Rng& rng);
// Same, with the init stream derived from `seed`.
void initialize_params(RwmnModel& model, std::uint64_t seed);

// -log z[correct]. In debug builds a z that does not sum to one throws.
Tensor cross_entropy(Tape& tape, const Tensor& z, std::size_t correct);

class AdagradState {
 public:
  AdagradState() = default;
  AdagradState(std::span<const Tensor> params, double initial_accumulator);

  std::size_t size() const noexcept { return accumulators_.size(); }
  std::span<const double> accumulator(std::size_t i) const { return accumulators_.at(i); }

  friend void adagrad_step(std::span<Tensor> params, AdagradState& state, double learning_rate);

 private:
  std::vector<std::vector<double>> accumulators_;
};

// G += g^2; theta -= lr * g / sqrt(G), using each parameter's grad().
void adagrad_step(std::span<Tensor> params, AdagradState& state, double learning_rate);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

enum class StopReason : std::uint8_t { kMaxEpochs, kEarlyStopping, kPerfectFit };

std::string_view to_string(StopReason reason);

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 before any epoch
  double best_val_loss = 0.0;
  StopReason stop = StopReason::kMaxEpochs;

  bool operator==(const TrainHistory&) const = default;
};

struct TrainResult {
  RwmnModel model;  // parameters of the best epoch
  TrainHistory history;
  std::uint64_t seed = 0;
};

struct TrainObserver {
  // One line of JSON per epoch: epoch, train_loss, val_loss, val_acc.
  std::ostream* metrics = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
  // Stop as soon as an epoch ends with 100% accuracy on the training set.
  bool stop_on_perfect_fit = false;
};

struct EvalSummary {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<Prediction> predictions;
};

EvalSummary evaluate(const RwmnModel& model, const EncodedDataset& data);
EvalSummary evaluate(const RwmnModel& model, const Dataset& data);

// Trains an initialized model. Shuffling uses a stream derived from
// config.rng_seed. Throws NumericError naming epoch and batch on a
// non-finite loss or gradient.
TrainResult train(RwmnModel model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                  const TrainObserver& observer = {});

// Run r (0-based) initializes and shuffles with seed rng_seed + r; returns
// the run with the lowest best validation loss (earliest on ties).
TrainResult train_with_restarts(const RwmnModel& base, const Dataset& train_set, const Dataset& val_set,
                                const TrainConfig& config, const TrainObserver& observer = {});

enum class EnsembleMode : std::uint8_t { kNone, kBag, kEnsemble };

std::string_view to_string(EnsembleMode mode);
EnsembleMode parse_ensemble_mode(std::string_view name);

// Bag: member k trains on a bootstrap resample drawn with a stream derived
// from rng_seed and k. Both modes: member k, restart r uses seed
// rng_seed + k * restarts + r.
std::vector<TrainResult> train_members(const RwmnModel& base, EnsembleMode mode, std::size_t members,
                                       const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                                       const TrainObserver& observer = {});

struct EnsemblePrediction {
  std::size_t y = 0;
  std::vector<double> z;
};

// Arithmetic mean of member confidence vectors; y = argmax.
EnsemblePrediction ensemble_predict(std::span<const Prediction> member_predictions);
EnsemblePrediction ensemble_predict(std::span<const RwmnModel> members, const StorySource& story,
                                    const QAItem& item);

}  // namespace rwmn
