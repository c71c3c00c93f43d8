#include "rwmn/training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"

#include "rwmn/error.hpp"

namespace rwmn {

namespace {

constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kShuffleStream = 12;
constexpr std::uint64_t kBootstrapStream = 13;

std::pair<double, double> fans(const Shape& shape) {
  switch (shape.size()) {
    case 1: return {double(shape[0]), double(shape[0])};
    case 2: return {double(shape[0]), double(shape[1])};
    case 3: return {double(shape[0] * shape[1]), double(shape[1] * shape[2])};
    case 4: {
      const double area = double(shape[0] * shape[1]);
      return {area * double(shape[2]), area * double(shape[3])};
    }
    default: throw UsageError("xavier_init supports ranks 1 to 4, got shape " + to_string(shape));
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(adagrad_initial_accumulator > 0.0)) throw ConfigError("adagrad_initial_accumulator must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (early_stop_patience > max_epochs) throw ConfigError("early_stop_patience exceeds max_epochs");
  if (restarts == 0) throw ConfigError("restarts must be at least 1");
}

// ---------------------------------------------------------------------------
// Initialization and loss

double xavier_bound(const Shape& shape) {
  const auto [in, out] = fans(shape);
  return std::sqrt(6.0 / (in + out));
}

Tensor xavier_init(const Shape& shape, Rng& rng, bool requires_grad) {
  const double bound = xavier_bound(shape);
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> values(num_elements(shape));
  for (double& v : values) v = u(rng);
  return Tensor(shape, std::move(values), requires_grad);
}

void initialize_params(RwmnModel& model, Rng& rng) {
  auto fill = [&rng](Tensor& t) {
    const Tensor init = xavier_init(t.shape(), rng, false);
    std::ranges::copy(init.values(), t.mutable_values().begin());
  };
  auto zero = [](Tensor& t) { std::ranges::fill(t.mutable_values(), 0.0); };
  RwmnParams& p = model.params();
  fill(p.w_c);
  zero(p.b_c);
  for (auto& c : p.write) {
    fill(c.filter);
    zero(c.bias);
  }
  for (auto& c : p.read) {
    fill(c.filter);
    zero(c.bias);
  }
  fill(p.w_q);
  zero(p.b_q);
  p.alpha_raw.mutable_values()[0] = model.config().alpha_init_raw;
  if (model.encoder().table().trainable()) fill(model.encoder().table().matrix());
  model.zero_grad();
}

void initialize_params(RwmnModel& model, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kInitStream));
  initialize_params(model, rng);
}

Tensor cross_entropy(Tape& tape, const Tensor& z, std::size_t correct) {
#ifndef NDEBUG
  const auto v = z.values();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-6) throw UsageError("cross_entropy: z is not normalized");
#endif
  if (correct >= z.size()) throw InputError("cross_entropy: correct index out of range");
  return scale(tape, log(tape, pick(tape, z, correct)), -1.0);
}

// ---------------------------------------------------------------------------
// Adagrad

AdagradState::AdagradState(std::span<const Tensor> params, double initial_accumulator) {
  accumulators_.reserve(params.size());
  for (const Tensor& p : params) accumulators_.emplace_back(p.size(), initial_accumulator);
}

void adagrad_step(std::span<Tensor> params, AdagradState& state, double learning_rate) {
  if (params.size() != state.accumulators_.size()) throw DimensionError("adagrad: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& acc = state.accumulators_[i];
    if (acc.size() != params[i].size()) {
      throw DimensionError("adagrad: accumulator " + std::to_string(i) + " does not match " +
                           to_string(params[i].shape()));
    }
    const auto g = params[i].grad();
    auto theta = params[i].mutable_values();
    for (std::size_t k = 0; k < acc.size(); ++k) {
      acc[k] += g[k] * g[k];
      theta[k] -= learning_rate * g[k] / std::sqrt(acc[k]);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation and the training loop

std::string_view to_string(StopReason reason) {
  switch (reason) {
    case StopReason::kMaxEpochs: return "max_epochs";
    case StopReason::kEarlyStopping: return "early_stopping";
    case StopReason::kPerfectFit: return "perfect_fit";
  }
  return "unknown";
}

EvalSummary evaluate(const RwmnModel& model, const EncodedDataset& data) {
  EvalSummary s;
  if (data.size() == 0) return s;
  const auto& items = data.dataset().items();
  std::size_t correct = 0;
  s.predictions.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tape tape(model.config().precision, false);
    Prediction p = predict(model, data.inputs(tape, i));
    s.loss -= std::log(p.z[items[i].correct]);
    correct += p.y == items[i].correct ? 1 : 0;
    s.predictions.push_back(std::move(p));
  }
  s.loss /= static_cast<double>(data.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return s;
}

EvalSummary evaluate(const RwmnModel& model, const Dataset& data) {
  return evaluate(model, EncodedDataset(model, data));
}

TrainResult train(RwmnModel model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                  const TrainObserver& observer) {
  config.validate();
  if (train_set.empty() || val_set.empty()) throw InputError("train needs non-empty training and validation sets");

  const EncodedDataset train_data(model, train_set);
  const EncodedDataset val_data(model, val_set);
  std::vector<Tensor> params;
  for (auto& [name, t] : model.trainable()) params.push_back(t);
  AdagradState state(params, config.adagrad_initial_accumulator);
  Rng shuffle_rng(derive_seed(config.rng_seed, kShuffleStream));

  TrainResult result;
  result.seed = config.rng_seed;
  result.history.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t since_best = 0;
  const auto& items = train_set.items();

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      model.zero_grad();
      try {
        for (std::size_t k = start; k < end; ++k) {
          const std::size_t idx = order[k];
          Tape tape(model.config().precision, true);
          const ItemInputs in = train_data.inputs(tape, idx);
          const ForwardResult r = forward(tape, model, in);
          const Tensor loss = cross_entropy(tape, r.answers.z, items[idx].correct);
          epoch_loss += loss.item();
          tape.backward(scale(tape, loss, weight));
        }
        for (const Tensor& p : params) {
          for (double g : p.grad()) {
            if (!std::isfinite(g)) throw NumericError("non-finite gradient");
          }
        }
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + ": " + e.what());
      }
      adagrad_step(params, state, config.learning_rate);
    }

    const EvalSummary val = evaluate(model, val_data);
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(order.size()), val.loss, val.accuracy};
    if (!std::isfinite(rec.val_loss)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.history.epochs.push_back(rec);
    if (observer.metrics) {
      nlohmann::json line{{"epoch", rec.epoch},
                          {"train_loss", rec.train_loss},
                          {"val_loss", rec.val_loss},
                          {"val_acc", rec.val_accuracy}};
      *observer.metrics << line.dump() << '\n';
    }
    if (observer.on_epoch) observer.on_epoch(rec);

    if (rec.val_loss < result.history.best_val_loss) {
      result.history.best_val_loss = rec.val_loss;
      result.history.best_epoch = epoch;
      result.model = model.clone();
      since_best = 0;
    } else if (++since_best > config.early_stop_patience) {
      result.history.stop = StopReason::kEarlyStopping;
      break;
    }
    if (observer.stop_on_perfect_fit) {
      // Training accuracy of the parameters after this epoch's updates.
      if (evaluate(model, train_data).accuracy == 1.0) {
        result.history.stop = StopReason::kPerfectFit;
        if (result.history.best_epoch != epoch) {
          result.history.best_val_loss = rec.val_loss;
          result.history.best_epoch = epoch;
        }
        result.model = model.clone();
        break;
      }
    }
  }
  result.model.zero_grad();
  return result;
}

TrainResult train_with_restarts(const RwmnModel& base, const Dataset& train_set, const Dataset& val_set,
                                const TrainConfig& config, const TrainObserver& observer) {
  config.validate();
  std::optional<TrainResult> best;
  for (std::size_t r = 0; r < config.restarts; ++r) {
    TrainConfig run = config;
    run.rng_seed = config.rng_seed + r;
    RwmnModel model = base.clone();
    initialize_params(model, run.rng_seed);
    TrainResult result = train(std::move(model), train_set, val_set, run, observer);
    if (!best || result.history.best_val_loss < best->history.best_val_loss) best = std::move(result);
  }
  return std::move(*best);
}

// ---------------------------------------------------------------------------
// Ensembles

std::string_view to_string(EnsembleMode mode) {
  switch (mode) {
    case EnsembleMode::kNone: return "none";
    case EnsembleMode::kBag: return "bag";
    case EnsembleMode::kEnsemble: return "ensemble";
  }
  return "unknown";
}

EnsembleMode parse_ensemble_mode(std::string_view name) {
  std::string n(name);
  for (char& c : n) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (EnsembleMode m : {EnsembleMode::kNone, EnsembleMode::kBag, EnsembleMode::kEnsemble}) {
    if (to_string(m) == n) return m;
  }
  throw ConfigError("unknown ensemble mode '" + std::string(name) + "'");
}

std::vector<TrainResult> train_members(const RwmnModel& base, EnsembleMode mode, std::size_t members,
                                       const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                                       const TrainObserver& observer) {
  if (mode == EnsembleMode::kNone) throw ConfigError("train_members needs bag or ensemble mode");
  if (members == 0) throw ConfigError("ensemble needs at least one member");
  std::vector<TrainResult> out;
  out.reserve(members);
  for (std::size_t k = 0; k < members; ++k) {
    TrainConfig member = config;
    member.rng_seed = config.rng_seed + k * config.restarts;
    if (mode == EnsembleMode::kBag) {
      Rng rng(derive_seed(config.rng_seed, kBootstrapStream + 1000 * k));
      const Dataset sample = bootstrap_sample(train_set, rng);
      out.push_back(train_with_restarts(base, sample, val_set, member, observer));
    } else {
      out.push_back(train_with_restarts(base, train_set, val_set, member, observer));
    }
  }
  return out;
}

EnsemblePrediction ensemble_predict(std::span<const Prediction> member_predictions) {
  if (member_predictions.empty()) throw InputError("ensemble_predict needs at least one member");
  EnsemblePrediction out;
  out.z.assign(member_predictions.front().z.size(), 0.0);
  for (const Prediction& p : member_predictions) {
    if (p.z.size() != out.z.size()) throw DimensionError("ensemble members disagree on answer count");
    for (std::size_t i = 0; i < p.z.size(); ++i) out.z[i] += p.z[i];
  }
  for (double& v : out.z) v /= static_cast<double>(member_predictions.size());
  out.y = argmax(out.z);
  return out;
}

EnsemblePrediction ensemble_predict(std::span<const RwmnModel> members, const StorySource& story,
                                    const QAItem& item) {
  std::vector<Prediction> preds;
  preds.reserve(members.size());
  for (const RwmnModel& m : members) preds.push_back(predict(m, story, item));
  return ensemble_predict(preds);
}

}  // namespace rwmn
