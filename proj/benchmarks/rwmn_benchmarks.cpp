#include <benchmark/benchmark.h>

#include <random>

#include "rwmn/fft.hpp"
#include "rwmn/fusion.hpp"
#include "rwmn/memnet.hpp"
#include "rwmn/synthetic.hpp"
#include "rwmn/tensor.hpp"
#include "rwmn/training.hpp"

namespace {

using namespace rwmn;

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> v(num_elements(shape));
  for (double& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Write convolution over an n x d movie embedding.
void BM_ConvForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 32;
  const Tensor x = random_tensor({n, d, 1}, 1);
  const Tensor f = random_tensor({8, d, 1, 3}, 2);
  const Tensor b = random_tensor({3}, 3);
  for (auto _ : state) {
    Tape tape(Precision::kFloat64, false);
    benchmark::DoNotOptimize(conv2d_same(tape, x, f, b, {4, 1}));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_ConvForward)->Arg(32)->Arg(256)->Arg(1024);

void BM_ConvBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 32;
  const Tensor x = random_tensor({n, d, 1}, 1, true);
  const Tensor f = random_tensor({8, d, 1, 3}, 2, true);
  const Tensor b = random_tensor({3}, 3, true);
  for (auto _ : state) {
    Tape tape;
    tape.backward(sum(tape, conv2d_same(tape, x, f, b, {4, 1})));
  }
}
BENCHMARK(BM_ConvBackward)->Arg(32)->Arg(256)->Arg(1024);

void BM_Fft(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<std::complex<double>> data(n, {1.0, 0.5});
  for (auto _ : state) {
    fft::transform(data, false);
    benchmark::DoNotOptimize(data.data());
  }
}
BENCHMARK(BM_Fft)->Arg(128)->Arg(4096);

void BM_Cbp(benchmark::State& state) {
  const auto dim = static_cast<std::size_t>(state.range(0));
  const std::size_t p = 300;
  const CountSketch sx(p, dim, 1), sy(p, dim, 2);
  const Tensor x = random_tensor({p}, 3);
  const Tensor y = random_tensor({p}, 4);
  const auto xv = x.values();
  const auto yv = y.values();
  for (auto _ : state) benchmark::DoNotOptimize(cbp(xv, yv, sx, sy));
}
BENCHMARK(BM_Cbp)->Arg(128)->Arg(4096);

struct ModelFixture {
  Corpus corpus;
  RwmnModel model;

  ModelFixture() {
    SyntheticTaskConfig sc;
    sc.train_count = 8;
    sc.val_count = 1;
    sc.test_count = 1;
    corpus = generate_synthetic(sc);
    RwmnConfig c;
    c.d = 32;
    c.fusion.cbp_dim = 128;
    c.fusion.visual.channels = sc.feature_dim;
    c.write_layers = {{8, 4, 3}};
    c.read_layers = {{3, 1, 3}};
    model = RwmnModel::create(c, corpus.vocab);
    initialize_params(model, 1);
  }
};

void BM_ModelForward(benchmark::State& state) {
  const ModelFixture f;
  const QAItem& item = f.corpus.train.items()[0];
  const StorySource& story = f.corpus.train.story_for(item);
  for (auto _ : state) benchmark::DoNotOptimize(predict(f.model, story, item));
}
BENCHMARK(BM_ModelForward);

void BM_ModelForwardBackward(benchmark::State& state) {
  ModelFixture f;
  const QAItem& item = f.corpus.train.items()[0];
  const StorySource& story = f.corpus.train.story_for(item);
  for (auto _ : state) {
    Tape tape;
    const ItemInputs in = encode_item(tape, f.model, story, item);
    const ForwardResult r = forward(tape, f.model, in);
    tape.backward(answer_loss(tape, r, item.correct));
    f.model.zero_grad();
  }
}
BENCHMARK(BM_ModelForwardBackward);

}  // namespace

BENCHMARK_MAIN();
