#include "rwmn/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "rwmn/error.hpp"
#include "rwmn/fusion.hpp"
#include "rwmn/memnet.hpp"
#include "rwmn/rng.hpp"
#include "rwmn/synthetic.hpp"
#include "rwmn/training.hpp"

namespace rwmn {

namespace {

using Leaves = std::vector<Tensor>;

Tensor uniform(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(num_elements(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for ops with a kink there.
Tensor away_from_zero(Rng& rng, Shape shape) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution neg(0.5);
  std::vector<double> v(num_elements(shape));
  for (double& x : v) x = neg(rng) ? -mag(rng) : mag(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// sum(out * r) with a fixed random r, so every output coordinate matters.
Tensor project(Tape& tape, const Tensor& out, const Tensor& r) {
  return sum(tape, mul(tape, out, r));
}

// A case built from a generator that returns leaves and a loss over them.
template <typename Build>
GradCheckCase make_case(std::string name, Build build) {
  return {std::move(name), [build](std::uint64_t seed, double step) {
            Rng rng(derive_seed(seed, 31));
            auto [leaves, loss] = build(rng);
            return grad_check(loss, leaves, step);
          }};
}

using LossFn = std::function<Tensor(Tape&)>;

// Unary elementwise-ish op over one random leaf of `shape`.
template <typename Op>
GradCheckCase unary_case(std::string name, Shape in_shape, Shape out_shape, Op op) {
  return make_case(std::move(name), [=](Rng& rng) {
    Tensor x = uniform(rng, in_shape);
    Tensor r = uniform(rng, out_shape, -1.0, 1.0, false);
    LossFn loss = [=](Tape& t) { return project(t, op(t, x), r); };
    return std::pair{Leaves{x}, loss};
  });
}

template <typename Op>
GradCheckCase binary_case(std::string name, Shape a_shape, Shape b_shape, Shape out_shape, Op op) {
  return make_case(std::move(name), [=](Rng& rng) {
    Tensor a = uniform(rng, a_shape);
    Tensor b = uniform(rng, b_shape);
    Tensor r = uniform(rng, out_shape, -1.0, 1.0, false);
    LossFn loss = [=](Tape& t) { return project(t, op(t, a, b), r); };
    return std::pair{Leaves{a, b}, loss};
  });
}

GradCheckCase conv_case(std::size_t h, std::size_t w, std::size_t cin, std::size_t fv, std::size_t fh,
                        std::size_t cout, std::size_t sv) {
  std::string name = "conv2d_same h" + std::to_string(h) + " f" + std::to_string(fv) + "x" + std::to_string(fh) +
                     " s" + std::to_string(sv) + " c" + std::to_string(cin) + "->" + std::to_string(cout);
  return make_case(std::move(name), [=](Rng& rng) {
    Tensor x = uniform(rng, {h, w, cin});
    Tensor f = uniform(rng, {fv, fh, cin, cout});
    Tensor b = uniform(rng, {cout});
    Tensor r = uniform(rng, {same_output_extent(h, sv), same_output_extent(w, 1), cout}, -1.0, 1.0, false);
    LossFn loss = [=](Tape& t) { return project(t, conv2d_same(t, x, f, b, {sv, 1}), r); };
    return std::pair{Leaves{x, f, b}, loss};
  });
}

GradCheckCase sketch_case(std::size_t rows, std::size_t p, std::size_t dim) {
  return make_case("count_sketch " + std::to_string(p) + "->" + std::to_string(dim), [=](Rng& rng) {
    const CountSketch sketch(p, dim, rng());
    Tensor x = uniform(rng, {rows, p});
    Tensor r = uniform(rng, {rows, dim}, -1.0, 1.0, false);
    LossFn loss = [=](Tape& t) { return project(t, count_sketch(t, x, sketch), r); };
    return std::pair{Leaves{x}, loss};
  });
}

GradCheckCase convolution_case(std::size_t rows, std::size_t dim, bool shared) {
  std::string name = "circular_convolution d" + std::to_string(dim) + (shared ? " shared" : "");
  return make_case(std::move(name), [=](Rng& rng) {
    Tensor a = uniform(rng, {rows, dim});
    Tensor b = shared ? uniform(rng, {dim}) : uniform(rng, {rows, dim});
    Tensor r = uniform(rng, {rows, dim}, -1.0, 1.0, false);
    LossFn loss = [=](Tape& t) { return project(t, circular_convolution(t, a, b), r); };
    return std::pair{Leaves{a, b}, loss};
  });
}

GradCheckCase cbp_case(std::size_t rows, std::size_t px, std::size_t py, std::size_t dim) {
  return make_case("cbp " + std::to_string(px) + "x" + std::to_string(py) + "->" + std::to_string(dim),
                   [=](Rng& rng) {
                     const CountSketch sx(px, dim, rng());
                     const CountSketch sy(py, dim, rng());
                     Tensor x = uniform(rng, {rows, px});
                     Tensor y = uniform(rng, {rows, py});
                     Tensor r = uniform(rng, {rows, dim}, -1.0, 1.0, false);
                     LossFn loss = [=](Tape& t) { return project(t, cbp(t, x, y, sx, sy), r); };
                     return std::pair{Leaves{x, y}, loss};
                   });
}

// --- toy model

const std::vector<std::string> kToyTokens = {"who", "holds", "the", "red", "key", "at", "door",
                                             "blue", "box", "nobody", "window", "lamp"};

Vocabulary toy_vocabulary() {
  Vocabulary v;
  for (const auto& t : kToyTokens) v.add(t);
  return v;
}

std::vector<std::string> random_sentence(Rng& rng, std::size_t lo, std::size_t hi) {
  std::uniform_int_distribution<std::size_t> len(lo, hi);
  std::uniform_int_distribution<std::size_t> pick(0, kToyTokens.size() - 1);
  std::vector<std::string> s(len(rng));
  for (auto& w : s) w = kToyTokens[pick(rng)];
  return s;
}

RwmnConfig toy_config(Variant variant, std::uint64_t seed, bool trainable_embedding) {
  RwmnConfig c;
  c.d = 4;
  c.fusion.cbp_dim = 8;
  c.fusion.word_dim = 6;
  c.fusion.visual.channels = 3;
  c.fusion.sketch_seed = seed;
  c.fusion.embedding_seed = seed + 1;
  c.fusion.trainable_embedding = trainable_embedding;
  c.write_layers = {{3, 2, 2}};
  c.read_layers = {{2, 1, 2}};
  c.variant = variant;
  return c;
}

GradCheckCase model_case(Variant variant, bool trainable_embedding) {
  std::string name = "end-to-end " + std::string(to_string(variant)) + (trainable_embedding ? " +embedding" : "");
  return {std::move(name), [=](std::uint64_t seed, double step) {
            Rng rng(derive_seed(seed, 32));
            const Vocabulary vocab = toy_vocabulary();
            RwmnModel model = RwmnModel::create(toy_config(variant, seed, trainable_embedding), vocab);
            initialize_params(model, rng);
            // Non-zero alpha and biases so every path carries gradient.
            for (auto& [name, t] : model.trainable()) {
              if (t.rank() <= 1) {
                auto v = t.mutable_values();
                std::uniform_real_distribution<double> dist(-0.5, 0.5);
                for (double& x : v) x = dist(rng);
              }
            }
            StorySource story;
            story.id = "toy";
            story.modality = Modality::kVideoText;
            story.visual_dim = 3;
            std::uniform_real_distribution<float> feat(0.0f, 1.0f);
            for (std::size_t i = 0; i < 7; ++i) {
              const auto words = random_sentence(rng, 1, 4);
              StoryStep s;
              s.tokens = vocab.encode(words);
              s.visual = {feat(rng), feat(rng), feat(rng)};
              story.steps.push_back(std::move(s));
            }
            QAItem item;
            item.story_id = "toy";
            item.question = random_sentence(rng, 2, 4);
            for (auto& a : item.answers) a = random_sentence(rng, 1, 3);
            item.correct = std::uniform_int_distribution<std::size_t>(0, kAnswerCount - 1)(rng);

            std::vector<Tensor> leaves;
            for (const auto& [name, t] : model.trainable()) leaves.push_back(t);
            LossFn loss = [&](Tape& t) {
              const ItemInputs in = encode_item(t, model, story, item);
              const ForwardResult r = forward(t, model, in);
              return answer_loss(t, r, item.correct);
            };
            return grad_check(loss, leaves, step);
          }};
}

// Identity whose backward passes 1.1 times the incoming gradient.
Tensor corrupted_identity(Tape& tape, const Tensor& x) {
  const auto xv = x.values();
  return tape.emit("corrupted_identity", x.shape(), {xv.begin(), xv.end()}, {x},
                   [t = Tensor(x)](std::span<const double> g) mutable {
                     auto gx = t.mutable_grad();
                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 1.1 * g[i];
                   });
}

}  // namespace

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed; });
}

std::vector<GradCheckCase> op_gradcheck_cases() {
  std::vector<GradCheckCase> cases;
  cases.push_back(binary_case("matmul", {3, 4}, {4, 2}, {3, 2}, [](Tape& t, auto& a, auto& b) {
    return matmul(t, a, b);
  }));
  cases.push_back(unary_case("transpose", {3, 5}, {5, 3}, [](Tape& t, auto& x) { return transpose(t, x); }));
  cases.push_back(unary_case("reshape", {3, 4}, {2, 6}, [](Tape& t, auto& x) { return reshape(t, x, {2, 6}); }));
  cases.push_back(
      unary_case("swap_last_axes", {2, 3, 4}, {2, 4, 3}, [](Tape& t, auto& x) { return swap_last_axes(t, x); }));
  cases.push_back(binary_case("add", {3, 4}, {3, 4}, {3, 4}, [](Tape& t, auto& a, auto& b) { return add(t, a, b); }));
  cases.push_back(
      binary_case("add scalar", {3, 4}, {1}, {3, 4}, [](Tape& t, auto& a, auto& b) { return add(t, a, b); }));
  cases.push_back(binary_case("sub", {3, 4}, {3, 4}, {3, 4}, [](Tape& t, auto& a, auto& b) { return sub(t, a, b); }));
  cases.push_back(binary_case("mul", {3, 4}, {3, 4}, {3, 4}, [](Tape& t, auto& a, auto& b) { return mul(t, a, b); }));
  cases.push_back(
      binary_case("mul scalar", {1}, {3, 4}, {3, 4}, [](Tape& t, auto& a, auto& b) { return mul(t, a, b); }));
  cases.push_back(unary_case("scale", {3, 4}, {3, 4}, [](Tape& t, auto& x) { return scale(t, x, -2.5); }));
  cases.push_back(binary_case("add_bias", {2, 3, 4}, {4}, {2, 3, 4}, [](Tape& t, auto& a, auto& b) {
    return add_bias(t, a, b);
  }));
  cases.push_back(binary_case("dot", {7}, {7}, {}, [](Tape& t, auto& a, auto& b) { return dot(t, a, b); }));
  cases.push_back(unary_case("sum", {3, 4}, {}, [](Tape& t, auto& x) { return sum(t, x); }));
  cases.push_back(
      unary_case("sum_over_axis 0", {3, 4, 2}, {4, 2}, [](Tape& t, auto& x) { return sum_over_axis(t, x, 0); }));
  cases.push_back(
      unary_case("sum_over_axis 1", {3, 4, 2}, {3, 2}, [](Tape& t, auto& x) { return sum_over_axis(t, x, 1); }));
  cases.push_back(
      unary_case("mean_over_axis 2", {3, 4, 2}, {3, 4}, [](Tape& t, auto& x) { return mean_over_axis(t, x, 2); }));
  cases.push_back(make_case("relu", [](Rng& rng) {
    Tensor x = away_from_zero(rng, {4, 5});
    Tensor r = uniform(rng, {4, 5}, -1.0, 1.0, false);
    LossFn loss = [=](Tape& t) { return project(t, relu(t, x), r); };
    return std::pair{Leaves{x}, loss};
  }));
  cases.push_back(unary_case("sigmoid", {4, 5}, {4, 5}, [](Tape& t, auto& x) { return sigmoid(t, scale(t, x, 3.0)); }));
  cases.push_back(make_case("log", [](Rng& rng) {
    Tensor x = uniform(rng, {4, 5}, 0.5, 2.0);
    Tensor r = uniform(rng, {4, 5}, -1.0, 1.0, false);
    LossFn loss = [=](Tape& t) { return project(t, log(t, x), r); };
    return std::pair{Leaves{x}, loss};
  }));
  cases.push_back(unary_case("softmax all", {3, 4}, {3, 4}, [](Tape& t, auto& x) {
    return softmax(t, scale(t, x, 2.0), SoftmaxAxis::kAll);
  }));
  cases.push_back(unary_case("softmax last", {3, 4}, {3, 4}, [](Tape& t, auto& x) {
    return softmax(t, scale(t, x, 2.0), SoftmaxAxis::kLast);
  }));
  cases.push_back(unary_case("pick", {3, 4}, {}, [](Tape& t, auto& x) { return pick(t, x, 7); }));
  cases.push_back(unary_case("gather_rows", {5, 3}, {4, 3}, [](Tape& t, auto& x) {
    const std::size_t rows[] = {4, 0, 4, 2};
    return gather_rows(t, x, rows);
  }));
  cases.push_back(binary_case("stack_rows", {3}, {3}, {2, 3}, [](Tape& t, auto& a, auto& b) {
    return stack_rows(t, {a, b});
  }));
  cases.push_back(conv_case(9, 4, 1, 3, 4, 2, 2));
  cases.push_back(conv_case(12, 5, 2, 4, 5, 3, 1));
  cases.push_back(conv_case(20, 6, 1, 8, 6, 3, 4));
  cases.push_back(conv_case(7, 3, 3, 3, 3, 3, 1));
  cases.push_back(conv_case(5, 4, 2, 7, 1, 2, 3));
  cases.push_back(sketch_case(3, 6, 8));
  cases.push_back(sketch_case(2, 5, 3));
  cases.push_back(convolution_case(3, 8, false));
  cases.push_back(convolution_case(3, 6, false));
  cases.push_back(convolution_case(4, 8, true));
  cases.push_back(convolution_case(4, 5, true));
  cases.push_back(cbp_case(3, 5, 4, 8));
  cases.push_back(cbp_case(2, 4, 3, 6));
  cases.push_back(unary_case("position_encode", {4, 6}, {6}, [](Tape& t, auto& x) { return position_encode(t, x); }));
  cases.push_back(make_case("embed_sentence", [](Rng& rng) {
    const EmbeddingTable table(uniform(rng, {6, 5}), true);
    Tensor r = uniform(rng, {5}, -1.0, 1.0, false);
    LossFn loss = [=](Tape& t) {
      const std::uint32_t tokens[] = {3, 1, 3, 5};
      return project(t, embed_sentence(t, tokens, table), r);
    };
    return std::pair{Leaves{table.matrix()}, loss};
  }));
  cases.push_back(make_case("cross_entropy", [](Rng& rng) {
    Tensor x = uniform(rng, {5});
    LossFn loss = [=](Tape& t) { return cross_entropy(t, softmax(t, x), 2); };
    return std::pair{Leaves{x}, loss};
  }));
  for (AttentionNorm norm : {AttentionNorm::kJoint, AttentionNorm::kPerChannel}) {
    const std::string name = norm == AttentionNorm::kJoint ? "attend joint" : "attend per-channel";
    cases.push_back(binary_case(name, {5, 4, 3}, {4}, {5, 3}, [norm](Tape& t, auto& m, auto& u) {
      return attend(t, m, u, norm);
    }));
  }
  cases.push_back(binary_case("output_vector", {5, 4, 3}, {5, 3}, {4}, [](Tape& t, auto& m, auto& p) {
    return output_vector(t, m, p);
  }));
  for (std::size_t d : {4u, 5u}) {
    cases.push_back(make_case("query_dependent_memory d" + std::to_string(d), [d](Rng& rng) {
      const CountSketch sm(d, d, rng());
      const CountSketch sq(d, d, rng());
      Tensor m = uniform(rng, {3, d, 2});
      Tensor u = uniform(rng, {d});
      Tensor r = uniform(rng, {3, d, 2}, -1.0, 1.0, false);
      LossFn loss = [=](Tape& t) { return project(t, query_dependent_memory(t, m, u, sm, sq), r); };
      return std::pair{Leaves{m, u}, loss};
    }));
  }
  cases.push_back(make_case("score_answers", [](Rng& rng) {
    RwmnConfig c;
    c.d = 4;
    c.fusion.word_dim = 6;
    RwmnParams p = RwmnParams::allocate(c);
    p.w_q = uniform(rng, {4, 6});
    p.b_q = uniform(rng, {4});
    p.alpha_raw = uniform(rng, {});
    Tensor o = uniform(rng, {4});
    Tensor u = uniform(rng, {4});
    Tensor answers = uniform(rng, {kAnswerCount, 6});
    LossFn loss = [=](Tape& t) {
      const AnswerSet s = score_answers(t, o, u, answers, p);
      return cross_entropy(t, s.z, 1);
    };
    return std::pair{Leaves{o, u, answers, p.w_q, p.b_q, p.alpha_raw}, loss};
  }));
  return cases;
}

std::vector<GradCheckCase> model_gradcheck_cases() {
  std::vector<GradCheckCase> cases;
  for (Variant v : {Variant::kFull, Variant::kNoRW, Variant::kNoR, Variant::kNoQ, Variant::kNoVid}) {
    cases.push_back(model_case(v, false));
  }
  cases.push_back(model_case(Variant::kFull, true));
  return cases;
}

std::vector<GradCheckCase> default_gradcheck_cases() {
  auto cases = op_gradcheck_cases();
  for (auto& c : model_gradcheck_cases()) cases.push_back(std::move(c));
  return cases;
}

GradCheckCase corrupted_gradcheck_case() {
  return unary_case("corrupted_identity", {3, 4}, {3, 4},
                    [](Tape& t, auto& x) { return corrupted_identity(t, x); });
}

GradCheckReport run_gradcheck_suite(std::span<const GradCheckCase> cases, const GradCheckSuiteConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report;
  for (const auto& c : cases) {
    GradCheckEntry e;
    e.name = c.name;
    bool ok = true;
    for (std::size_t s = 0; s < config.seeds; ++s) {
      try {
        const GradCheckResult r = c.run(config.base_seed + s, config.step);
        ++e.seeds_run;
        e.max_rel_error = std::max(e.max_rel_error, r.max_rel_error);
        if (!r.finite) {
          ok = false;
          if (e.failure.empty()) e.failure = "seed " + std::to_string(config.base_seed + s) + ": " + r.failure;
        }
      } catch (const std::exception& ex) {
        ok = false;
        if (e.failure.empty()) e.failure = "seed " + std::to_string(config.base_seed + s) + ": " + ex.what();
      }
    }
    e.passed = ok && e.max_rel_error <= config.tolerance;
    report.entries.push_back(std::move(e));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void print_gradcheck_report(std::ostream& out, const GradCheckReport& report, double tolerance) {
  std::size_t width = 0;
  for (const auto& e : report.entries) width = std::max(width, e.name.size());
  std::size_t failed = 0;
  for (const auto& e : report.entries) {
    char line[64];
    std::snprintf(line, sizeof line, "%.3e", e.max_rel_error);
    out << (e.passed ? "PASS  " : "FAIL  ") << e.name << std::string(width - e.name.size() + 2, ' ') << line
        << "  (" << e.seeds_run << " seeds)";
    if (!e.failure.empty()) out << "  " << e.failure;
    out << '\n';
    failed += e.passed ? 0 : 1;
  }
  char summary[128];
  std::snprintf(summary, sizeof summary, "%zu checks, %zu failed, tolerance %.1e, %.1f s\n", report.entries.size(),
                failed, tolerance, report.seconds);
  out << summary;
}

}  // namespace rwmn
