#include "rwmn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "rwmn/error.hpp"

namespace rwmn {

std::size_t num_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

struct Tensor::Storage {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
};

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, bool requires_grad) {
  check_shape(shape);
  const std::size_t n = num_elements(shape);
  storage_ = std::make_shared<Storage>();
  storage_->shape = std::move(shape);
  storage_->values.assign(n, 0.0);
  storage_->requires_grad = requires_grad;
  if (requires_grad) storage_->grad.assign(n, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (values.size() != num_elements(shape)) {
    throw DimensionError("tensor of shape " + to_string(shape) + " given " +
                         std::to_string(values.size()) + " values");
  }
  storage_ = std::make_shared<Storage>();
  storage_->shape = std::move(shape);
  storage_->values = std::move(values);
  storage_->requires_grad = requires_grad;
  if (requires_grad) storage_->grad.assign(storage_->values.size(), 0.0);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values), requires_grad);
}

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = num_elements(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

const Shape& Tensor::shape() const {
  if (!storage_) throw UsageError("undefined tensor");
  return storage_->shape;
}

std::size_t Tensor::extent(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return storage_ ? storage_->values.size() : 0; }

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

std::span<const double> Tensor::values() const {
  if (!storage_) return {};
  return storage_->values;
}

std::span<double> Tensor::mutable_values() {
  if (!storage_) throw UsageError("undefined tensor");
  return storage_->values;
}

std::span<const double> Tensor::grad() const {
  if (!storage_) return {};
  return storage_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!storage_) throw UsageError("undefined tensor");
  return storage_->grad;
}

void Tensor::zero_grad() {
  if (storage_) std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return storage_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + to_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return storage_->values[flat];
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(shape(), storage_->values, requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::emit_impl(std::string_view op, Shape shape, std::vector<double> values,
                       bool any_input_requires_grad, BackwardFn backward) {
  if (precision_ == Precision::kFloat32) {
    for (double& v : values) v = static_cast<double>(static_cast<float>(v));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + " produced a non-finite value at index " +
                         std::to_string(i));
    }
  }
  const bool track = recording_ && any_input_requires_grad;
  Tensor out(std::move(shape), std::move(values), track);
  if (track) records_.push_back(Record{std::string(op), out, std::move(backward)});
  return out;
}

Tensor Tape::emit(std::string_view op, Shape shape, std::vector<double> values,
                  std::initializer_list<Tensor> inputs, BackwardFn backward) {
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  return emit_impl(op, std::move(shape), std::move(values), any, std::move(backward));
}

Tensor Tape::emit(std::string_view op, Shape shape, std::vector<double> values,
                  const std::vector<Tensor>& inputs, BackwardFn backward) {
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  return emit_impl(op, std::move(shape), std::move(values), any, std::move(backward));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  for (Record& r : records_) r.output.zero_grad();
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->backward(it->output.grad());
  }
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(records_.size());
  for (const Record& r : records_) names.push_back(r.op);
  return names;
}

// ---------------------------------------------------------------------------
// Ops

namespace {

// The message is only built on failure.
#define RWMN_REQUIRE(cond, message)                  \
  do {                                               \
    if (!(cond)) throw ::rwmn::DimensionError(message); \
  } while (false)

// Accumulates `g` into t's gradient if t participates.
template <typename F>
void accumulate(Tensor t, F&& contribution) {
  if (!t.requires_grad()) return;
  std::span<double> g = t.mutable_grad();
  contribution(g);
}

enum class Broadcast { kNone, kScalarA, kScalarB };

Broadcast elementwise_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.size() == 1) return Broadcast::kScalarB;
  if (a.size() == 1) return Broadcast::kScalarA;
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) +
                       " and " + to_string(b.shape()));
}

template <typename Fwd>
void binary_forward(const Tensor& a, const Tensor& b, Broadcast mode, Fwd f,
                           std::vector<double>& out, Shape& shape) {
  const auto av = a.values();
  const auto bv = b.values();
  switch (mode) {
    case Broadcast::kNone:
      shape = a.shape();
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
      break;
    case Broadcast::kScalarB:
      shape = a.shape();
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[0]);
      break;
    case Broadcast::kScalarA:
      shape = b.shape();
      out.resize(bv.size());
      for (std::size_t i = 0; i < bv.size(); ++i) out[i] = f(av[0], bv[i]);
      break;
  }
}

// d(out)/d(a) = da(a_i, b_i), d(out)/d(b) = db(a_i, b_i)
template <typename Fwd, typename DA, typename DB>
Tensor binary_op(Tape& tape, const char* name, const Tensor& a, const Tensor& b, Fwd f, DA da,
                 DB db) {
  const Broadcast mode = elementwise_mode(a, b, name);
  std::vector<double> out;
  Shape shape;
  binary_forward(a, b, mode, f, out, shape);
  return tape.emit(name, std::move(shape), std::move(out), {a, b},
                   [a, b, mode, da, db](std::span<const double> g) {
                     const auto av = a.values();
                     const auto bv = b.values();
                     const std::size_t n = g.size();
                     auto aval = [&](std::size_t i) { return mode == Broadcast::kScalarA ? av[0] : av[i]; };
                     auto bval = [&](std::size_t i) { return mode == Broadcast::kScalarB ? bv[0] : bv[i]; };
                     accumulate(a, [&](std::span<double> ga) {
                       for (std::size_t i = 0; i < n; ++i) {
                         ga[mode == Broadcast::kScalarA ? 0 : i] += g[i] * da(aval(i), bval(i));
                       }
                     });
                     accumulate(b, [&](std::span<double> gb) {
                       for (std::size_t i = 0; i < n; ++i) {
                         gb[mode == Broadcast::kScalarB ? 0 : i] += g[i] * db(aval(i), bval(i));
                       }
                     });
                   });
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  RWMN_REQUIRE(a.rank() == 2 && b.rank() == 2, "matmul needs rank-2 operands, got " +
                                              to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t p = a.extent(0), q = a.extent(1), r = b.extent(1);
  RWMN_REQUIRE(b.extent(0) == q, "matmul inner extents differ: " + to_string(a.shape()) + " x " +
                                to_string(b.shape()));
  std::vector<double> out(p * r, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < p; ++i) {
    double* row = out.data() + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = av[i * q + k];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + k * r;
      for (std::size_t j = 0; j < r; ++j) row[j] += aik * brow[j];
    }
  }
  return tape.emit("matmul", {p, r}, std::move(out), {a, b},
                   [a, b, p, q, r](std::span<const double> g) {
                     const auto av = a.values();
                     const auto bv = b.values();
                     accumulate(a, [&](std::span<double> ga) {
                       for (std::size_t i = 0; i < p; ++i) {
                         for (std::size_t k = 0; k < q; ++k) {
                           double s = 0.0;
                           const double* brow = bv.data() + k * r;
                           const double* grow = g.data() + i * r;
                           for (std::size_t j = 0; j < r; ++j) s += grow[j] * brow[j];
                           ga[i * q + k] += s;
                         }
                       }
                     });
                     accumulate(b, [&](std::span<double> gb) {
                       for (std::size_t i = 0; i < p; ++i) {
                         const double* grow = g.data() + i * r;
                         for (std::size_t k = 0; k < q; ++k) {
                           const double aik = av[i * q + k];
                           if (aik == 0.0) continue;
                           double* gbrow = gb.data() + k * r;
                           for (std::size_t j = 0; j < r; ++j) gbrow[j] += aik * grow[j];
                         }
                       }
                     });
                   });
}

Tensor transpose(Tape& tape, const Tensor& a) {
  RWMN_REQUIRE(a.rank() == 2, "transpose needs rank 2, got " + to_string(a.shape()));
  const std::size_t rows = a.extent(0), cols = a.extent(1);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = av[i * cols + j];
  return tape.emit("transpose", {cols, rows}, std::move(out), {a},
                   [a, rows, cols](std::span<const double> g) {
                     accumulate(a, [&](std::span<double> ga) {
                       for (std::size_t i = 0; i < rows; ++i)
                         for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += g[j * rows + i];
                     });
                   });
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  RWMN_REQUIRE(num_elements(shape) == a.size(),
          "reshape " + to_string(a.shape()) + " -> " + to_string(shape) + " changes size");
  const auto av = a.values();
  return tape.emit("reshape", std::move(shape), std::vector<double>(av.begin(), av.end()), {a},
                   [a](std::span<const double> g) {
                     accumulate(a, [&](std::span<double> ga) {
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     });
                   });
}

Tensor swap_last_axes(Tape& tape, const Tensor& a) {
  RWMN_REQUIRE(a.rank() == 3, "swap_last_axes needs rank 3, got " + to_string(a.shape()));
  const std::size_t n0 = a.extent(0), n1 = a.extent(1), n2 = a.extent(2);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < n0; ++i)
    for (std::size_t j = 0; j < n1; ++j)
      for (std::size_t k = 0; k < n2; ++k) out[(i * n2 + k) * n1 + j] = av[(i * n1 + j) * n2 + k];
  return tape.emit("swap_last_axes", {n0, n2, n1}, std::move(out), {a},
                   [a, n0, n1, n2](std::span<const double> g) {
                     accumulate(a, [&](std::span<double> ga) {
                       for (std::size_t i = 0; i < n0; ++i)
                         for (std::size_t j = 0; j < n1; ++j)
                           for (std::size_t k = 0; k < n2; ++k)
                             ga[(i * n1 + j) * n2 + k] += g[(i * n2 + k) * n1 + j];
                     });
                   });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_op(
      tape, "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_op(
      tape, "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_op(
      tape, "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return tape.emit("scale", a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) {
    accumulate(a, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  });
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  RWMN_REQUIRE(x.rank() >= 1 && bias.size() == x.extent(x.rank() - 1),
          "add_bias: bias " + to_string(bias.shape()) + " does not match last axis of " +
              to_string(x.shape()));
  const std::size_t k = bias.size();
  const auto xv = x.values();
  const auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + bv[i % k];
  return tape.emit("add_bias", x.shape(), std::move(out), {x, bias},
                   [x, bias, k](std::span<const double> g) {
                     accumulate(x, [&](std::span<double> gx) {
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
                     accumulate(bias, [&](std::span<double> gb) {
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i % k] += g[i];
                     });
                   });
}

Tensor dot(Tape& tape, const Tensor& a, const Tensor& b) {
  RWMN_REQUIRE(a.size() == b.size(),
          "dot: sizes differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto av = a.values();
  const auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return tape.emit("dot", {}, {s}, {a, b}, [a, b](std::span<const double> g) {
    const auto av = a.values();
    const auto bv = b.values();
    accumulate(a, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * bv[i];
    });
    accumulate(b, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * av[i];
    });
  });
}

Tensor sum(Tape& tape, const Tensor& x) {
  const auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  return tape.emit("sum", {}, {s}, {x}, [x](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      for (double& v : gx) v += g[0];
    });
  });
}

namespace {

Tensor reduce_axis(Tape& tape, const Tensor& x, std::size_t axis, double factor, const char* name) {
  const Shape& s = x.shape();
  RWMN_REQUIRE(axis < s.size(), std::string(name) + ": axis out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  const auto xv = x.values();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + l) * inner + i];
  if (factor != 1.0)
    for (double& v : out) v *= factor;
  return tape.emit(name, std::move(out_shape), std::move(out), {x},
                   [x, outer, inner, len, factor](std::span<const double> g) {
                     accumulate(x, [&](std::span<double> gx) {
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t l = 0; l < len; ++l)
                           for (std::size_t i = 0; i < inner; ++i)
                             gx[(o * len + l) * inner + i] += factor * g[o * inner + i];
                     });
                   });
}

}  // namespace

Tensor sum_over_axis(Tape& tape, const Tensor& x, std::size_t axis) {
  return reduce_axis(tape, x, axis, 1.0, "sum_over_axis");
}

Tensor mean_over_axis(Tape& tape, const Tensor& x, std::size_t axis) {
  return reduce_axis(tape, x, axis, 1.0 / static_cast<double>(x.extent(axis)), "mean_over_axis");
}

Tensor relu(Tape& tape, const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return tape.emit("relu", x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    const auto xv = x.values();
    accumulate(x, [&](std::span<double> gx) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > 0.0) gx[i] += g[i];
    });
  });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  std::vector<double> saved = out;
  return tape.emit("sigmoid", x.shape(), std::move(out), {x},
                   [x, saved = std::move(saved)](std::span<const double> g) {
                     accumulate(x, [&](std::span<double> gx) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         gx[i] += g[i] * saved[i] * (1.0 - saved[i]);
                     });
                   });
}

Tensor log(Tape& tape, const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0.0)) throw NumericError("log of non-positive value at index " + std::to_string(i));
    out[i] = std::log(xv[i]);
  }
  return tape.emit("log", x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    const auto xv = x.values();
    accumulate(x, [&](std::span<double> gx) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
    });
  });
}

Tensor softmax(Tape& tape, const Tensor& x, SoftmaxAxis over) {
  const auto xv = x.values();
  const std::size_t n = xv.size();
  const std::size_t group =
      over == SoftmaxAxis::kAll || x.rank() == 0 ? n : x.extent(x.rank() - 1);
  std::vector<double> out(n);
  for (std::size_t start = 0; start < n; start += group) {
    const double mx = *std::max_element(xv.begin() + start, xv.begin() + start + group);
    double z = 0.0;
    for (std::size_t i = start; i < start + group; ++i) {
      out[i] = std::exp(xv[i] - mx);
      z += out[i];
    }
    for (std::size_t i = start; i < start + group; ++i) out[i] /= z;
  }
  std::vector<double> saved = out;
  return tape.emit("softmax", x.shape(), std::move(out), {x},
                   [x, group, saved = std::move(saved)](std::span<const double> g) {
                     accumulate(x, [&](std::span<double> gx) {
                       for (std::size_t start = 0; start < g.size(); start += group) {
                         double inner = 0.0;
                         for (std::size_t i = start; i < start + group; ++i) inner += g[i] * saved[i];
                         for (std::size_t i = start; i < start + group; ++i)
                           gx[i] += saved[i] * (g[i] - inner);
                       }
                     });
                   });
}

Tensor pick(Tape& tape, const Tensor& x, std::size_t flat_index) {
  RWMN_REQUIRE(flat_index < x.size(), "pick: index " + std::to_string(flat_index) +
                                     " out of range for " + to_string(x.shape()));
  return tape.emit("pick", {}, {x[flat_index]}, {x}, [x, flat_index](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) { gx[flat_index] += g[0]; });
  });
}

Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::size_t> rows) {
  RWMN_REQUIRE(table.rank() == 2, "gather_rows needs a rank-2 table, got " + to_string(table.shape()));
  RWMN_REQUIRE(!rows.empty(), "gather_rows needs at least one row");
  const std::size_t v = table.extent(0), k = table.extent(1);
  const auto tv = table.values();
  std::vector<double> out(rows.size() * k);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    RWMN_REQUIRE(rows[r] < v, "gather_rows: row " + std::to_string(rows[r]) + " out of range " +
                             std::to_string(v));
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(rows[r] * k), k,
                out.begin() + static_cast<std::ptrdiff_t>(r * k));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.emit("gather_rows", {rows.size(), k}, std::move(out), {table},
                   [table, k, idx = std::move(idx)](std::span<const double> g) {
                     accumulate(table, [&](std::span<double> gt) {
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < k; ++j) gt[idx[r] * k + j] += g[r * k + j];
                     });
                   });
}

Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows) {
  RWMN_REQUIRE(!rows.empty(), "stack_rows needs at least one row");
  const std::size_t k = rows.front().size();
  std::vector<double> out;
  out.reserve(rows.size() * k);
  for (const Tensor& r : rows) {
    RWMN_REQUIRE(r.size() == k, "stack_rows: rows differ in size");
    const auto rv = r.values();
    out.insert(out.end(), rv.begin(), rv.end());
  }
  return tape.emit("stack_rows", {rows.size(), k}, std::move(out), rows,
                   [rows, k](std::span<const double> g) {
                     for (std::size_t r = 0; r < rows.size(); ++r) {
                       accumulate(rows[r], [&](std::span<double> gr) {
                         for (std::size_t j = 0; j < k; ++j) gr[j] += g[r * k + j];
                       });
                     }
                   });
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t same_output_extent(std::size_t in, std::size_t stride) {
  if (stride == 0) throw ParameterError("stride must be positive");
  return (in + stride - 1) / stride;
}

std::size_t same_padding_before(std::size_t in, std::size_t filter, std::size_t stride) {
  const std::size_t out = same_output_extent(in, stride);
  const std::size_t needed = (out - 1) * stride + filter;
  const std::size_t total = needed > in ? needed - in : 0;
  return total / 2;
}

Tensor conv2d_same(Tape& tape, const Tensor& input, const Tensor& filter, const Tensor& bias,
                   Stride stride) {
  if (stride.vertical == 0 || stride.horizontal == 0) {
    throw ParameterError("conv2d_same: strides must be positive");
  }
  RWMN_REQUIRE(input.rank() == 3, "conv2d_same: input must be H x W x C, got " + to_string(input.shape()));
  RWMN_REQUIRE(filter.rank() == 4,
          "conv2d_same: filter must be fv x fh x Cin x Cout, got " + to_string(filter.shape()));
  const std::size_t h = input.extent(0), w = input.extent(1), cin = input.extent(2);
  const std::size_t fv = filter.extent(0), fh = filter.extent(1), cout = filter.extent(3);
  RWMN_REQUIRE(filter.extent(2) == cin, "conv2d_same: filter expects " + std::to_string(filter.extent(2)) +
                                       " input channels, input has " + std::to_string(cin));
  RWMN_REQUIRE(bias.size() == cout, "conv2d_same: bias size " + std::to_string(bias.size()) +
                                   " != output channels " + std::to_string(cout));
  const std::size_t sv = stride.vertical, sh = stride.horizontal;
  const std::size_t oh = same_output_extent(h, sv), ow = same_output_extent(w, sh);
  const auto pad_top = static_cast<std::ptrdiff_t>(same_padding_before(h, fv, sv));
  const auto pad_left = static_cast<std::ptrdiff_t>(same_padding_before(w, fh, sh));

  // Visits every (output cell, in-bounds tap) pair.
  auto for_each_tap = [=](auto&& body) {
    for (std::size_t y = 0; y < oh; ++y) {
      const std::ptrdiff_t row0 = static_cast<std::ptrdiff_t>(y * sv) - pad_top;
      const std::size_t i0 = row0 < 0 ? static_cast<std::size_t>(-row0) : 0;
      const std::size_t i1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(fv),
                                                      static_cast<std::ptrdiff_t>(h) - row0);
      for (std::size_t x = 0; x < ow; ++x) {
        const std::ptrdiff_t col0 = static_cast<std::ptrdiff_t>(x * sh) - pad_left;
        const std::size_t j0 = col0 < 0 ? static_cast<std::size_t>(-col0) : 0;
        const std::size_t j1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(fh),
                                                        static_cast<std::ptrdiff_t>(w) - col0);
        const std::size_t out_base = (y * ow + x) * cout;
        for (std::size_t i = i0; i < i1; ++i) {
          const std::size_t row = static_cast<std::size_t>(row0 + static_cast<std::ptrdiff_t>(i));
          for (std::size_t j = j0; j < j1; ++j) {
            const std::size_t col = static_cast<std::size_t>(col0 + static_cast<std::ptrdiff_t>(j));
            body(out_base, (row * w + col) * cin, (i * fh + j) * cin * cout);
          }
        }
      }
    }
  };

  const auto iv = input.values();
  const auto fvals = filter.values();
  const auto bv = bias.values();
  std::vector<double> out(oh * ow * cout);
  for (std::size_t cell = 0; cell < oh * ow; ++cell)
    for (std::size_t o = 0; o < cout; ++o) out[cell * cout + o] = bv[o];
  for_each_tap([&](std::size_t ob, std::size_t ib, std::size_t fb) {
    for (std::size_t c = 0; c < cin; ++c) {
      const double v = iv[ib + c];
      if (v == 0.0) continue;
      const double* f = fvals.data() + fb + c * cout;
      double* o = out.data() + ob;
      for (std::size_t k = 0; k < cout; ++k) o[k] += v * f[k];
    }
  });

  return tape.emit(
      "conv2d_same", {oh, ow, cout}, std::move(out), {input, filter, bias},
      [input, filter, bias, for_each_tap, cin, cout, oh, ow](std::span<const double> g) {
        const auto iv = input.values();
        const auto fvals = filter.values();
        accumulate(input, [&](std::span<double> gi) {
          for_each_tap([&](std::size_t ob, std::size_t ib, std::size_t fb) {
            const double* go = g.data() + ob;
            for (std::size_t c = 0; c < cin; ++c) {
              const double* f = fvals.data() + fb + c * cout;
              double s = 0.0;
              for (std::size_t k = 0; k < cout; ++k) s += go[k] * f[k];
              gi[ib + c] += s;
            }
          });
        });
        accumulate(filter, [&](std::span<double> gf) {
          for_each_tap([&](std::size_t ob, std::size_t ib, std::size_t fb) {
            const double* go = g.data() + ob;
            for (std::size_t c = 0; c < cin; ++c) {
              const double v = iv[ib + c];
              if (v == 0.0) continue;
              double* f = gf.data() + fb + c * cout;
              for (std::size_t k = 0; k < cout; ++k) f[k] += v * go[k];
            }
          });
        });
        accumulate(bias, [&](std::span<double> gb) {
          for (std::size_t cell = 0; cell < oh * ow; ++cell)
            for (std::size_t k = 0; k < cout; ++k) gb[k] += g[cell * cout + k];
        });
      });
}

// ---------------------------------------------------------------------------
// Finite differences

namespace {

double evaluate_loss(const std::function<Tensor(Tape&)>& loss) {
  Tape probe(Precision::kFloat64, /*recording=*/false);
  Tensor value = loss(probe);
  if (value.size() != 1) throw UsageError("grad_check: loss is not scalar");
  return value.item();
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor(Tape&)>& loss,
                           std::span<const Tensor> inputs, double step) {
  GradCheckResult result;
  std::vector<Tensor> leaves(inputs.begin(), inputs.end());
  std::vector<std::vector<double>> saved_grads;
  for (Tensor& t : leaves) {
    if (!t.requires_grad()) throw UsageError("grad_check: every input must require grad");
    saved_grads.emplace_back(t.grad().begin(), t.grad().end());
    t.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  try {
    Tape tape(Precision::kFloat64);
    Tensor value = loss(tape);
    tape.backward(value);
  } catch (const NumericError& e) {
    result.finite = false;
    result.failure = std::string("analytic pass: ") + e.what();
  }
  for (Tensor& t : leaves) analytic.emplace_back(t.grad().begin(), t.grad().end());

  for (std::size_t t = 0; t < leaves.size() && result.finite; ++t) {
    std::span<double> values = leaves[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      double plus = 0.0, minus = 0.0;
      try {
        values[i] = original + step;
        plus = evaluate_loss(loss);
        values[i] = original - step;
        minus = evaluate_loss(loss);
      } catch (const NumericError& e) {
        values[i] = original;
        result.finite = false;
        result.worst_input = t;
        result.worst_index = i;
        result.failure = "input " + std::to_string(t) + " coordinate " + std::to_string(i) + ": " +
                         e.what();
        break;
      }
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[t][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (!std::isfinite(numeric)) {
        result.finite = false;
        result.worst_input = t;
        result.worst_index = i;
        result.failure = "non-finite difference at input " + std::to_string(t) + " coordinate " +
                         std::to_string(i);
        break;
      }
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = t;
        result.worst_index = i;
      }
    }
  }

  for (std::size_t t = 0; t < leaves.size(); ++t) {
    std::span<double> g = leaves[t].mutable_grad();
    std::copy(saved_grads[t].begin(), saved_grads[t].end(), g.begin());
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                           const Tensor& point, double step) {
  Tensor x = point.clone(true);
  const Tensor inputs[] = {x};
  return grad_check([&](Tape& tape) { return f(tape, x); }, inputs, step);
}

}  // namespace rwmn
