#pragma once

// Dense real tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Forward ops never mutate
// their inputs; the only in-place writes are gradient accumulation during
// Tape::backward and explicit leaf updates (optimizers, finite differences).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rwmn {

enum class Precision : std::uint8_t { kFloat32 = 32, kFloat64 = 64 };

using Shape = std::vector<std::size_t>;

std::size_t num_elements(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor {
 public:
  // An undefined tensor; defined() is false.
  Tensor() = default;
  // Zero-filled tensor.
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor filled(Shape shape, double value);

  bool defined() const noexcept { return storage_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const;

  bool requires_grad() const;

  std::span<const double> values() const;
  // Direct write access. Only for leaves: optimizer steps, initialization
  // and finite-difference probes.
  std::span<double> mutable_values();

  // Empty unless requires_grad().
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  double item() const;
  double operator[](std::size_t flat_index) const { return values()[flat_index]; }
  double at(std::initializer_list<std::size_t> index) const;

  // Deep copy with fresh storage.
  Tensor clone(bool requires_grad) const;
  Tensor clone() const { return clone(requires_grad()); }

  bool shares_storage_with(const Tensor& other) const noexcept {
    return storage_ == other.storage_;
  }

 private:
  struct Storage;
  std::shared_ptr<Storage> storage_;
};

// Propagates the output gradient of one recorded op into its inputs.
using BackwardFn = std::function<void(std::span<const double> output_grad)>;

// Ordered record of differentiable ops. Single owner; not thread-safe.
class Tape {
 public:
  // A non-recording tape evaluates ops without keeping anything for
  // backward; outputs never require grad. Used for inference.
  explicit Tape(Precision precision = Precision::kFloat64, bool recording = true)
      : precision_(precision), recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Precision precision() const noexcept { return precision_; }
  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return records_.size(); }

  // Builds an op output from freshly computed values. Values are rounded to
  // the tape precision and checked for finiteness. The op is recorded only if
  // some input requires a gradient; `backward` is then called exactly once
  // per Tape::backward, after every consumer of the output has run.
  Tensor emit(std::string_view op, Shape shape, std::vector<double> values,
              std::initializer_list<Tensor> inputs, BackwardFn backward);
  Tensor emit(std::string_view op, Shape shape, std::vector<double> values,
              const std::vector<Tensor>& inputs, BackwardFn backward);

  // Accumulates d(loss)/d(leaf) into every requires_grad leaf reached from
  // `loss`. Intermediate gradients are reset first, so calling twice without
  // zeroing the leaves doubles their gradients.
  void backward(const Tensor& loss);

  void clear() noexcept { records_.clear(); }

  // Op names in record order.
  std::vector<std::string> op_names() const;

 private:
  struct Record {
    std::string op;
    Tensor output;
    BackwardFn backward;
  };

  Tensor emit_impl(std::string_view op, Shape shape, std::vector<double> values,
                   bool any_input_requires_grad, BackwardFn backward);

  Precision precision_;
  bool recording_;
  std::vector<Record> records_;
};

// ---------------------------------------------------------------------------
// Ops. All take the tape first; none mutate their inputs.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);
Tensor reshape(Tape& tape, const Tensor& a, Shape shape);
// (a, b, c) -> (a, c, b)
Tensor swap_last_axes(Tape& tape, const Tensor& a);

// Elementwise on equal shapes, or with either operand a one-element tensor.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
// Adds `bias` (length = last extent of x) to every row of x.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);

Tensor dot(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sum(Tape& tape, const Tensor& x);
Tensor sum_over_axis(Tape& tape, const Tensor& x, std::size_t axis);
Tensor mean_over_axis(Tape& tape, const Tensor& x, std::size_t axis);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor log(Tape& tape, const Tensor& x);

enum class SoftmaxAxis : std::uint8_t { kAll, kLast };
Tensor softmax(Tape& tape, const Tensor& x, SoftmaxAxis over = SoftmaxAxis::kAll);

// One entry as a rank-0 tensor.
Tensor pick(Tape& tape, const Tensor& x, std::size_t flat_index);
// Rows of a rank-2 table; out-of-range indices are a DimensionError.
Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::size_t> rows);
// Stacks equally sized tensors into a (count x size) matrix.
Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows);

struct Stride {
  std::size_t vertical = 1;
  std::size_t horizontal = 1;
};

// ceil(in / stride): the SAME-padding output extent.
std::size_t same_output_extent(std::size_t in, std::size_t stride);
// Zero rows inserted before the first input row under SAME padding; the
// remainder (the larger half) goes after the last one.
std::size_t same_padding_before(std::size_t in, std::size_t filter, std::size_t stride);

// Cross-correlation with SAME zero padding.
// input: H x W x C_in, filter: f_v x f_h x C_in x C_out, bias: C_out.
Tensor conv2d_same(Tape& tape, const Tensor& input, const Tensor& filter,
                   const Tensor& bias, Stride stride);

// ---------------------------------------------------------------------------
// Finite-difference checking.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  bool finite = true;
  std::string failure;  // set when a non-finite value was hit

  bool passed(double tolerance) const { return finite && max_rel_error <= tolerance; }
};

// Compares the tape gradient of a scalar loss with central differences over
// every coordinate of every tensor in `inputs` (which must require grad).
// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
// The loss is always evaluated on float64 tapes. Existing gradients on the
// inputs are left untouched.
GradCheckResult grad_check(const std::function<Tensor(Tape&)>& loss,
                           std::span<const Tensor> inputs, double step = 1e-5);

// Single-argument form: `f` is evaluated at a copy of `point`.
GradCheckResult grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                           const Tensor& point, double step = 1e-5);

}  // namespace rwmn
