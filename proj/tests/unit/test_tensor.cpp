#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "rwmn/error.hpp"
#include "rwmn/rng.hpp"
#include "rwmn/tensor.hpp"

using namespace rwmn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::normal_distribution<double> normal;
  std::vector<double> v(num_elements(shape));
  for (double& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Direct SAME cross-correlation: explicit zero-padded copy, then a plain
// strided window sum.
std::vector<double> naive_conv(const Tensor& x, const Tensor& f, const Tensor& b, std::size_t sv, std::size_t sh) {
  const std::size_t h = x.extent(0), w = x.extent(1), cin = x.extent(2);
  const std::size_t fv = f.extent(0), fh = f.extent(1), cout = f.extent(3);
  const std::size_t oh = (h + sv - 1) / sv, ow = (w + sh - 1) / sh;
  const std::size_t pad_v = ((oh - 1) * sv + fv > h ? (oh - 1) * sv + fv - h : 0);
  const std::size_t pad_h = ((ow - 1) * sh + fh > w ? (ow - 1) * sh + fh - w : 0);
  const std::size_t top = pad_v / 2, left = pad_h / 2;
  const std::size_t ph = h + pad_v, pw = w + pad_h;
  std::vector<double> padded(ph * pw * cin, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < cin; ++c) padded[((i + top) * pw + j + left) * cin + c] = x.at({i, j, c});
  std::vector<double> out(oh * ow * cout);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t z = 0; z < ow; ++z)
      for (std::size_t o = 0; o < cout; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < fv; ++i)
          for (std::size_t j = 0; j < fh; ++j)
            for (std::size_t c = 0; c < cin; ++c)
              s += padded[((y * sv + i) * pw + z * sh + j) * cin + c] * f.at({i, j, c, o});
        out[(y * ow + z) * cout + o] = s;
      }
  return out;
}

}  // namespace

TEST(Tensor, ConstructionAndAccess) {
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at({1, 2}), 6.0);
  EXPECT_FALSE(t.requires_grad());
  EXPECT_TRUE(t.grad().empty());
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_FALSE(Tensor().defined());
}

TEST(Tensor, CloneSharesNoStorage) {
  Tensor a({3}, {1, 2, 3}, true);
  Tensor b = a.clone();
  EXPECT_FALSE(a.shares_storage_with(b));
  b.mutable_values()[0] = 9;
  EXPECT_EQ(a[0], 1.0);
  EXPECT_TRUE(b.requires_grad());
}

TEST(Ops, MatmulMatchesNaive) {
  Rng rng(1);
  const Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  Tape tape;
  const Tensor c = matmul(tape, a, b);
  ASSERT_EQ(c.shape(), (Shape{4, 3}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a.at({i, k}) * b.at({k, j});
      EXPECT_NEAR(c.at({i, j}), s, 1e-12);
    }
  EXPECT_THROW(matmul(tape, a, a), DimensionError);
}

TEST(Ops, ElementwiseAndBroadcast) {
  Tape tape;
  const Tensor a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {5, 6, 7, 8}), s = Tensor::scalar(2);
  EXPECT_EQ(add(tape, a, b).values()[3], 12.0);
  EXPECT_EQ(sub(tape, a, b).values()[0], -4.0);
  EXPECT_EQ(mul(tape, a, b).values()[1], 12.0);
  EXPECT_EQ(mul(tape, s, a).values()[2], 6.0);
  EXPECT_EQ(scale(tape, a, 0.5).values()[1], 1.0);
  EXPECT_THROW(add(tape, a, Tensor({3}, {1, 2, 3})), DimensionError);
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}), bias({3}, {10, 20, 30});
  EXPECT_EQ(add_bias(tape, x, bias).values()[4], 25.0);
}

TEST(Ops, Reductions) {
  Tape tape;
  const Tensor x({2, 3, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  EXPECT_EQ(sum(tape, x).item(), 78.0);
  const Tensor s0 = sum_over_axis(tape, x, 0);
  EXPECT_EQ(s0.shape(), (Shape{3, 2}));
  EXPECT_EQ(s0.values()[0], 8.0);
  const Tensor s1 = sum_over_axis(tape, x, 1);
  EXPECT_EQ(s1.shape(), (Shape{2, 2}));
  EXPECT_EQ(s1.values()[1], 2.0 + 4 + 6);
  const Tensor m2 = mean_over_axis(tape, x, 2);
  EXPECT_EQ(m2.shape(), (Shape{2, 3}));
  EXPECT_EQ(m2.values()[5], 11.5);
  EXPECT_EQ(dot(tape, Tensor::vector({1, 2, 3}), Tensor::vector({4, 5, 6})).item(), 32.0);
}

TEST(Ops, SoftmaxSumsToOneAndIsShiftInvariant) {
  Rng rng(2);
  const Tensor x = random_tensor({3, 4}, rng);
  Tape tape;
  const Tensor all = softmax(tape, x);
  double total = 0;
  for (double v : all.values()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  const Tensor last = softmax(tape, x, SoftmaxAxis::kLast);
  for (std::size_t r = 0; r < 3; ++r) {
    double row = 0;
    for (std::size_t c = 0; c < 4; ++c) row += last.at({r, c});
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
  const Tensor shifted = softmax(tape, add(tape, x, Tensor::scalar(1000.0)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(shifted[i], all[i], 1e-12);
}

TEST(Ops, ShapeOps) {
  Tape tape;
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor t = transpose(tape, x);
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  EXPECT_EQ(t.at({2, 1}), 6.0);
  EXPECT_THROW(reshape(tape, x, {4}), DimensionError);
  const Tensor y({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor s = swap_last_axes(tape, y);
  EXPECT_EQ(s.shape(), (Shape{1, 3, 2}));
  EXPECT_EQ(s.at({0, 2, 0}), 3.0);
  const std::size_t rows[] = {1, 1, 0};
  const Tensor g = gather_rows(tape, x, rows);
  EXPECT_EQ(g.at({1, 2}), 6.0);
  EXPECT_EQ(g.at({2, 0}), 1.0);
  const std::size_t bad[] = {2};
  EXPECT_THROW(gather_rows(tape, x, bad), DimensionError);
  const Tensor st = stack_rows(tape, {Tensor::vector({1, 2}), Tensor::vector({3, 4})});
  EXPECT_EQ(st.shape(), (Shape{2, 2}));
  EXPECT_EQ(pick(tape, x, 4).item(), 5.0);
}

TEST(Conv, SameExtentAndPadding) {
  EXPECT_EQ(same_output_extent(10, 3), 4u);
  EXPECT_EQ(same_output_extent(1, 50), 1u);
  EXPECT_EQ(same_padding_before(1558, 40, 30), 6u);
  EXPECT_EQ(same_padding_before(5, 1, 1), 0u);
  EXPECT_EQ(same_padding_before(5, 3, 1), 1u);
}

TEST(Conv, MatchesNaiveOracle) {
  Rng rng(3);
  struct Case {
    std::size_t h, w, cin, fv, fh, cout, sv, sh;
  };
  for (const Case c : {Case{9, 4, 1, 3, 4, 2, 2, 1}, Case{12, 5, 2, 4, 5, 3, 1, 1}, Case{7, 6, 3, 3, 2, 2, 3, 2},
                       Case{5, 4, 1, 8, 4, 2, 4, 1}, Case{1, 3, 1, 40, 3, 1, 30, 1}}) {
    const Tensor x = random_tensor({c.h, c.w, c.cin}, rng);
    const Tensor f = random_tensor({c.fv, c.fh, c.cin, c.cout}, rng);
    const Tensor b = random_tensor({c.cout}, rng);
    Tape tape;
    const Tensor y = conv2d_same(tape, x, f, b, {c.sv, c.sh});
    const auto expect = naive_conv(x, f, b, c.sv, c.sh);
    ASSERT_EQ(y.size(), expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-10);
  }
}

TEST(Conv, RejectsMismatchedChannels) {
  Tape tape;
  EXPECT_THROW(conv2d_same(tape, Tensor({4, 2, 2}), Tensor({2, 2, 3, 1}), Tensor({1}), {1, 1}), DimensionError);
}

TEST(Tape, BackwardNeedsScalar) {
  Tape tape;
  const Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(tape.backward(scale(tape, x, 2.0)), UsageError);
}

TEST(Tape, AccumulatesLeafGradients) {
  Tape tape;
  Tensor x({2}, {1, 2}, true);
  const Tensor loss = dot(tape, x, x);
  tape.backward(loss);
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  tape.backward(loss);
  EXPECT_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Tape, NonRecordingTapeKeepsNothing) {
  Tape tape(Precision::kFloat64, false);
  const Tensor x({2}, {1, 2}, true);
  const Tensor y = scale(tape, x, 3.0);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, Float32RoundsValues) {
  Tape tape(Precision::kFloat32);
  const Tensor y = scale(tape, Tensor::scalar(1.0), 0.1);
  EXPECT_EQ(y.item(), static_cast<double>(0.1f));
  Tape t64;
  EXPECT_EQ(scale(t64, Tensor::scalar(1.0), 0.1).item(), 0.1);
}

TEST(Tape, NonFiniteForwardThrows) {
  Tape tape;
  EXPECT_THROW(log(tape, Tensor::vector({1.0, 0.0})), NumericError);
  EXPECT_THROW(scale(tape, Tensor::scalar(std::numeric_limits<double>::max()), 10.0), NumericError);
}

TEST(GradCheck, DetectsWrongGradient) {
  const Tensor x({3}, {0.5, -0.2, 0.9}, true);
  const Tensor inputs[] = {x};
  const auto good = grad_check([&](Tape& t) { return sum(t, mul(t, x, x)); }, inputs);
  EXPECT_TRUE(good.passed(1e-6));
  // A loss whose graph hides the dependency on x: analytic gradient zero.
  const auto bad = grad_check(
      [&](Tape& t) {
        const auto v = x.values();
        return Tensor::scalar(v[0] * v[0] + v[1] + v[2]);
      },
      inputs);
  EXPECT_FALSE(bad.passed(1e-4));
}

TEST(GradCheck, LeavesExistingGradientsUntouched) {
  Tensor x({2}, {1, 2}, true);
  x.mutable_grad()[0] = 7.0;
  const Tensor inputs[] = {x};
  grad_check([&](Tape& t) { return dot(t, x, x); }, inputs);
  EXPECT_EQ(x.grad()[0], 7.0);
}
