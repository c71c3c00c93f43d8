#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "rwmn/error.hpp"
#include "rwmn/fft.hpp"
#include "rwmn/rng.hpp"

using namespace rwmn;

namespace {

std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

std::vector<std::complex<double>> naive_dft(const std::vector<std::complex<double>>& x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < n; ++j) {
      const double angle = -2.0 * std::numbers::pi * static_cast<double>(j * k % n) / static_cast<double>(n);
      out[k] += x[j] * std::polar(1.0, angle);
    }
  }
  return out;
}

std::vector<double> naive_convolve(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  std::vector<double> out(n, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i) out[k] += a[i] * b[(k + n - i) % n];
  return out;
}

}  // namespace

TEST(Fft, PowerOfTwo) {
  EXPECT_TRUE(fft::is_power_of_two(1));
  EXPECT_TRUE(fft::is_power_of_two(4096));
  EXPECT_FALSE(fft::is_power_of_two(0));
  EXPECT_FALSE(fft::is_power_of_two(300));
}

TEST(Fft, MatchesNaiveDft) {
  Rng rng(1);
  for (std::size_t n : {1u, 2u, 8u, 64u}) {
    std::vector<std::complex<double>> x(n);
    const auto re = random_vector(n, rng), im = random_vector(n, rng);
    for (std::size_t i = 0; i < n; ++i) x[i] = {re[i], im[i]};
    const auto expect = naive_dft(x);
    auto got = x;
    fft::transform(got, false);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(got[i].real(), expect[i].real(), 1e-9);
      EXPECT_NEAR(got[i].imag(), expect[i].imag(), 1e-9);
    }
    fft::transform(got, true);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(std::abs(got[i] - x[i]), 0.0, 1e-12);
  }
}

TEST(Fft, RejectsNonPowerOfTwo) {
  std::vector<std::complex<double>> x(6);
  EXPECT_THROW(fft::transform(x, false), Error);
}

TEST(Fft, CircularConvolutionMatchesDirectSum) {
  Rng rng(2);
  for (std::size_t n : {1u, 5u, 8u, 12u, 128u}) {
    const auto a = random_vector(n, rng), b = random_vector(n, rng);
    const auto got = fft::circular_convolve(a, b);
    const auto expect = naive_convolve(a, b);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(got[i], expect[i], 1e-9);
  }
}

TEST(Fft, CorrelationIsTheAdjointOfConvolution) {
  // <conv(a, b), g> == <a, corr(g, b)> for every a, g.
  Rng rng(3);
  for (std::size_t n : {7u, 16u}) {
    const auto a = random_vector(n, rng), b = random_vector(n, rng), g = random_vector(n, rng);
    const auto conv = fft::circular_convolve(a, b);
    const auto corr = fft::circular_correlate(g, b);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      lhs += conv[i] * g[i];
      rhs += a[i] * corr[i];
    }
    EXPECT_NEAR(lhs, rhs, 1e-9);
  }
}
