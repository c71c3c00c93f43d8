#include "rwmn/fft.hpp"

#include <cmath>
#include <numbers>
#include <utility>

#include "rwmn/error.hpp"

namespace rwmn::fft {

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

void transform(std::span<std::complex<double>> data, bool inverse) {
  const std::size_t n = data.size();
  if (!is_power_of_two(n)) throw ParameterError("FFT size " + std::to_string(n) + " is not a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i], data[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> step(std::cos(angle), std::sin(angle));
    for (std::size_t start = 0; start < n; start += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = data[start + k];
        const auto v = data[start + k + len / 2] * w;
        data[start + k] = u + v;
        data[start + k + len / 2] = u - v;
        w *= step;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& c : data) c *= inv;
  }
}

namespace {

std::vector<double> via_fft(std::span<const double> a, std::span<const double> b, bool conjugate_b) {
  const std::size_t n = a.size();
  std::vector<std::complex<double>> fa(a.begin(), a.end());
  std::vector<std::complex<double>> fb(b.begin(), b.end());
  transform(fa, false);
  transform(fb, false);
  for (std::size_t i = 0; i < n; ++i) fa[i] *= conjugate_b ? std::conj(fb[i]) : fb[i];
  transform(fa, true);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fa[i].real();
  return out;
}

void check_sizes(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw DimensionError("circular convolution needs equal non-empty lengths, got " +
                         std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
}

}  // namespace

std::vector<double> circular_convolve(std::span<const double> a, std::span<const double> b) {
  check_sizes(a, b);
  const std::size_t n = a.size();
  if (is_power_of_two(n)) return via_fft(a, b, false);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i] == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) out[(i + j) % n] += a[i] * b[j];
  }
  return out;
}

std::vector<double> circular_correlate(std::span<const double> g, std::span<const double> b) {
  check_sizes(g, b);
  const std::size_t n = g.size();
  if (is_power_of_two(n)) return via_fft(g, b, true);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += g[(i + j) % n] * b[j];
  return out;
}

}  // namespace rwmn::fft
