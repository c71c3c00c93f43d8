#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace rwmn::fft {

bool is_power_of_two(std::size_t n) noexcept;

// In-place iterative radix-2 transform; size must be a power of two.
// The inverse includes the 1/N factor.
void transform(std::span<std::complex<double>> data, bool inverse);

// out[k] = sum_i a[i] * b[(k - i) mod D]. Uses the FFT when D is a power of
// two, direct summation otherwise.
std::vector<double> circular_convolve(std::span<const double> a, std::span<const double> b);

// out[i] = sum_k g[k] * b[(k - i) mod D]: the adjoint of convolving with b.
std::vector<double> circular_correlate(std::span<const double> g, std::span<const double> b);

}  // namespace rwmn::fft
