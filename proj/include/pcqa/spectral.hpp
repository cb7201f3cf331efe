#pragma once

#include <complex>
#include <span>
#include <vector>

namespace pcqa::spectral {

using Complex = std::complex<double>;
using ComplexSignal = std::vector<Complex>;

/// Precomputed radix-2 tables for one power-of-two length. Immutable after
/// construction, so a plan may be shared between threads.
class FftPlan {
 public:
  explicit FftPlan(std::size_t n);

  std::size_t size() const noexcept { return n_; }

  /// In-place unnormalized transform. `inverse` flips the exponent sign and
  /// divides by N.
  void execute(std::span<Complex> data, bool inverse = false) const;

 private:
  std::size_t n_;
  std::vector<std::size_t> bitrev_;
  std::vector<Complex> twiddles_;  // exp(-2 pi i k / n), k < n/2
};

bool is_power_of_two(std::size_t n) noexcept;

/// X[k] = sum_n x[n] exp(-2 pi i k n / N). Radix-2 for powers of two,
/// direct O(N^2) evaluation otherwise. Throws UsageError on empty input.
ComplexSignal fft(std::span<const Complex> signal);
ComplexSignal fft(std::span<const double> signal);

/// Inverse of fft (includes the 1/N factor).
ComplexSignal ifft(std::span<const Complex> spectrum);

/// Direct O(N^2) DFT.
ComplexSignal dft(std::span<const Complex> signal);

std::vector<double> magnitude(std::span<const Complex> spectrum);

/// Rotates right by floor(N/2) so index 0 lands at floor(N/2).
template <typename T>
std::vector<T> fftshift(std::span<const T> seq) {
  const std::size_t n = seq.size();
  std::vector<T> out(n);
  const std::size_t shift = n / 2;
  for (std::size_t i = 0; i < n; ++i) out[(i + shift) % n] = seq[i];
  return out;
}

template <typename T>
std::vector<T> fftshift(const std::vector<T>& seq) {
  return fftshift(std::span<const T>(seq));
}

}  // namespace pcqa::spectral
