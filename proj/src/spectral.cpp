#include "pcqa/spectral.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

#include "pcqa/error.hpp"

namespace pcqa::spectral {

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

FftPlan::FftPlan(std::size_t n) : n_(n) {
  if (!is_power_of_two(n)) throw UsageError("FftPlan: length " + std::to_string(n) +
                                            " is not a power of two");
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < n) ++bits;
  bitrev_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b)
      if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
    bitrev_[i] = r;
  }
  twiddles_.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    twiddles_[k] = {std::cos(angle), std::sin(angle)};
  }
}

void FftPlan::execute(std::span<Complex> data, bool inverse) const {
  if (data.size() != n_) throw UsageError("FftPlan: signal length does not match plan");
  for (std::size_t i = 0; i < n_; ++i)
    if (i < bitrev_[i]) std::swap(data[i], data[bitrev_[i]]);
  for (std::size_t len = 2; len <= n_; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n_ / len;
    for (std::size_t start = 0; start < n_; start += len) {
      for (std::size_t j = 0; j < half; ++j) {
        Complex w = twiddles_[j * step];
        if (inverse) w = std::conj(w);
        const Complex u = data[start + j];
        const Complex v = data[start + j + half] * w;
        data[start + j] = u + v;
        data[start + j + half] = u - v;
      }
    }
  }
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(n_);
    for (auto& x : data) x *= scale;
  }
}

namespace {

std::shared_ptr<const FftPlan> cached_plan(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::shared_ptr<const FftPlan>> plans;
  std::lock_guard lock(mu);
  auto& slot = plans[n];
  if (!slot) slot = std::make_shared<const FftPlan>(n);
  return slot;
}

ComplexSignal direct(std::span<const Complex> x, bool inverse) {
  const std::size_t n = x.size();
  ComplexSignal out(n);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t k = 0; k < n; ++k) {
    Complex acc{0.0, 0.0};
    for (std::size_t t = 0; t < n; ++t) {
      // Reduce k*t mod n first so the angle stays small and accurate.
      const double angle = sign * 2.0 * std::numbers::pi *
                           static_cast<double>((k * t) % n) / static_cast<double>(n);
      acc += x[t] * Complex(std::cos(angle), std::sin(angle));
    }
    out[k] = inverse ? acc / static_cast<double>(n) : acc;
  }
  return out;
}

}  // namespace

ComplexSignal dft(std::span<const Complex> signal) {
  if (signal.empty()) throw UsageError("dft: empty input");
  return direct(signal, false);
}

ComplexSignal fft(std::span<const Complex> signal) {
  if (signal.empty()) throw UsageError("fft: empty input");
  if (!is_power_of_two(signal.size())) return direct(signal, false);
  ComplexSignal out(signal.begin(), signal.end());
  cached_plan(out.size())->execute(out);
  return out;
}

ComplexSignal fft(std::span<const double> signal) {
  ComplexSignal c(signal.begin(), signal.end());
  return fft(std::span<const Complex>(c));
}

ComplexSignal ifft(std::span<const Complex> spectrum) {
  if (spectrum.empty()) throw UsageError("ifft: empty input");
  if (!is_power_of_two(spectrum.size())) return direct(spectrum, true);
  ComplexSignal out(spectrum.begin(), spectrum.end());
  cached_plan(out.size())->execute(out, true);
  return out;
}

std::vector<double> magnitude(std::span<const Complex> spectrum) {
  std::vector<double> out(spectrum.size());
  for (std::size_t i = 0; i < spectrum.size(); ++i) out[i] = std::abs(spectrum[i]);
  return out;
}

}  // namespace pcqa::spectral
