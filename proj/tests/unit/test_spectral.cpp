#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "pcqa/error.hpp"
#include "pcqa/spectral.hpp"

using namespace pcqa::spectral;

namespace {

ComplexSignal random_signal(std::size_t n, std::mt19937_64& rng, bool real = false) {
  std::normal_distribution<double> d;
  ComplexSignal s(n);
  for (auto& v : s) v = {d(rng), real ? 0.0 : d(rng)};
  return s;
}

double max_rel(const ComplexSignal& a, const ComplexSignal& b) {
  double scale = 0, err = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
    err = std::max(err, std::abs(a[i] - b[i]));
  }
  return err / std::max(scale, 1e-300);
}

}  // namespace

TEST_SUITE("spectral") {
  TEST_CASE("impulse and constant") {
    const ComplexSignal imp{1, 0, 0, 0};
    for (const auto& v : fft(imp)) CHECK(std::abs(v - Complex(1, 0)) < 1e-15);
    const std::vector<double> c(8, 2.5);
    const auto x = fft(std::span<const double>(c));
    CHECK(std::abs(x[0] - Complex(20, 0)) < 1e-12);
    for (std::size_t k = 1; k < 8; ++k) CHECK(std::abs(x[k]) < 1e-12);
  }

  TEST_CASE("fast path equals the direct dft for every power of two up to 1024") {
    std::mt19937_64 rng(1);
    for (std::size_t n = 1; n <= 1024; n *= 2) {
      const auto s = random_signal(n, rng);
      CHECK(max_rel(fft(s), oracle::dft(s)) <= 1e-9);
    }
  }

  TEST_CASE("library dft agrees with the long double oracle, including odd lengths") {
    std::mt19937_64 rng(2);
    for (std::size_t n : {3, 5, 12, 100}) {
      const auto s = random_signal(n, rng);
      CHECK(max_rel(dft(s), oracle::dft(s)) <= 1e-10);
      CHECK(max_rel(fft(s), oracle::dft(s)) <= 1e-10);
    }
  }

  TEST_CASE("parseval, linearity and inverse") {
    std::mt19937_64 rng(3);
    const auto x = random_signal(256, rng), y = random_signal(256, rng);
    const auto X = fft(x), Y = fft(y);
    double ex = 0, eX = 0;
    for (std::size_t i = 0; i < 256; ++i) {
      ex += std::norm(x[i]);
      eX += std::norm(X[i]);
    }
    CHECK(std::abs(ex - eX / 256) / ex <= 1e-9);

    const Complex a(0.7, -0.2), b(-1.3, 0.4);
    ComplexSignal mix(256);
    for (std::size_t i = 0; i < 256; ++i) mix[i] = a * x[i] + b * y[i];
    ComplexSignal lin(256);
    for (std::size_t i = 0; i < 256; ++i) lin[i] = a * X[i] + b * Y[i];
    CHECK(max_rel(fft(mix), lin) <= 1e-9);
    CHECK(max_rel(ifft(X), x) <= 1e-9);
  }

  TEST_CASE("magnitude and conjugate symmetry") {
    const ComplexSignal z{{3, 4}, {0, 0}};
    const auto m = magnitude(z);
    CHECK(m[0] == 5.0);
    CHECK(m[1] == 0.0);
    std::mt19937_64 rng(4);
    const auto s = random_signal(64, rng, true);
    const auto mag = magnitude(fft(s));
    for (std::size_t k = 1; k < 64; ++k) CHECK(std::abs(mag[k] - mag[64 - k]) <= 1e-9 * (1 + mag[k]));
  }

  TEST_CASE("fftshift rotation") {
    CHECK(fftshift(std::vector<char>{'a', 'b', 'c', 'd'}) == std::vector<char>{'c', 'd', 'a', 'b'});
    CHECK(fftshift(std::vector<int>{7}) == std::vector<int>{7});
    CHECK(fftshift(std::vector<int>{1, 2, 3, 4, 5}) == std::vector<int>{4, 5, 1, 2, 3});
    const std::vector<int> v{1, 2, 3, 4, 5, 6};
    CHECK(fftshift(fftshift(v)) == v);
  }

  TEST_CASE("empty input is rejected") {
    CHECK_THROWS_AS(fft(ComplexSignal{}), pcqa::UsageError);
    CHECK(is_power_of_two(1024));
    CHECK_FALSE(is_power_of_two(0));
    CHECK_FALSE(is_power_of_two(96));
  }
}
