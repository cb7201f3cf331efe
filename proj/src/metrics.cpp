#include "pcqa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pcqa/error.hpp"

namespace pcqa::eval {

namespace {

void check_pair(std::span<const double> x, std::span<const double> y, std::size_t min_len,
                const char* op) {
  if (x.size() != y.size())
    throw UsageError(std::string(op) + ": length mismatch (" + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()) + ")");
  if (x.size() < min_len)
    throw UsageError(std::string(op) + ": needs at least " + std::to_string(min_len) + " samples");
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double e : v) s += e;
  return s / static_cast<double>(v.size());
}

}  // namespace

double plcc(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 2, "plcc");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0))
    throw NumericError("plcc: degenerate variance (constant input)");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> fractional_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double srocc(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 2, "srocc");
  const auto rx = fractional_ranks(x);
  const auto ry = fractional_ranks(y);
  try {
    return plcc(rx, ry);
  } catch (const NumericError&) {
    throw NumericError("srocc: all values tied in one input");
  }
}

double rmse(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 1, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s / static_cast<double>(x.size()));
}

double Logistic4::operator()(double x) const {
  const double scale = std::max(std::abs(beta[3]), 1e-12);
  return (beta[0] - beta[1]) / (1.0 + std::exp(-(x - beta[2]) / scale)) + beta[1];
}

namespace {

// Solves the 4x4 system a * d = g in place (Gaussian elimination with
// partial pivoting). Returns false when singular.
bool solve4(std::array<std::array<double, 4>, 4> a, std::array<double, 4> g,
            std::array<double, 4>& d) {
  for (int c = 0; c < 4; ++c) {
    int piv = c;
    for (int r = c + 1; r < 4; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    if (std::abs(a[piv][c]) < 1e-300) return false;
    std::swap(a[c], a[piv]);
    std::swap(g[c], g[piv]);
    for (int r = c + 1; r < 4; ++r) {
      const double f = a[r][c] / a[c][c];
      for (int k = c; k < 4; ++k) a[r][k] -= f * a[c][k];
      g[r] -= f * g[c];
    }
  }
  for (int r = 3; r >= 0; --r) {
    double s = g[r];
    for (int k = r + 1; k < 4; ++k) s -= a[r][k] * d[k];
    d[r] = s / a[r][r];
  }
  return true;
}

}  // namespace

Logistic4 fit_logistic(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 4, "fit_logistic");
  const auto [xmin, xmax] = std::minmax_element(x.begin(), x.end());
  const auto [ymin, ymax] = std::minmax_element(y.begin(), y.end());
  Logistic4 f;
  f.beta = {*ymax, *ymin, mean_of(x), std::max((*xmax - *xmin) / 4.0, 1e-6)};
  auto sse = [&](const Logistic4& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (y[i] - m(x[i])) * (y[i] - m(x[i]));
    return s;
  };
  double lambda = 1e-3;
  double err = sse(f);
  for (int it = 0; it < 200; ++it) {
    std::array<std::array<double, 4>, 4> jtj{};
    std::array<double, 4> jtr{};
    const double s = std::max(std::abs(f.beta[3]), 1e-12);
    const double sign = f.beta[3] < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double z = (x[i] - f.beta[2]) / s;
      const double sig = 1.0 / (1.0 + std::exp(-z));
      const double amp = f.beta[0] - f.beta[1];
      const double dsig = sig * (1.0 - sig);
      const std::array<double, 4> jac = {sig, 1.0 - sig, -amp * dsig / s, -amp * dsig * z / s * sign};
      const double r = y[i] - f(x[i]);
      for (int a = 0; a < 4; ++a) {
        jtr[a] += jac[a] * r;
        for (int b = 0; b < 4; ++b) jtj[a][b] += jac[a] * jac[b];
      }
    }
    bool improved = false;
    while (lambda < 1e12) {
      auto damped = jtj;
      for (int a = 0; a < 4; ++a) damped[a][a] += lambda * (jtj[a][a] + 1e-12);
      std::array<double, 4> step{};
      if (solve4(damped, jtr, step)) {
        Logistic4 cand = f;
        for (int a = 0; a < 4; ++a) cand.beta[a] += step[a];
        const double e = sse(cand);
        if (std::isfinite(e) && e < err) {
          const double gain = err - e;
          f = cand;
          err = e;
          lambda = std::max(lambda / 10.0, 1e-12);
          improved = true;
          if (gain < 1e-14 * (1.0 + err)) return f;
          break;
        }
      }
      lambda *= 10.0;
    }
    if (!improved) break;
  }
  return f;
}

}  // namespace pcqa::eval
