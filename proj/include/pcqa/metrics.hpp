#pragma once

#include <array>
#include <span>
#include <vector>

namespace pcqa::eval {

/// Pearson r. Throws NumericError when either input has zero variance and
/// UsageError on length mismatch or fewer than two samples.
double plcc(std::span<const double> x, std::span<const double> y);

/// Spearman rho with tied values sharing their average rank.
double srocc(std::span<const double> x, std::span<const double> y);

double rmse(std::span<const double> x, std::span<const double> y);

/// 1-based ranks; ties receive the mean of the ranks they span.
std::vector<double> fractional_ranks(std::span<const double> x);

/// Monotone 4-parameter logistic
///   f(x) = (b1 - b2) / (1 + exp(-(x - b3) / |b4|)) + b2
/// fitted to (x, y) by Levenberg-Marquardt.
struct Logistic4 {
  std::array<double, 4> beta{};
  double operator()(double x) const;
};
Logistic4 fit_logistic(std::span<const double> x, std::span<const double> y);

}  // namespace pcqa::eval
