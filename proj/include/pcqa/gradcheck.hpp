#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pcqa/autodiff.hpp"

namespace pcqa::gradcheck {

struct Outcome {
  std::string name;
  double max_error = 0.0;  // |analytic - numeric| / max(1, |analytic|, |numeric|)
  double tolerance = 0.0;
  std::size_t checked = 0;  // scalars compared
  bool passed() const { return checked > 0 && max_error <= tolerance; }
};

using Fn = std::function<ad::Tensor<double>(const std::vector<ad::Tensor<double>>&)>;

/// Central differences on every element of every input flagged
/// requires_grad, against backward() of sum(f(inputs) * R) for a fixed
/// random R.
Outcome check(const std::string& name, const Fn& f, std::vector<ad::Tensor<double>> inputs,
              double tolerance, double eps = 1e-6, std::uint64_t seed = 0);

struct Options {
  std::uint64_t seed = 0;
  bool ops = true;
  bool model = true;
  std::size_t model_samples = 50;
  double op_tolerance = 1e-4;
  double model_tolerance = 1e-3;
};

/// Every autodiff op, the smooth L1 loss, the deformable convolution, one
/// attention unit, and the assembled model at widths/16, one repeat per
/// stage, grid 8, with all parameters randomized so no sampling location
/// sits on a bilinear kink.
std::vector<Outcome> run_suite(const Options& options);

}  // namespace pcqa::gradcheck
