#include "pcqa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pcqa/nn.hpp"
#include "pcqa/training.hpp"

namespace pcqa::gradcheck {

using ad::Shape;
using ad::Tensor;

namespace {

double weighted_sum(const Tensor<double>& out, const std::vector<double>& w) {
  double s = 0.0;
  const auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * w[i];
  return s;
}

double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}
  Tensor<double> normal(Shape shape, double sd = 1.0, bool grad = true) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
    for (auto& x : v) x = d(rng_);
    return Tensor<double>(std::move(shape), std::move(v), grad);
  }
  // Values bounded away from zero, for ops with a kink there.
  Tensor<double> away_from_zero(Shape shape) {
    auto t = normal(std::move(shape));
    for (auto& x : t.mutable_values()) x = (x < 0 ? -0.1 : 0.1) + x;
    return t;
  }
  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng_); }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

Outcome check(const std::string& name, const Fn& f, std::vector<Tensor<double>> inputs,
              double tolerance, double eps, std::uint64_t seed) {
  Outcome o{name, 0.0, tolerance, 0};
  for (auto& t : inputs) t.zero_grad();
  const auto out = f(inputs);
  std::mt19937_64 rng(seed ^ 0x7e57ULL);
  std::normal_distribution<double> d;
  std::vector<double> w(static_cast<std::size_t>(out.numel()));
  for (auto& x : w) x = d(rng);
  const auto loss = ad::sum(ad::mul(out, Tensor<double>(out.shape(), w)));
  ad::backward(loss);

  ad::NoGradGuard no_grad;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                     : std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + eps;
      const double up = weighted_sum(f(inputs), w);
      v[i] = orig - eps;
      const double down = weighted_sum(f(inputs), w);
      v[i] = orig;
      o.max_error = std::max(o.max_error, rel_error(analytic[i], (up - down) / (2 * eps)));
      ++o.checked;
    }
  }
  return o;
}

namespace {

std::vector<Outcome> op_suite(std::uint64_t seed, double tol) {
  Gen g(seed);
  std::vector<Outcome> out;
  auto run = [&](const std::string& name, const Fn& f, std::vector<Tensor<double>> in) {
    out.push_back(check(name, f, std::move(in), tol, 1e-6, seed + out.size()));
  };
  using V = std::vector<Tensor<double>>;

  run("add (broadcast)", [](const V& x) { return ad::add(x[0], x[1]); },
      {g.normal({2, 3, 4}), g.normal({3, 1})});
  run("sub (broadcast)", [](const V& x) { return ad::sub(x[0], x[1]); },
      {g.normal({2, 3}), g.normal({1, 3})});
  run("mul (broadcast)", [](const V& x) { return ad::mul(x[0], x[1]); },
      {g.normal({2, 3, 4}), g.normal({2, 1, 4})});
  run("scale", [](const V& x) { return ad::scale(x[0], 0.37); }, {g.normal({5})});
  run("relu", [](const V& x) { return ad::relu(x[0]); }, {g.away_from_zero({3, 5})});
  run("gelu", [](const V& x) { return ad::gelu(x[0]); }, {g.normal({3, 5})});
  run("sum", [](const V& x) { return ad::sum(x[0]); }, {g.normal({2, 3})});
  run("mean", [](const V& x) { return ad::mean(x[0]); }, {g.normal({2, 3})});
  run("matmul 2d", [](const V& x) { return ad::matmul(x[0], x[1]); },
      {g.normal({3, 4}), g.normal({4, 5})});
  run("matmul batched", [](const V& x) { return ad::matmul(x[0], x[1]); },
      {g.normal({2, 3, 4}), g.normal({2, 4, 2})});
  run("matmul batch broadcast", [](const V& x) { return ad::matmul(x[0], x[1]); },
      {g.normal({2, 3, 4}), g.normal({4, 2})});
  run("linear", [](const V& x) { return ad::linear(x[0], x[1], x[2]); },
      {g.normal({2, 3, 4}), g.normal({5, 4}), g.normal({5})});
  run("reshape", [](const V& x) { return ad::reshape(x[0], {3, -1}); }, {g.normal({2, 3, 2})});
  run("permute", [](const V& x) { return ad::permute(x[0], {2, 0, 1}); }, {g.normal({2, 3, 4})});
  run("concat", [](const V& x) { return ad::concat<double>({x[0], x[1]}, 1); },
      {g.normal({2, 2, 3}), g.normal({2, 4, 3})});
  run("slice", [](const V& x) { return ad::slice(x[0], 1, 1, 3); }, {g.normal({2, 4, 3})});
  run("index_select", [](const V& x) { return ad::index_select(x[0], {2, 0, 2, 1}); },
      {g.normal({3, 4})});
  run("softmax", [](const V& x) { return ad::softmax(x[0], -1); }, {g.normal({2, 3, 5})});
  run("softmax axis 1", [](const V& x) { return ad::softmax(x[0], 1); }, {g.normal({2, 4, 3})});
  run("conv2d", [](const V& x) { return ad::conv2d(x[0], x[1], x[2], 1, 1); },
      {g.normal({2, 3, 5, 5}), g.normal({4, 3, 3, 3}), g.normal({4})});
  run("conv2d stride 2", [](const V& x) { return ad::conv2d(x[0], x[1], x[2], 2, 1); },
      {g.normal({1, 2, 6, 6}), g.normal({3, 2, 3, 3}), g.normal({3})});
  run("conv2d 1x1", [](const V& x) { return ad::conv2d(x[0], x[1], Tensor<double>(), 1, 0); },
      {g.normal({2, 3, 4, 4}), g.normal({5, 3, 1, 1})});
  run("depthwise_conv2d", [](const V& x) { return ad::depthwise_conv2d(x[0], x[1], x[2], 1, 1); },
      {g.normal({2, 3, 5, 5}), g.normal({3, 1, 3, 3}), g.normal({3})});
  run("depthwise_conv2d stride 2",
      [](const V& x) { return ad::depthwise_conv2d(x[0], x[1], Tensor<double>(), 2, 1); },
      {g.normal({1, 2, 6, 6}), g.normal({2, 1, 3, 3})});
  {
    std::vector<double> loc;
    for (int i = 0; i < 2 * 7; ++i)
      for (int a = 0; a < 2; ++a)
        loc.push_back(std::floor(g.uniform(-1.0, 5.0)) + g.uniform(0.1, 0.9));
    run("bilinear_sample", [](const V& x) { return ad::bilinear_sample(x[0], x[1]); },
        {g.normal({2, 3, 4, 5}), Tensor<double>({2, 7, 2}, loc, true)});
  }
  run("global_avg_pool", [](const V& x) { return ad::global_avg_pool(x[0]); },
      {g.normal({2, 3, 4, 4})});
  run("avg_pool2d", [](const V& x) { return ad::avg_pool2d(x[0], 2); }, {g.normal({2, 3, 4, 4})});
  {
    auto state = std::make_shared<ad::BatchNormState<double>>();
    state->running_mean.assign(3, 0.0);
    state->running_var.assign(3, 1.0);
    run("batch_norm train",
        [state](const V& x) { return ad::batch_norm(x[0], x[1], x[2], *state, true); },
        {g.normal({3, 3, 2, 2}), g.normal({3}), g.normal({3})});
    auto fixed = std::make_shared<ad::BatchNormState<double>>();
    fixed->running_mean = {0.3, -0.2, 0.1};
    fixed->running_var = {1.5, 0.7, 2.0};
    run("batch_norm eval",
        [fixed](const V& x) { return ad::batch_norm(x[0], x[1], x[2], *fixed, false); },
        {g.normal({2, 3, 2, 2}), g.normal({3}), g.normal({3})});
  }
  run("layer_norm", [](const V& x) { return ad::layer_norm(x[0], x[1], x[2]); },
      {g.normal({2, 3, 6}), g.normal({6}), g.normal({6})});
  run("smooth_l1_loss",
      [](const V& x) {
        const std::vector<double> mos{0.2, 3.0, -1.5, 0.9};
        return train::smooth_l1_loss<double>(x[0], mos);
      },
      {Tensor<double>({4}, {0.5, 0.4, -1.1, 2.6}, true)});
  {
    // Offsets with fractional parts kept clear of the bilinear kinks.
    auto offset = g.normal({1, 18, 4, 4}, 0.6);
    for (auto& v : offset.mutable_values()) v = std::floor(v) + 0.15 + 0.7 * (v - std::floor(v));
    run("deform_conv2d",
        [](const V& x) { return nn::deform_conv2d(x[0], x[1], x[2], x[3]); },
        {g.normal({1, 2, 4, 4}), offset, g.normal({3, 2, 3, 3}), g.normal({3})});
  }
  return out;
}

Outcome model_check(std::uint64_t seed, std::size_t samples, double tol) {
  nn::ModelConfig cfg;
  cfg.repeats = {1, 1, 1, 1, 1};
  cfg.scale = 1.0 / 16.0;
  cfg.grid = 8;
  nn::Model<double> model(cfg, seed);
  Gen g(seed + 17);

  // Start away from the zero-offset kinks and the zero-initialized head.
  for (auto& p : model.parameters()) {
    const bool norm_scale = p.name.ends_with("norm.weight") || p.name.ends_with("norm1.weight") ||
                            p.name.ends_with("norm2.weight") || p.name.ends_with("norm3.weight");
    std::normal_distribution<double> d(0.0, 0.3);
    for (auto& v : p.tensor.mutable_values()) v = (norm_scale ? 1.0 : 0.0) + d(g.rng());
  }
  const auto input = g.normal({2, 9, 8, 8}, 1.0, false);
  std::vector<double> w{0.7, -1.3};

  auto loss_value = [&] {
    const auto out = model.forward(input, true);
    return weighted_sum(out, w);
  };

  model.zero_grad();
  const auto out = model.forward(input, true);
  ad::backward(ad::sum(ad::mul(out, Tensor<double>({2}, w))));

  // One scalar from every parameter tensor first, then random extras.
  auto& params = model.parameters();
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  std::vector<std::size_t> order(params.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[g.rng()() % i]);
  for (std::size_t i : order) {
    if (picks.size() == samples) break;
    picks.emplace_back(i, g.rng()() % static_cast<std::size_t>(params[i].tensor.numel()));
  }
  while (picks.size() < samples) {
    const std::size_t i = g.rng()() % params.size();
    picks.emplace_back(i, g.rng()() % static_cast<std::size_t>(params[i].tensor.numel()));
  }

  Outcome o{"model (widths/16, R=1, grid 8)", 0.0, tol, 0};
  ad::NoGradGuard no_grad;
  const double eps = 1e-6;
  for (const auto& [pi, ei] : picks) {
    auto& t = params[pi].tensor;
    const double analytic = t.has_grad() ? t.grad()[ei] : 0.0;
    auto v = t.mutable_values();
    const double orig = v[ei];
    v[ei] = orig + eps;
    const double up = loss_value();
    v[ei] = orig - eps;
    const double down = loss_value();
    v[ei] = orig;
    o.max_error = std::max(o.max_error, rel_error(analytic, (up - down) / (2 * eps)));
    ++o.checked;
  }
  return o;
}

}  // namespace

std::vector<Outcome> run_suite(const Options& options) {
  std::vector<Outcome> out;
  if (options.ops) out = op_suite(options.seed, options.op_tolerance);
  if (options.model) out.push_back(model_check(options.seed, options.model_samples, options.model_tolerance));
  return out;
}

}  // namespace pcqa::gradcheck
