#include <doctest.h>

#include <fstream>
#include <random>

#include "pcqa/autodiff.hpp"
#include "pcqa/checkpoint.hpp"
#include "pcqa/error.hpp"
#include "pcqa/gradcheck.hpp"
#include "pcqa/pc_io.hpp"
#include "temp_dir.hpp"

using namespace pcqa;
using ad::Tensor;

namespace {

Tensor<double> randn(ad::Shape s, std::mt19937_64& rng, bool grad = true) {
  std::normal_distribution<double> d;
  std::vector<double> v(static_cast<std::size_t>(ad::numel(s)));
  for (auto& x : v) x = d(rng);
  return Tensor<double>(std::move(s), std::move(v), grad);
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("matmul with identity") {
    Tensor<double> a({2, 2}, {1, 2, 3, 4});
    Tensor<double> id({2, 2}, {1, 0, 0, 1});
    const auto r = ad::matmul(a, id);
    CHECK(std::vector<double>(r.values().begin(), r.values().end()) == std::vector<double>{1, 2, 3, 4});
  }

  TEST_CASE("averaging kernel gives the block mean at the center") {
    Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor<double> k({1, 1, 3, 3}, std::vector<double>(9, 1.0 / 9));
    const auto y = ad::conv2d(x, k, Tensor<double>(), 1, 1);
    CHECK(y.shape() == ad::Shape{1, 1, 3, 3});
    CHECK(y.values()[4] == doctest::Approx(5.0));
    CHECK(y.values()[0] == doctest::Approx((1 + 2 + 4 + 5) / 9.0));
  }

  TEST_CASE("quadratic gradient and accumulation") {
    Tensor<double> w({2}, {1, 2}, true);
    auto loss = ad::sum(ad::mul(w, w));
    ad::backward(loss);
    CHECK(w.grad()[0] == 2.0);
    CHECK(w.grad()[1] == 4.0);
    ad::backward(loss);
    CHECK(w.grad()[0] == 4.0);
    CHECK(w.grad()[1] == 8.0);
    w.zero_grad();
    CHECK_FALSE(w.has_grad());
  }

  TEST_CASE("constant loss leaves a zero gradient") {
    Tensor<double> w({2}, {1, 2}, true);
    Tensor<double> c({2}, {3, 4});
    auto loss = ad::add(ad::sum(ad::scale(w, 0.0)), ad::sum(c));
    ad::backward(loss);
    for (double g : w.grad()) CHECK(g == 0.0);
  }

  TEST_CASE("non scalar loss and shape mismatches are usage errors") {
    Tensor<double> w({2}, {1, 2}, true);
    CHECK_THROWS_AS(ad::backward(w), UsageError);
    Tensor<double> a({2, 3}, std::vector<double>(6, 1.0));
    try {
      ad::matmul(a, a);
      FAIL("expected mismatch");
    } catch (const UsageError& e) {
      CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
    }
    CHECK_THROWS_AS(ad::conv2d(ad::Tensor<double>::zeros({1, 1, 4, 4}), ad::Tensor<double>::zeros({1, 1, 2, 2}),
                               Tensor<double>(), 1, 0),
                    UsageError);
  }

  TEST_CASE("no grad guard suppresses the trace") {
    Tensor<double> w({2}, {1, 2}, true);
    {
      ad::NoGradGuard guard;
      CHECK_FALSE(ad::grad_enabled());
      auto y = ad::sum(ad::mul(w, w));
      CHECK(y.node()->is_leaf());
    }
    CHECK(ad::grad_enabled());
  }

  TEST_CASE("broadcasting add reduces gradients back to the smaller operand") {
    Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor<double> b({3}, {10, 20, 30}, true);
    auto y = ad::add(a, b);
    CHECK(y.values()[5] == 36.0);
    ad::backward(ad::sum(y));
    for (double g : b.grad()) CHECK(g == 2.0);
  }

  TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(1);
    const auto s = ad::softmax(randn({4, 7}, rng, false), -1);
    for (int r = 0; r < 4; ++r) {
      double t = 0;
      for (int c = 0; c < 7; ++c) t += s.values()[r * 7 + c];
      CHECK(std::abs(t - 1.0) <= 1e-12);
    }
  }

  TEST_CASE("finite difference checks on composite chain") {
    std::mt19937_64 rng(5);
    std::vector<Tensor<double>> in{randn({2, 3, 5, 5}, rng), randn({4, 3, 3, 3}, rng), randn({4}, rng),
                                   randn({4}, rng), randn({2, 4}, rng)};
    const auto out = gradcheck::check(
        "conv_norm_gelu_pool_linear",
        [](const std::vector<Tensor<double>>& v) {
          ad::BatchNormState<double> st{std::vector<double>(4, 0.0), std::vector<double>(4, 1.0)};
          auto h = ad::conv2d(v[0], v[1], Tensor<double>(), 1, 1);
          h = ad::batch_norm(h, v[2], v[3], st, true);
          h = ad::global_avg_pool(ad::gelu(h));
          return ad::linear(h, v[4], Tensor<double>());
        },
        in, 1e-4, 1e-5);
    CHECK(out.passed());
    CHECK(out.checked > 0);
  }

  TEST_CASE("every op in the gradient suite passes") {
    gradcheck::Options opt;
    opt.model = false;
    const auto results = gradcheck::run_suite(opt);
    CHECK(results.size() >= 16);
    for (const auto& r : results) CHECK_MESSAGE(r.passed(), r.name << " error " << r.max_error);
  }

  TEST_CASE("checkpoint round trip and corruption") {
    TempDir dir;
    std::vector<ad::NamedArray> arrays{{"a.weight", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b", {1}, {-0.5f}}};
    ad::save_checkpoint(arrays, dir / "w.pcqw");
    const auto back = ad::load_checkpoint(dir / "w.pcqw");
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "a.weight");
    CHECK(back[0].shape == ad::Shape{2, 3});
    CHECK(back[0].values == arrays[0].values);
    CHECK(back[1].values == arrays[1].values);
    const auto bytes = read_file(dir / "w.pcqw");
    CHECK(bytes.rfind("PCQW1", 0) == 0);
    std::ofstream(dir / "cut.pcqw", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    CHECK_THROWS_AS(ad::load_checkpoint(dir / "cut.pcqw"), DataError);
  }
}
