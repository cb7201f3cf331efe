#include <doctest.h>

#include <random>

#include "pcqa/checkpoint.hpp"
#include "pcqa/error.hpp"
#include "pcqa/nn.hpp"
#include "pcqa/scoring.hpp"
#include "temp_dir.hpp"

using namespace pcqa;
using ad::Tensor;

namespace {

Tensor<double> randn(ad::Shape s, std::mt19937_64& rng, bool grad = false) {
  std::normal_distribution<double> d;
  std::vector<double> v(static_cast<std::size_t>(ad::numel(s)));
  for (auto& x : v) x = d(rng);
  return Tensor<double>(std::move(s), std::move(v), grad);
}

// Direct zero-padded cross-correlation, stride 1.
std::vector<double> brute_conv(const Tensor<double>& x, const Tensor<double>& w) {
  const auto b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0), k = w.dim(2);
  const auto pad = k / 2;
  std::vector<double> out(b * co * h * wd, 0.0);
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t q = 0; q < wd; ++q) {
          long double s = 0;
          for (std::int64_t i = 0; i < c; ++i)
            for (std::int64_t u = 0; u < k; ++u)
              for (std::int64_t v = 0; v < k; ++v) {
                const auto rr = r + u - pad, cc = q + v - pad;
                if (rr < 0 || rr >= h || cc < 0 || cc >= wd) continue;
                s += x.values()[((n * c + i) * h + rr) * wd + cc] * w.values()[((o * c + i) * k + u) * k + v];
              }
          out[((n * co + o) * h + r) * wd + q] = static_cast<double>(s);
        }
  return out;
}

nn::ModelConfig tiny_config() {
  nn::ModelConfig c;
  c.repeats = {1, 1, 1, 1, 1};
  c.scale = 1.0 / 16;
  c.grid = 8;
  return c;
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("zero offsets reduce deformable conv to ordinary conv") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 5; ++trial) {
      const auto x = randn({2, 3, 6, 5}, rng);
      const auto w = randn({4, 3, 3, 3}, rng);
      const auto y = nn::deform_conv2d(x, Tensor<double>::zeros({2, 18, 6, 5}), w, Tensor<double>());
      const auto ref = brute_conv(x, w);
      const auto lib = ad::conv2d(x, w, Tensor<double>(), 1, 1);
      for (std::size_t i = 0; i < ref.size(); ++i) {
        CHECK(std::abs(y.values()[i] - ref[i]) <= 1e-9);
        CHECK(std::abs(lib.values()[i] - ref[i]) <= 1e-9);
      }
    }
  }

  TEST_CASE("unit row offset equals conv of the input shifted by one row") {
    std::mt19937_64 rng(2);
    const auto x = randn({1, 2, 7, 7}, rng);
    const auto w = randn({3, 2, 3, 3}, rng);
    std::vector<double> off(18 * 49, 0.0);
    for (int t = 0; t < 9; ++t)
      for (int p = 0; p < 49; ++p) off[(2 * t) * 49 + p] = 1.0;
    const auto y = nn::deform_conv2d(x, Tensor<double>({1, 18, 7, 7}, off), w, Tensor<double>());
    std::vector<double> shifted(x.values().begin(), x.values().end());
    for (int c = 0; c < 2; ++c)
      for (int r = 0; r < 7; ++r)
        for (int q = 0; q < 7; ++q)
          shifted[(c * 7 + r) * 7 + q] = r + 1 < 7 ? x.values()[(c * 7 + r + 1) * 7 + q] : 0.0;
    const auto ref = brute_conv(Tensor<double>({1, 2, 7, 7}, shifted), w);
    for (int o = 0; o < 3; ++o)
      for (int r = 1; r < 5; ++r)
        for (int q = 1; q < 6; ++q) CHECK(std::abs(y.values()[(o * 7 + r) * 7 + q] - ref[(o * 7 + r) * 7 + q]) <= 1e-9);
  }

  TEST_CASE("offset shape is validated") {
    const auto x = Tensor<double>::zeros({1, 2, 4, 4});
    CHECK_THROWS_AS(nn::deform_conv2d(x, Tensor<double>::zeros({1, 9, 4, 4}), Tensor<double>::zeros({2, 2, 3, 3}),
                                      Tensor<double>()),
                    UsageError);
  }

  TEST_CASE("stride two depth unit halves the grid") {
    nn::ModelConfig c = tiny_config();
    c.grid = 16;
    nn::Model<double> m(c, 3);
    const auto& unit = m.depth_stage(0).front();
    CHECK(unit.stride == 2);
    std::mt19937_64 rng(3);
    const auto w = c.effective_widths();
    const auto in_ch = w[0] + (c.stem_concat ? 9 : 0);
    const auto y = unit.forward(randn({1, in_ch, 16, 16}, rng), false);
    CHECK(y.shape() == ad::Shape{1, w[1], 8, 8});
  }

  TEST_CASE("depth unit with zeroed branch passes the input through") {
    nn::ModelConfig c = tiny_config();
    c.repeats = {1, 2, 1, 1, 1};
    nn::Model<double> m(c, 4);
    auto& unit = m.depth_stage(0)[1];
    REQUIRE_FALSE(unit.skip_weight.defined());
    for (auto& v : unit.norm3.gamma.mutable_values()) v = 0.0;
    for (auto& v : unit.norm3.beta.mutable_values()) v = 0.0;
    std::mt19937_64 rng(4);
    const auto ch = c.effective_widths()[1];
    const auto x = randn({1, ch, 4, 4}, rng);
    const auto y = unit.forward(x, false);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == doctest::Approx(x.values()[i]));
  }

  TEST_CASE("uniform attention with identity values returns the mean token") {
    nn::ModelConfig c = tiny_config();
    nn::Model<double> m(c, 5);
    auto unit = m.transformer_stage(0).front();
    const std::int64_t d = unit.out_weight.dim(0);
    const std::int64_t cin = unit.qkv_weight.dim(1);
    REQUIRE(cin == d);
    std::vector<double> qkv(3 * d * d, 0.0);
    for (std::int64_t i = 0; i < d; ++i) qkv[(2 * d + i) * d + i] = 1.0;
    unit.qkv_weight = Tensor<double>({3 * d, d}, qkv);
    unit.qkv_bias = Tensor<double>::zeros({3 * d});
    std::vector<double> eye(d * d, 0.0);
    for (std::int64_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
    unit.out_weight = Tensor<double>({d, d}, eye);
    unit.out_bias = Tensor<double>::zeros({d});
    unit.relative_bias = nullptr;
    std::mt19937_64 rng(6);
    const auto tokens = randn({1, 4, d}, rng);
    const auto r = unit.attend(tokens, 2, 2);
    for (std::int64_t j = 0; j < d; ++j) {
      double mean = 0;
      for (int t = 0; t < 4; ++t) mean += tokens.values()[t * d + j] / 4;
      for (int t = 0; t < 4; ++t) CHECK(r.output.values()[t * d + j] == doctest::Approx(mean));
    }
    for (double wgt : r.weights.values()) CHECK(wgt == doctest::Approx(0.25));
  }

  TEST_CASE("attention rows are distributions") {
    nn::ModelConfig c = tiny_config();
    c.grid = 16;
    nn::Model<double> m(c, 7);
    auto& unit = m.transformer_stage(0).front();
    for (auto& v : unit.relative_bias->mutable_values()) v = 0.3 * std::sin(&v - unit.relative_bias->mutable_values().data());
    std::mt19937_64 rng(8);
    const auto d = unit.qkv_weight.dim(1);
    const auto r = unit.attend(randn({2, 4, d}, rng), 2, 2);
    const auto l = r.weights.dim(-1);
    for (std::int64_t row = 0; row < r.weights.numel() / l; ++row) {
      double s = 0;
      for (std::int64_t j = 0; j < l; ++j) s += r.weights.values()[row * l + j];
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }

  TEST_CASE("relative position index is symmetric in its range") {
    const auto idx = nn::relative_position_index(2, 3);
    CHECK(idx.size() == 36);
    for (auto v : idx) CHECK((v >= 0 && v < 3 * 5));
    CHECK(idx[0] == idx[7]);
  }

  TEST_CASE("forward shape, zero input and batch independence") {
    nn::ModelConfig c = tiny_config();
    nn::Model<float> m(c, 9);
    const auto zeros = Tensor<float>::zeros({3, 9, 8, 8});
    const auto y = m.forward(zeros, false);
    CHECK(y.shape() == ad::Shape{3});
    for (float v : y.values()) CHECK(v == static_cast<float>(c.head_bias));

    std::mt19937_64 rng(10);
    std::normal_distribution<float> d;
    std::vector<float> data(3 * 9 * 64);
    for (auto& v : data) v = d(rng);
    for (float& v : m.head_weight().mutable_values()) v = 0.1f;
    const auto all = m.forward(Tensor<float>({3, 9, 8, 8}, data), false);
    const auto one = m.forward(Tensor<float>({1, 9, 8, 8}, std::vector<float>(data.begin() + 9 * 64, data.begin() + 18 * 64)), false);
    CHECK(one.values()[0] == doctest::Approx(all.values()[1]).epsilon(1e-5));
    CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 9, 16, 16}), false), UsageError);
  }

  TEST_CASE("aggregate quality is the mean") {
    const std::vector<double> s{1, 2, 3};
    CHECK(nn::aggregate_quality(s) == 2.0);
    const std::vector<double> c(7, 3.25);
    CHECK(nn::aggregate_quality(c) == 3.25);
    CHECK_THROWS_AS(nn::aggregate_quality(std::vector<double>{}), UsageError);
  }

  TEST_CASE("config validation") {
    nn::ModelConfig c;
    c.widths[3] = 100;
    CHECK_THROWS_AS(c.validate(), UsageError);
    nn::ModelConfig k;
    k.kernel = 4;
    CHECK_THROWS_AS(k.validate(), UsageError);
  }

  TEST_CASE("save and load reproduces scores bit exactly and keeps the census") {
    TempDir dir;
    nn::ModelConfig c = tiny_config();
    nn::Model<float> a(c, 11);
    for (auto& p : a.parameters())
      for (auto& v : p.tensor.mutable_values()) v += 0.01f;
    ad::save_checkpoint(a.state(), dir / "m.pcqw");
    nn::Model<float> b(c, 99);
    b.load_state(ad::load_checkpoint(dir / "m.pcqw"));
    CHECK(a.parameter_count() == b.parameter_count());
    std::mt19937_64 rng(12);
    std::normal_distribution<float> d;
    std::vector<float> data(2 * 9 * 64);
    for (auto& v : data) v = d(rng);
    const Tensor<float> x({2, 9, 8, 8}, data);
    const auto ya = a.forward(x, false), yb = b.forward(x, false);
    CHECK(ya.values()[0] == yb.values()[0]);
    CHECK(ya.values()[1] == yb.values()[1]);

    auto st = a.state();
    st.pop_back();
    CHECK_THROWS_AS(b.load_state(st), DataError);
  }

  TEST_CASE("cloud prediction averages its patch scores") {
    nn::ModelConfig c = tiny_config();
    nn::Model<float> m(c, 13);
    for (float& v : m.head_weight().mutable_values()) v = 0.05f;
    PointCloud cloud;
    std::mt19937_64 rng(14);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 500; ++i) {
      cloud.points.push_back({u(rng), u(rng), u(rng)});
      cloud.colors.push_back({static_cast<std::uint8_t>(i % 256), 10, 200});
    }
    const auto s = predict_cloud(m, cloud, SamplingConfig{10, 64, 0});
    REQUIRE(s.patch_scores.size() == 10);
    double sum = 0;
    for (double v : s.patch_scores) sum += v;
    CHECK(s.quality == doctest::Approx(sum / 10).epsilon(1e-12));
  }
}
