#include <doctest.h>

#include <fstream>
#include <random>

#include "oracles.hpp"
#include "pcqa/error.hpp"
#include "pcqa/features.hpp"
#include "temp_dir.hpp"

using namespace pcqa;

namespace {

Patch blank_patch(std::size_t n) {
  Patch p;
  p.coords.assign(n, {0, 0, 0});
  p.colors.assign(n, {0, 0, 0});
  return p;
}

Patch random_patch(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<int> c(0, 255);
  Patch p;
  for (std::size_t i = 0; i < n; ++i) {
    p.coords.push_back({u(rng), u(rng), u(rng)});
    p.colors.push_back({static_cast<std::uint8_t>(c(rng)), static_cast<std::uint8_t>(c(rng)),
                        static_cast<std::uint8_t>(c(rng))});
  }
  return p;
}

}  // namespace

TEST_SUITE("features") {
  TEST_CASE("zero and impulse frequency attributes") {
    const std::vector<Vec3> zeros(16, Vec3{0, 0, 0});
    for (const auto& v : frequency_attribute(zeros)) CHECK(v == Vec3{0, 0, 0});

    std::vector<Vec3> imp(16, Vec3{0, 0, 0});
    imp[0][0] = 1;
    const auto raw = frequency_magnitude_raw(imp);
    const auto scaled = frequency_attribute(imp);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(raw[i][0] == doctest::Approx(1.0));
      CHECK(raw[i][1] == 0.0);
      CHECK(raw[i][2] == 0.0);
      CHECK(scaled[i][0] == doctest::Approx(1.0));
      CHECK(scaled[i][1] == 0.0);
    }
  }

  TEST_CASE("random patch: raw magnitudes match the dft oracle and scaling spans [0,1]") {
    const auto p = random_patch(64, 3);
    const auto raw = frequency_magnitude_raw(p.coords);
    for (int a = 0; a < 3; ++a) {
      std::vector<std::complex<double>> sig(64);
      for (std::size_t i = 0; i < 64; ++i) sig[i] = p.coords[i][a];
      const auto spec = oracle::dft(sig);
      for (std::size_t i = 0; i < 64; ++i)
        CHECK(std::abs(raw[(i + 32) % 64][a] - std::abs(spec[i])) <= 1e-9);
    }
    const auto scaled = frequency_attribute(p.coords);
    double lo = 1, hi = 0;
    for (const auto& v : scaled)
      for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    CHECK(lo == 0.0);
    CHECK(hi == 1.0);
  }

  TEST_CASE("translation only moves the zero frequency bin") {
    const auto p = random_patch(32, 4);
    auto moved = p.coords;
    for (auto& v : moved) v[1] += 0.37;
    const auto a = frequency_magnitude_raw(p.coords);
    const auto b = frequency_magnitude_raw(moved);
    for (std::size_t i = 0; i < 32; ++i) {
      if (i == 16) {
        CHECK(std::abs(a[i][1] - b[i][1]) > 1.0);
        continue;
      }
      for (int k = 0; k < 3; ++k) CHECK(std::abs(a[i][k] - b[i][k]) <= 1e-9);
    }
  }

  TEST_CASE("rgb scaling") {
    const std::vector<Rgb> c{{255, 0, 128}};
    const auto v = rgb_attribute(c);
    CHECK(v[0][0] == 1.0);
    CHECK(v[0][1] == 0.0);
    CHECK(v[0][2] == doctest::Approx(0.50196).epsilon(1e-5));
    const std::vector<std::array<int, 3>> bad{{0, 256, 0}};
    CHECK_THROWS_AS(rgb_attribute(bad), DataError);
  }

  TEST_CASE("ramp layout is row major on channel 0") {
    auto p = blank_patch(1024);
    for (std::size_t i = 0; i < 1024; ++i) p.coords[i][0] = static_cast<double>(i);
    const auto t = assemble(p);
    CHECK(t.grid == 32);
    CHECK(t.data.size() == 9 * 1024);
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t c = 0; c < 32; ++c) CHECK(t.at(0, r, c) == static_cast<double>(r * 32 + c));
    for (std::size_t ch = 1; ch < 6; ++ch)
      for (double x : t.channel(ch)) CHECK(x == 0.0);
  }

  TEST_CASE("assembled tensor invariants and exact round trip") {
    const auto p = random_patch(256, 9);
    const auto t = assemble(p);
    CHECK(t.grid == 16);
    for (std::size_t ch = 3; ch < 9; ++ch)
      for (double x : t.channel(ch)) CHECK((x >= 0.0 && x <= 1.0));
    CHECK(unflatten_attribute(t, kCoordChannel) == p.coords);
    CHECK(unflatten_attribute(t, kRgbChannel) == rgb_attribute(p.colors));
    CHECK(unflatten_attribute(t, kFrequencyChannel) == frequency_attribute(p.coords));
  }

  TEST_CASE("rotation leaves color channels untouched") {
    const auto p = random_patch(64, 10);
    auto r = p;
    for (auto& v : r.coords) v = {-v[1], v[0], v[2]};
    const auto a = assemble(p), b = assemble(r);
    for (std::size_t ch = 3; ch < 6; ++ch)
      CHECK(std::equal(a.channel(ch).begin(), a.channel(ch).end(), b.channel(ch).begin()));
  }

  TEST_CASE("non square grid is rejected") {
    CHECK_THROWS_AS(assemble(blank_patch(32)), UsageError);
    CHECK_THROWS_AS(assemble(blank_patch(48)), UsageError);
  }

  TEST_CASE("ablation zeroes the requested channels") {
    auto t = assemble(random_patch(64, 1));
    const auto orig = t;
    apply_ablation(t, Ablation::kNoRgb);
    for (std::size_t ch = 0; ch < 9; ++ch)
      for (std::size_t i = 0; i < 64; ++i)
        CHECK(t.channel(ch)[i] == ((ch >= 3 && ch < 6) ? 0.0 : orig.channel(ch)[i]));
    auto f = orig;
    apply_ablation(f, Ablation::kNoFrequency);
    for (std::size_t ch = 6; ch < 9; ++ch)
      for (double x : f.channel(ch)) CHECK(x == 0.0);
    CHECK(parse_ablation("no_rgb") == Ablation::kNoRgb);
    CHECK_THROWS_AS(parse_ablation("none"), UsageError);
  }

  TEST_CASE("feature dump round trip stores float32") {
    TempDir dir;
    std::vector<FeatureTensor> fs{assemble(random_patch(64, 1)), assemble(random_patch(64, 2))};
    write_feature_dump(fs, dir / "f.pcqf");
    const auto back = read_feature_dump(dir / "f.pcqf");
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < fs[i].data.size(); ++j)
        CHECK(back[i].data[j] == static_cast<double>(static_cast<float>(fs[i].data[j])));
    std::ofstream(dir / "bad.pcqf") << "PCQF1xx";
    CHECK_THROWS_AS(read_feature_dump(dir / "bad.pcqf"), DataError);
  }
}
