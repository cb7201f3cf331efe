#include <doctest.h>

#include <fstream>
#include <random>
#include <set>

#include "oracles.hpp"
#include "pcqa/error.hpp"
#include "pcqa/eval.hpp"
#include "pcqa/synth.hpp"
#include "temp_dir.hpp"

using namespace pcqa;
using namespace pcqa::eval;

namespace {

DatasetManifest refs(int n, int per_ref) {
  DatasetManifest m;
  for (int r = 0; r < n; ++r)
    for (int k = 0; k < per_ref; ++k)
      m.entries.push_back({"ref" + std::to_string(r) + "_" + std::to_string(k) + ".ply", 1.0 + k, "ref" + std::to_string(r)});
  return m;
}

std::vector<double> tied_vector(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(n / 2));
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng) * 0.5;
  return v;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("pearson reference values") {
    const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4}, aff{3, 5, 7, 9}, neg{-1, -2, -3, -4};
    CHECK(plcc(x, y) == doctest::Approx(0.8).epsilon(1e-14));
    CHECK(plcc(x, aff) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(plcc(x, neg) == doctest::Approx(-1.0).epsilon(1e-14));
    const std::vector<double> c{2, 2, 2, 2};
    CHECK_THROWS_AS(plcc(x, c), NumericError);
    CHECK_THROWS_AS(plcc(std::vector<double>{1}, std::vector<double>{1}), UsageError);
  }

  TEST_CASE("spearman with ties uses midranks") {
    const std::vector<double> x{1, 2, 2, 4}, y{1, 2, 3, 4};
    CHECK(fractional_ranks(x) == std::vector<double>{1, 2.5, 2.5, 4});
    CHECK(srocc(x, y) == doctest::Approx(oracle::spearman(x, y)).epsilon(1e-14));
    const std::vector<double> rev{4, 3, 2, 1};
    CHECK(srocc(y, rev) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(srocc(y, std::vector<double>{5, 5, 5, 5}), NumericError);
  }

  TEST_CASE("rmse reference values") {
    const std::vector<double> a{0, 0}, b{3, 4};
    CHECK(rmse(a, b) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
    CHECK(rmse(b, b) == 0.0);
  }

  TEST_CASE("metrics agree with brute force on random tied vectors") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> len(5, 50);
    for (int trial = 0; trial < 200; ++trial) {
      const auto n = len(rng);
      const auto x = tied_vector(n, rng), y = tied_vector(n, rng);
      if (oracle::ranks(x) == std::vector<double>(n, (n + 1) / 2.0)) continue;
      if (oracle::ranks(y) == std::vector<double>(n, (n + 1) / 2.0)) continue;
      CHECK(std::abs(plcc(x, y) - oracle::pearson(x, y)) <= 1e-12);
      CHECK(std::abs(srocc(x, y) - oracle::spearman(x, y)) <= 1e-12);
      CHECK(std::abs(rmse(x, y) - oracle::rmse(x, y)) <= 1e-12);
    }
  }

  TEST_CASE("invariances") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> d;
    std::vector<double> x(30), y(30), fx(30), ay(30);
    for (int i = 0; i < 30; ++i) {
      x[i] = d(rng);
      y[i] = x[i] + d(rng);
      fx[i] = std::exp(x[i]) + x[i] * x[i] * x[i];
      ay[i] = 2.5 * y[i] - 7;
    }
    CHECK(srocc(x, fx) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(srocc(fx, y) == doctest::Approx(srocc(x, y)).epsilon(1e-14));
    CHECK(plcc(x, ay) == doctest::Approx(plcc(x, y)).epsilon(1e-12));
  }

  TEST_CASE("logistic mapping is monotone and fits a sigmoid") {
    std::vector<double> x, y;
    for (int i = 0; i < 40; ++i) {
      x.push_back(-3 + 0.15 * i);
      y.push_back(1 + 4 / (1 + std::exp(-1.7 * (x.back() - 0.2))));
    }
    const auto f = fit_logistic(x, y);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(f(x[i]) == doctest::Approx(y[i]).epsilon(1e-3));
    const auto m = compute_metrics(x, y, true);
    CHECK(m.plcc == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(m.srocc == doctest::Approx(1.0));
  }

  TEST_CASE("splits follow reference counts and stay disjoint") {
    const auto five = make_splits(refs(5, 3), 0.8, 5, 1);
    REQUIRE(five.size() == 5);
    std::set<std::string> tested;
    for (const auto& s : five) {
      CHECK(s.train_refs.size() == 4);
      CHECK(s.test_refs.size() == 1);
      tested.insert(s.test_refs[0]);
      CHECK(s.train.size() == 12);
      CHECK(s.test.size() == 3);
      std::set<std::string> tr;
      for (const auto& e : s.train.entries) tr.insert(e.ref_id);
      for (const auto& e : s.test.entries) CHECK(tr.count(e.ref_id) == 0);
    }
    CHECK(tested.size() == 5);

    const auto big = make_splits(refs(75, 1), 0.8, 5, 2);
    for (const auto& s : big) {
      CHECK(s.train_refs.size() == 60);
      CHECK(s.test_refs.size() == 15);
    }
    CHECK(big[0].test_refs != big[1].test_refs);
    const auto again = make_splits(refs(75, 1), 0.8, 5, 2);
    CHECK(again[3].test_refs == big[3].test_refs);

    CHECK_THROWS_AS(make_splits(refs(5, 1), 1.0, 1, 0), UsageError);
    CHECK_THROWS_AS(make_splits(refs(5, 1), 0.0, 1, 0), UsageError);
    CHECK_THROWS_AS(make_splits(refs(1, 3), 0.8, 1, 0), UsageError);
  }

  TEST_CASE("validation hold out is reference disjoint") {
    const auto [proper, val] = hold_out(refs(10, 2), 0.1, 3);
    CHECK(val.reference_ids().size() == 1);
    CHECK(proper.reference_ids().size() == 9);
    for (const auto& r : val.reference_ids())
      for (const auto& p : proper.reference_ids()) CHECK(r != p);
  }

  TEST_CASE("perfect and constant predictors") {
    const std::vector<double> mos{1, 2.5, 3, 4.5};
    const auto m = compute_metrics(mos, mos);
    CHECK(m.srocc == doctest::Approx(1.0));
    CHECK(m.plcc == doctest::Approx(1.0));
    CHECK(m.rmse == 0.0);
    CHECK(m.valid());
    const auto c = compute_metrics(std::vector<double>(4, 3.0), mos);
    CHECK_FALSE(c.valid());
    CHECK(std::isnan(c.srocc));
    CHECK(std::isnan(c.plcc));
    CHECK_FALSE(c.error.empty());
  }

  TEST_CASE("evaluate is deterministic and reports the constant model as undefined") {
    TempDir dir;
    synth::DatasetSpec spec;
    spec.references = 2;
    spec.levels = 2;
    spec.points = 300;
    const auto manifest = synth::write_dataset(spec, dir.path());
    nn::ModelConfig c;
    c.repeats = {1, 1, 1, 1, 1};
    c.scale = 1.0 / 16;
    c.grid = 8;
    nn::Model<float> model(c, 1);
    EvalOptions opt;
    opt.sampling = SamplingConfig{4, 64, 0};
    const auto a = evaluate(model, manifest, opt, "x");
    CHECK(a.clouds.size() == 4);
    CHECK_FALSE(a.metrics.valid());

    for (float& v : model.head_weight().mutable_values()) v = 0.2f;
    const auto b = evaluate(model, manifest, opt, "x");
    const auto b2 = evaluate(model, manifest, opt, "x");
    for (std::size_t i = 0; i < 4; ++i) CHECK(b.clouds[i].predicted == b2.clouds[i].predicted);

    const auto report = summarize({b, b2}, false, "pcqa evaluate\n[sampling]\npatches = 4");
    write_report_csv(report, dir / "r.csv");
    const auto text = read_file(dir / "r.csv");
    CHECK(text.find("# pcqa evaluate") != std::string::npos);
    CHECK(text.find("kind,repeat,name,ref_id,mos,predicted,srocc,plcc,rmse") != std::string::npos);
    CHECK(text.find("average") != std::string::npos);
  }

  TEST_CASE("tables align their columns") {
    Metrics m;
    m.srocc = 0.988;
    m.plcc = 0.981;
    m.rmse = 0.25;
    const auto t = format_table("Split", {{"80/20", m}, {"no_rgb", Metrics{}}});
    CHECK(t.find("0.988") != std::string::npos);
    CHECK(t.find("SROCC") != std::string::npos);
    const auto d = format_dataset_table({"Ours"}, {"A", "B"}, {{m, m}});
    CHECK(d.find("Ours") != std::string::npos);
    std::size_t width = std::string::npos;
    std::istringstream lines(t);
    for (std::string line; std::getline(lines, line);) {
      if (line.empty()) continue;
      if (width == std::string::npos) width = line.size();
      CHECK(line.size() == width);
    }
  }
}
