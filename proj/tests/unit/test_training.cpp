#include <doctest.h>

#include <cmath>

#include "pcqa/error.hpp"
#include "pcqa/scoring.hpp"
#include "pcqa/synth.hpp"
#include "pcqa/training.hpp"
#include "temp_dir.hpp"

using namespace pcqa;

namespace {

std::vector<nn::Parameter<double>> single(double w, double g, bool decay = true) {
  ad::Tensor<double> t({1}, {w}, true);
  t.mutable_grad()[0] = g;
  return {{"w", t, decay}};
}

nn::ModelConfig tiny_model() {
  nn::ModelConfig c;
  c.repeats = {1, 1, 1, 1, 1};
  c.scale = 1.0 / 16;
  c.grid = 8;
  return c;
}

std::vector<train::LabeledCloud> tiny_set(int n, std::uint64_t seed) {
  std::vector<train::LabeledCloud> out;
  for (int i = 0; i < n; ++i)
    out.push_back({synth::make_cloud(i % 5, i % 4, 300, seed + i), "r" + std::to_string(i), 1.0 + i});
  return out;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("smooth l1 branches and knee") {
    CHECK(train::smooth_l1(3.0, 3.5) == 0.125);
    CHECK(train::smooth_l1(5.0, 2.0) == 2.5);
    CHECK(train::smooth_l1(4.0, 4.0) == 0.0);
    CHECK(train::smooth_l1(1.0, 2.0) == 0.5);
    CHECK(std::abs(train::smooth_l1(0.0, 1.0 - 1e-9) - 0.5) < 1e-8);
    CHECK(std::abs(train::smooth_l1(0.0, 1.0 + 1e-9) - 0.5) < 1e-8);
  }

  TEST_CASE("batched loss is the mean and its gradient is clamped") {
    std::vector<double> mos;
    std::vector<double> q;
    for (double d = -3; d <= 3.0001; d += 0.25) {
      mos.push_back(2.0);
      q.push_back(2.0 + d);
    }
    ad::Tensor<double> pred({static_cast<std::int64_t>(q.size())}, q, true);
    auto loss = train::smooth_l1_loss<double>(pred, mos);
    double expect = 0;
    for (std::size_t i = 0; i < q.size(); ++i) expect += train::smooth_l1(mos[i], q[i]) / q.size();
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-14));
    CHECK(loss.item() >= 0);
    ad::backward(loss);
    const double n = static_cast<double>(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) {
      CHECK(std::abs(pred.grad()[i] * n) <= 1.0 + 1e-12);
      CHECK(pred.grad()[i] * n == doctest::Approx(std::clamp(q[i] - mos[i], -1.0, 1.0)));
    }
  }

  TEST_CASE("sgd reference steps") {
    auto p = single(0.0, 0.0);
    train::SgdState<double> s;
    train::sgd_step(p, s, 0.1, 0.9, 0.0);
    CHECK(p[0].tensor.values()[0] == 0.0);

    p = single(1.0, 1.0);
    s = {};
    train::sgd_step(p, s, 0.1, 0.0, 0.0);
    CHECK(p[0].tensor.values()[0] == doctest::Approx(0.9).epsilon(1e-15));

    p = single(0.0, 1.0);
    s = {};
    train::sgd_step(p, s, 0.1, 0.9, 0.0);
    CHECK(p[0].tensor.values()[0] == doctest::Approx(-0.1).epsilon(1e-15));
    p[0].tensor.mutable_grad()[0] = 1.0;
    train::sgd_step(p, s, 0.1, 0.9, 0.0);
    CHECK(p[0].tensor.values()[0] == doctest::Approx(-0.29).epsilon(1e-15));
  }

  TEST_CASE("zero learning rate changes nothing and decay exemptions hold") {
    auto p = single(2.0, 5.0);
    train::SgdState<double> s;
    train::sgd_step(p, s, 0.0, 0.9, 1e-4);
    CHECK(p[0].tensor.values()[0] == 2.0);

    auto d = single(2.0, 0.0, true);
    auto e = single(2.0, 0.0, false);
    train::SgdState<double> sd, se;
    train::sgd_step(d, sd, 1.0, 0.0, 0.5);
    train::sgd_step(e, se, 1.0, 0.0, 0.5);
    CHECK(d[0].tensor.values()[0] == doctest::Approx(1.0));
    CHECK(e[0].tensor.values()[0] == 2.0);
  }

  TEST_CASE("non finite gradient aborts before any update") {
    ad::Tensor<double> a({1}, {1.0}, true), b({1}, {1.0}, true);
    a.mutable_grad()[0] = 1.0;
    b.mutable_grad()[0] = std::nan("");
    std::vector<nn::Parameter<double>> p{{"first", a, true}, {"second.weight", b, true}};
    train::SgdState<double> s;
    try {
      train::sgd_step(p, s, 0.1, 0.9, 0.0);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("second.weight") != std::string::npos);
    }
    CHECK(a.values()[0] == 1.0);
  }

  TEST_CASE("config validation") {
    train::TrainConfig c;
    c.validate();
    c.batch = 0;
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = {};
    c.lr = -1;
    CHECK_THROWS_AS(c.validate(), UsageError);
  }

  TEST_CASE("two epoch run is bit identical and selects its best epoch") {
    const auto tr = tiny_set(4, 10);
    const auto val = tiny_set(3, 50);
    SamplingConfig sampling{4, 64, 3};
    train::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 4;
    cfg.lr = 1e-3;
    cfg.patches_per_cloud = 3;
    cfg.seed = 7;
    auto run = [&] {
      nn::Model<float> m(tiny_model(), 1);
      auto r = train::train(m, tr, val, sampling, cfg);
      return std::make_pair(r, m.state());
    };
    const auto [a, sa] = run();
    const auto [b, sb] = run();
    REQUIRE(a.log.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
      CHECK(a.log[e].train_loss == b.log[e].train_loss);
      CHECK(std::isnan(a.log[e].val_srocc) == std::isnan(b.log[e].val_srocc));
      if (!std::isnan(a.log[e].val_srocc)) CHECK(a.log[e].val_srocc == b.log[e].val_srocc);
    }
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa[i].values == sb[i].values);
    for (const auto& e : a.log) CHECK_FALSE(train::selection_key(e, true) > a.best_key);
    CHECK(a.best_epoch >= 1);
  }

  TEST_CASE("no clouds large enough is a data error") {
    nn::Model<float> m(tiny_model(), 1);
    train::TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train::train(m, tiny_set(2, 0), {}, SamplingConfig{4, 1024, 0}, cfg), DataError);
  }

  TEST_CASE("no_rgb zeroes the color channels without changing the shape") {
    const auto cloud = synth::make_cloud(0, 1, 400, 3);
    const auto full = cloud_features(cloud, SamplingConfig{2, 64, 0});
    const auto cut = cloud_features(cloud, SamplingConfig{2, 64, 0}, Ablation::kNoRgb);
    REQUIRE(cut.size() == full.size());
    CHECK(cut[0].data.size() == full[0].data.size());
    for (std::size_t ch = 3; ch < 6; ++ch)
      for (double x : cut[0].channel(ch)) CHECK(x == 0.0);
    CHECK(std::equal(cut[0].channel(6).begin(), cut[0].channel(6).end(), full[0].channel(6).begin()));
  }

  TEST_CASE("log and resume state round trip") {
    TempDir dir;
    std::vector<train::EpochLog> log(2);
    log[0] = {1, 0.5, 0.25, 0.5, 0.4, 1.5, true};
    log[1] = {2, 0.25, std::nan(""), std::nan(""), std::nan(""), 1.0, false};
    train::write_train_log(log, "echo line", dir / "log.csv");
    const auto text = read_file(dir / "log.csv");
    CHECK(text.find("epoch,train_loss,val_srocc,val_plcc,wall_seconds") != std::string::npos);
    const auto back = train::read_train_log(dir / "log.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].train_loss == 0.5);
    CHECK(back[0].val_srocc == 0.25);
    CHECK(std::isnan(back[1].val_srocc));

    nn::Model<float> m(tiny_model(), 2);
    train::ResumeState st;
    st.completed_epochs = 3;
    st.best_key = {0.75, -std::numeric_limits<double>::infinity()};
    for (const auto& p : m.parameters()) st.optimizer.velocity.emplace_back(p.tensor.numel(), 0.125f);
    train::save_resume_state(st, m.parameters(), dir / "opt.pcqw");
    const auto r = train::load_resume_state(dir / "opt.pcqw", m.parameters());
    CHECK(r.completed_epochs == 3);
    CHECK(r.best_key.primary == 0.75);
    CHECK(std::isinf(r.best_key.secondary));
    CHECK(r.optimizer.velocity == st.optimizer.velocity);
  }

  TEST_CASE("seed mixing separates streams") {
    CHECK(train::mix_seed(1, 2) != train::mix_seed(2, 1));
    CHECK(train::mix_seed(1, 2) == train::mix_seed(1, 2));
  }
}
