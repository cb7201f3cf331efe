#include <doctest.h>

#include <fstream>

#include "pcqa/config.hpp"
#include "pcqa/error.hpp"
#include "pcqa/synth.hpp"
#include "temp_dir.hpp"

using namespace pcqa;

TEST_SUITE("config") {
  TEST_CASE("defaults carry the reference hyperparameters") {
    RunConfig c;
    c.finalize();
    CHECK(c.sampling.patch_count == 100);
    CHECK(c.sampling.points_per_patch == 1024);
    CHECK(c.model.grid == 32);
    CHECK(c.train.lr == 1e-5);
    CHECK(c.train.momentum == 0.9);
    CHECK(c.train.weight_decay == 1e-4);
    CHECK(c.train.batch == 128);
    CHECK(c.train.epochs == 500);
    CHECK(c.eval.train_fraction == 0.8);
    CHECK(c.eval.repeats == 5);
  }

  TEST_CASE("ini round trip reproduces every key") {
    RunConfig c;
    c.set("sampling.points", "256");
    c.set("model.scale", "0.125");
    c.set("model.widths", "8,16,32,32,64");
    c.set("train.lr", "0.003");
    c.set("train.ablation", "no_frequency");
    c.set("eval.logistic", "true");
    c.set("run.threads", "3");
    c.finalize();
    const auto text = c.to_ini();
    auto back = RunConfig::parse(text);
    back.finalize();
    CHECK(back.to_ini() == text);
    CHECK(back.model.grid == 16);
    CHECK(back.train.ablation == Ablation::kNoFrequency);
    CHECK(back.threads == 3);
    CHECK(c.to_ini(false).find("[run]") == std::string::npos);
  }

  TEST_CASE("later layers override earlier ones") {
    auto c = RunConfig::parse("[train]\nepochs = 7\nbatch = 4 # inline\n; comment\n");
    c.merge("[train]\nepochs = 9\n");
    c.set("train.batch", "16");
    CHECK(c.train.epochs == 9);
    CHECK(c.train.batch == 16);
  }

  TEST_CASE("unknown keys and bad values are rejected with a location") {
    try {
      RunConfig::parse("[train]\nlearning_rate = 1\n", "cfg.ini");
      FAIL("expected rejection");
    } catch (const UsageError& e) {
      CHECK(std::string(e.what()).find("cfg.ini:2") != std::string::npos);
    }
    CHECK_THROWS_AS(RunConfig::parse("[bogus]\nx = 1\n"), UsageError);
    CHECK_THROWS_AS(RunConfig::parse("[train]\nepochs = many\n"), UsageError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nwidths = 1,2,3,4,5,6\n"), UsageError);
    RunConfig c;
    CHECK_THROWS_AS(c.set("nope", "1"), UsageError);
    c.set("sampling.points", "1000");
    CHECK_THROWS_AS(c.finalize(), UsageError);
  }

  TEST_CASE("file loading") {
    TempDir dir;
    std::ofstream(dir / "c.ini") << "[sampling]\npatches = 12\n";
    CHECK(RunConfig::load(dir / "c.ini").sampling.patch_count == 12);
    CHECK_THROWS_AS(RunConfig::load(dir / "missing.ini"), Error);
    CHECK(RunConfig::keys().size() > 20);
  }

  TEST_CASE("synthetic dataset writes a loadable manifest") {
    TempDir dir;
    synth::DatasetSpec spec;
    spec.references = 2;
    spec.levels = 3;
    spec.points = 200;
    const auto m = synth::write_dataset(spec, dir / "data");
    CHECK(m.size() == 6);
    const auto back = load_manifest(dir / "data/manifest.csv");
    CHECK(back.size() == 6);
    CHECK(back.reference_ids().size() == 2);
    const auto cloud = load_ply(back.entries[0].path);
    CHECK(cloud.size() == 200);
    CHECK(synth::synthetic_mos(0, 0, 3) > synth::synthetic_mos(0, 2, 3));
  }
}
