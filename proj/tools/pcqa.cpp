// pcqa: command-line front end for extraction, training, prediction and
// evaluation of the no-reference point cloud quality model.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "pcqa/checkpoint.hpp"
#include "pcqa/config.hpp"
#include "pcqa/error.hpp"
#include "pcqa/eval.hpp"
#include "pcqa/features.hpp"
#include "pcqa/gradcheck.hpp"
#include "pcqa/nn.hpp"
#include "pcqa/pc_io.hpp"
#include "pcqa/scoring.hpp"
#include "pcqa/synth.hpp"
#include "pcqa/training.hpp"

namespace fs = std::filesystem;
using namespace pcqa;

namespace {

// Config layering: checkpoint sidecar, then --config, then --set, then
// dedicated flags. Dedicated flags record (key, value) pairs as parsed.
struct ConfigSource {
  std::string file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;
};

void add_config_options(CLI::App* cmd, ConfigSource& src) {
  cmd->add_option("--config", src.file, "INI config file; flags override its values");
  cmd->add_option("--set", src.sets, "Override a config key, e.g. --set train.lr=1e-4 (repeatable)");
}

template <typename T>
void add_keyed(CLI::App* cmd, ConfigSource& src, const std::string& flag, const std::string& key,
               const std::string& help) {
  cmd->add_option_function<T>(
      flag,
      [&src, key](const T& v) {
        std::ostringstream s;
        s.precision(17);
        s << v;
        src.flags.emplace_back(key, s.str());
      },
      help + " [" + key + "]");
}

int g_threads = -1;

RunConfig resolve(const ConfigSource& src, const std::vector<fs::path>& sidecars = {}) {
  RunConfig c;
  for (const auto& p : sidecars)
    if (fs::exists(p)) c.merge_file(p);
  if (!src.file.empty()) c.merge_file(src.file);
  for (const auto& s : src.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    c.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : src.flags) c.set(k, v);
  if (g_threads >= 0) c.threads = g_threads;
  c.finalize();
#ifdef _OPENMP
  if (c.threads > 0) omp_set_num_threads(c.threads);
#endif
  return c;
}

std::string echo(const RunConfig& c, const std::string& command) {
  return "pcqa " + command + "\n" + c.to_ini(false);
}

void write_sidecar(const fs::path& artifact, const std::string& text) {
  const fs::path p = fs::path(artifact).concat(".ini");
  std::ofstream out(p);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  std::istringstream in(text);
  std::string first;
  std::getline(in, first);
  out << "# " << first << '\n' << in.rdbuf();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

void save_model(const nn::Model<float>& model, const fs::path& path, const std::string& echo_text) {
  ad::save_checkpoint(model.state(), path);
  write_sidecar(path, echo_text);
}

nn::Model<float> load_model(const RunConfig& cfg, const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw DataError("checkpoint '" + ckpt.string() + "' not found");
  nn::Model<float> model(cfg.model, cfg.model_seed);
  model.load_state(ad::load_checkpoint(ckpt));
  return model;
}

std::string num(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

// ---------------------------------------------------------------- training

struct TrainRun {
  fs::path best;
  train::TrainResult result;
};

TrainRun run_training(const RunConfig& cfg, const fs::path& split_dir, const fs::path& out,
                      const std::optional<fs::path>& resume, const std::string& echo_text) {
  const DatasetManifest train_manifest = load_manifest(split_dir / "train.csv");
  if (fs::exists(split_dir / "test.csv")) {
    const auto test_refs = load_manifest(split_dir / "test.csv").reference_ids();
    for (const auto& r : train_manifest.reference_ids())
      if (std::binary_search(test_refs.begin(), test_refs.end(), r))
        throw DataError(split_dir.string() + ": reference '" + r + "' appears in both train and test");
  }
  const auto [proper, val] =
      eval::hold_out(train_manifest, cfg.train.val_fraction, train::mix_seed(cfg.train.seed, 0x76616cULL));
  const auto train_set = train::load_clouds(proper);
  const auto val_set = train::load_clouds(val);

  fs::create_directories(out);
  nn::Model<float> model(cfg.model, cfg.model_seed);
  std::optional<train::ResumeState> state;
  std::vector<train::EpochLog> history;
  if (resume) {
    const fs::path dir = resume->parent_path();
    model.load_state(ad::load_checkpoint(*resume));
    state = train::load_resume_state(dir / (resume->stem().string() + ".opt.pcqw"), model.parameters());
    if (fs::exists(dir / "best.pcqw")) state->best_state = ad::load_checkpoint(dir / "best.pcqw");
    if (fs::exists(dir / "train_log.csv"))
      for (const auto& e : train::read_train_log(dir / "train_log.csv"))
        if (e.epoch <= state->completed_epochs) history.push_back(e);
    std::cout << "resuming after epoch " << state->completed_epochs << '\n';
  }

  const fs::path best = out / "best.pcqw";
  auto on_epoch = [&](const train::EpochLog& log, const nn::Model<float>& m,
                      const train::SgdState<float>& opt, const train::TrainResult& r) {
    history.push_back(log);
    train::write_train_log(history, echo_text, out / "train_log.csv");
    save_model(m, out / "last.pcqw", echo_text);
    train::ResumeState rs;
    rs.completed_epochs = log.epoch;
    rs.optimizer = opt;
    rs.best_key = r.best_key;
    train::save_resume_state(rs, m.parameters(), out / "last.opt.pcqw");
    if (log.best) {
      ad::save_checkpoint(r.best_state, best);
      write_sidecar(best, echo_text);
    }
    std::cout << "epoch " << log.epoch << '/' << cfg.train.epochs << "  loss " << num(log.train_loss)
              << "  val_srocc " << num(log.val_srocc, 4) << "  val_plcc " << num(log.val_plcc, 4)
              << "  " << num(log.wall_seconds, 2) << " s" << (log.best ? "  *" : "") << std::endl;
  };

  std::cout << "training on " << train_set.size() << " clouds, validating on " << val_set.size()
            << " clouds, " << model.parameter_count() << " parameters\n";
  TrainRun run;
  run.result = train::train(model, train_set, val_set, cfg.sampling, cfg.train, std::move(state), on_epoch);
  if (!run.result.best_state.empty()) {
    ad::save_checkpoint(run.result.best_state, best);
    write_sidecar(best, echo_text);
  }
  run.best = best;
  return run;
}

// ---------------------------------------------------------------- evaluation

// Final component of a folder path, tolerating a trailing separator.
std::string dir_label(const fs::path& dir) {
  const fs::path p = dir.has_filename() ? dir : dir.parent_path();
  return p.filename().string();
}

eval::RepeatResult evaluate_split(const RunConfig& cfg, const fs::path& ckpt, const fs::path& split_dir) {
  auto model = load_model(cfg, ckpt);
  eval::EvalOptions opt;
  opt.sampling = cfg.sampling;
  opt.ablation = cfg.train.ablation;
  opt.logistic = cfg.eval.logistic;
  return eval::evaluate(model, load_manifest(split_dir / "test.csv"), opt,
                        dir_label(split_dir));
}

std::string ablation_label(Ablation a) {
  switch (a) {
    case Ablation::kNoRgb: return "Without RGB data";
    case Ablation::kNoFrequency: return "Without Frequency";
    default: return "Proposed";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"No-reference point cloud quality assessment"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--threads", g_threads, "Worker threads; 0 uses every core (overrides run.threads)")
      ->check(CLI::NonNegativeNumber);

  std::function<int()> action;
  ConfigSource src;

  // extract
  auto* extract = app.add_subcommand("extract", "Cut patches from a cloud and write a PCQF1 feature file");
  std::string cloud_path, out_path;
  extract->add_option("--cloud", cloud_path, "Input PLY")->required();
  extract->add_option("--out", out_path, "Output PCQF1 file")->required();
  add_config_options(extract, src);
  add_keyed<std::size_t>(extract, src, "--patches", "sampling.patches", "Patches per cloud");
  add_keyed<std::size_t>(extract, src, "--points", "sampling.points", "Points per patch (square power of two)");
  add_keyed<std::uint64_t>(extract, src, "--seed", "sampling.seed", "Sampling seed");
  add_keyed<std::string>(extract, src, "--ablation", "train.ablation", "full | no_rgb | no_frequency");
  extract->callback([&] {
    action = [&] {
      const RunConfig cfg = resolve(src);
      const auto cloud = load_ply(cloud_path);
      const auto feats = cloud_features(cloud, cfg.sampling, cfg.train.ablation);
      write_feature_dump(feats, out_path);
      write_sidecar(out_path, echo(cfg, "extract"));
      const auto g = cfg.sampling.grid();
      std::cout << "wrote " << out_path << ": " << feats.size() << " x " << kFeatureChannels << " x "
                << g << " x " << g << " from " << cloud.size() << " points\n";
      return 0;
    };
  });

  // split
  auto* split = app.add_subcommand("split", "Write reference-disjoint train/test manifests");
  std::string manifest_path, split_out;
  split->add_option("--manifest", manifest_path, "Dataset manifest CSV (path,mos,ref_id)")->required();
  split->add_option("--out", split_out, "Output directory; one numbered folder per repeat")->required();
  add_config_options(split, src);
  add_keyed<double>(split, src, "--fraction", "eval.train_fraction", "Share of references used for training");
  add_keyed<int>(split, src, "--repeats", "eval.repeats", "Number of random splits");
  add_keyed<std::uint64_t>(split, src, "--seed", "eval.split_seed", "Split seed");
  split->callback([&] {
    action = [&] {
      const RunConfig cfg = resolve(src);
      const auto manifest = load_manifest(manifest_path);
      const auto splits = eval::make_splits(manifest, cfg.eval.train_fraction,
                                            static_cast<std::size_t>(cfg.eval.repeats), cfg.eval.split_seed);
      const std::string text = echo(cfg, "split");
      fs::create_directories(split_out);
      for (std::size_t k = 0; k < splits.size(); ++k) {
        const fs::path dir = fs::path(split_out) / std::to_string(k + 1);
        eval::write_split(splits[k], dir, text);
        std::cout << dir.string() << ": " << splits[k].train_refs.size() << " train refs ("
                  << splits[k].train.size() << " clouds) / " << splits[k].test_refs.size()
                  << " test refs (" << splits[k].test.size() << " clouds)\n";
      }
      write_text(fs::path(split_out) / "split.ini", "# pcqa split\n" + cfg.to_ini(false));
      return 0;
    };
  });

  // train
  auto* train_cmd = app.add_subcommand("train", "Train on a split folder; writes log and best checkpoint");
  std::string split_dir, train_out, resume_path;
  train_cmd->add_option("--split", split_dir, "Split folder containing train.csv")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint directory")->required();
  train_cmd->add_option("--resume", resume_path, "Continue from a last.pcqw written by an earlier run");
  add_config_options(train_cmd, src);
  add_keyed<int>(train_cmd, src, "--epochs", "train.epochs", "Epochs");
  add_keyed<double>(train_cmd, src, "--lr", "train.lr", "Learning rate");
  add_keyed<int>(train_cmd, src, "--batch", "train.batch", "Mini-batch size");
  add_keyed<std::uint64_t>(train_cmd, src, "--seed", "train.seed", "Training seed");
  add_keyed<int>(train_cmd, src, "--patches", "train.patches_per_cloud", "Patches per cloud per epoch");
  add_keyed<std::string>(train_cmd, src, "--ablation", "train.ablation", "full | no_rgb | no_frequency");
  train_cmd->callback([&] {
    action = [&] {
      std::vector<fs::path> sidecars;
      if (!resume_path.empty()) sidecars.push_back(fs::path(resume_path).concat(".ini"));
      const RunConfig cfg = resolve(src, sidecars);
      std::optional<fs::path> resume;
      if (!resume_path.empty()) resume = fs::path(resume_path);
      const auto run = run_training(cfg, split_dir, train_out, resume, echo(cfg, "train"));
      std::cout << "best epoch " << run.result.best_epoch << " -> " << run.best.string() << '\n';
      return 0;
    };
  });

  // predict
  auto* predict = app.add_subcommand("predict", "Score one cloud; prints Q_f, patch scores and wall time");
  std::string ckpt_path;
  predict->add_option("--ckpt", ckpt_path, "Checkpoint (its .ini sidecar supplies the model config)")->required();
  predict->add_option("--cloud", cloud_path, "Input PLY")->required();
  add_config_options(predict, src);
  add_keyed<std::size_t>(predict, src, "--patches", "sampling.patches", "Patches per cloud");
  add_keyed<std::uint64_t>(predict, src, "--seed", "sampling.seed", "Sampling seed");
  predict->callback([&] {
    action = [&] {
      const RunConfig cfg = resolve(src, {fs::path(ckpt_path).concat(".ini")});
      auto model = load_model(cfg, ckpt_path);
      const auto t0 = std::chrono::steady_clock::now();
      const auto cloud = load_ply(cloud_path);
      const auto score = predict_cloud(model, cloud, cfg.sampling, cfg.train.ablation);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout.precision(9);
      std::cout << "cloud " << cloud.name << " (" << cloud.size() << " points)\n";
      std::cout << "quality " << score.quality << '\n';
      std::cout << "patch_scores";
      for (double s : score.patch_scores) std::cout << ' ' << s;
      std::cout << "\nwall_seconds " << num(secs, 3) << '\n';
      return 0;
    };
  });

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Score test clouds of one or more splits and report metrics");
  std::vector<std::string> ckpts, split_dirs;
  std::string report_path, dataset_name = "dataset";
  evaluate->add_option("--ckpt", ckpts, "Checkpoint per split (or one for all)")->required();
  evaluate->add_option("--split", split_dirs, "Split folder(s) containing test.csv")->required();
  evaluate->add_option("--report", report_path, "Report CSV; an aligned table goes to <report>.txt")->required();
  evaluate->add_option("--dataset", dataset_name, "Dataset label for the summary table");
  add_config_options(evaluate, src);
  evaluate->add_flag_function(
      "--logistic", [&](std::int64_t) { src.flags.emplace_back("eval.logistic", "true"); },
      "Map predictions through a fitted 4-parameter logistic before PLCC/RMSE [eval.logistic]");
  evaluate->callback([&] {
    action = [&] {
      if (ckpts.size() != 1 && ckpts.size() != split_dirs.size())
        throw UsageError("evaluate: give one --ckpt, or one per --split");
      const RunConfig cfg = resolve(src, {fs::path(ckpts.front()).concat(".ini")});
      std::vector<eval::RepeatResult> repeats;
      for (std::size_t i = 0; i < split_dirs.size(); ++i)
        repeats.push_back(evaluate_split(cfg, ckpts.size() == 1 ? ckpts[0] : ckpts[i], split_dirs[i]));
      const auto report = eval::summarize(std::move(repeats), cfg.eval.logistic, echo(cfg, "evaluate"));
      eval::write_report_csv(report, report_path);

      std::vector<std::pair<std::string, eval::Metrics>> rows;
      for (const auto& r : report.repeats) rows.emplace_back("split " + r.label, r.metrics);
      rows.emplace_back("average", report.average);
      const std::string table = eval::format_table("Split", rows) + "\n" +
                                eval::format_dataset_table({"Proposed"}, {dataset_name}, {{report.average}});
      write_text(fs::path(report_path).concat(".txt"), table);
      std::cout << table;
      if (!report.average.valid())
        throw NumericError("degenerate metrics: " +
                           (report.average.error.empty() ? std::string("undefined correlation") : report.average.error));
      return 0;
    };
  });

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Retrain and test with one attribute group removed");
  std::vector<std::string> modes;
  std::string ablate_out;
  ablate->add_option("--mode", modes, "no_rgb | no_frequency | full (repeatable)")->required();
  ablate->add_option("--split", split_dirs, "Split folder(s)")->required();
  ablate->add_option("--out", ablate_out, "Output directory")->required();
  add_config_options(ablate, src);
  add_keyed<int>(ablate, src, "--epochs", "train.epochs", "Epochs");
  ablate->add_flag_function(
      "--logistic", [&](std::int64_t) { src.flags.emplace_back("eval.logistic", "true"); },
      "Map predictions through a fitted 4-parameter logistic before PLCC/RMSE [eval.logistic]");
  ablate->callback([&] {
    action = [&] {
      const RunConfig base = resolve(src);
      std::vector<std::pair<std::string, eval::Metrics>> rows;
      std::ostringstream csv;
      bool degenerate = false;
      for (const auto& mode : modes) {
        RunConfig cfg = base;
        cfg.train.ablation = parse_ablation(mode);
        const std::string text = echo(cfg, "ablate");
        std::vector<eval::RepeatResult> repeats;
        for (const auto& sd : split_dirs) {
          const fs::path out = fs::path(ablate_out) / mode / dir_label(sd);
          const auto run = run_training(cfg, sd, out, std::nullopt, text);
          repeats.push_back(evaluate_split(cfg, run.best, sd));
        }
        const auto report = eval::summarize(std::move(repeats), cfg.eval.logistic, text);
        eval::write_report_csv(report, fs::path(ablate_out) / mode / "report.csv");
        rows.emplace_back(ablation_label(cfg.train.ablation), report.average);
        csv << mode << ',' << num(report.average.srocc) << ',' << num(report.average.plcc) << ','
            << num(report.average.rmse) << '\n';
        degenerate = degenerate || !report.average.valid();
      }
      const std::string table = eval::format_table("Model", rows);
      write_text(fs::path(ablate_out) / "ablation.txt", table);
      std::ostringstream header;
      std::istringstream lines(echo(base, "ablate"));
      for (std::string line; std::getline(lines, line);) header << "# " << line << '\n';
      write_text(fs::path(ablate_out) / "ablation.csv", header.str() + "mode,srocc,plcc,rmse\n" + csv.str());
      std::cout << table;
      if (degenerate) throw NumericError("degenerate metrics in at least one ablation mode");
      return 0;
    };
  });

  // census
  auto* census = app.add_subcommand("census", "Count learnable parameters");
  std::string census_ckpt;
  census->add_option("--ckpt", census_ckpt, "Count the parameters stored in a checkpoint instead");
  add_config_options(census, src);
  add_keyed<double>(census, src, "--scale", "model.scale", "Width multiplier");
  census->callback([&] {
    action = [&] {
      const RunConfig cfg = resolve(src);
      std::int64_t count = 0;
      if (!census_ckpt.empty()) {
        for (const auto& a : ad::load_checkpoint(census_ckpt))
          if (!a.name.ends_with(".running_mean") && !a.name.ends_with(".running_var"))
            count += static_cast<std::int64_t>(a.values.size());
      } else {
        count = nn::Model<float>(cfg.model, cfg.model_seed).parameter_count();
      }
      std::cout << "parameters " << count << '\n';
      std::cout << "delta_from_8000000 " << (count - 8000000) << '\n';
      return 0;
    };
  });

  // init
  auto* init = app.add_subcommand("init", "Write a freshly initialized checkpoint");
  std::string init_out;
  init->add_option("--out", init_out, "Output checkpoint")->required();
  add_config_options(init, src);
  add_keyed<std::uint64_t>(init, src, "--seed", "model.seed", "Initialization seed");
  add_keyed<double>(init, src, "--scale", "model.scale", "Width multiplier");
  init->callback([&] {
    action = [&] {
      const RunConfig cfg = resolve(src);
      const nn::Model<float> model(cfg.model, cfg.model_seed);
      save_model(model, init_out, echo(cfg, "init"));
      std::cout << "wrote " << init_out << " (" << model.parameter_count() << " parameters)\n";
      return 0;
    };
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and the reduced model");
  gradcheck::Options gc_opt;
  gc->add_option("--seed", gc_opt.seed, "Random seed");
  gc->add_option("--samples", gc_opt.model_samples, "Model parameters sampled");
  gc->add_flag("!--no-model", gc_opt.model, "Skip the full-model check");
  gc->callback([&] {
    action = [&] {
      resolve(src);
      bool ok = true;
      for (const auto& o : gradcheck::run_suite(gc_opt)) {
        char line[256];
        std::snprintf(line, sizeof(line), "%s  %-34s max_err %.3e  tol %.0e  (%zu checked)",
                      o.passed() ? "PASS" : "FAIL", o.name.c_str(), o.max_error, o.tolerance, o.checked);
        std::cout << line << '\n';
        ok = ok && o.passed();
      }
      if (!ok) throw NumericError("gradient check failed");
      return 0;
    };
  });

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset with a manifest");
  synth::DatasetSpec spec;
  std::string synth_out;
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--refs", spec.references, "Reference shapes")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--levels", spec.levels, "Degradation levels per reference")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--points", spec.points, "Points per cloud")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", spec.seed, "Generator seed");
  synth_cmd->callback([&] {
    action = [&] {
      resolve(src);
      const auto m = synth::write_dataset(spec, synth_out, "pcqa synth");
      std::cout << "wrote " << m.size() << " clouds and " << (fs::path(synth_out) / "manifest.csv").string()
                << '\n';
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ErrorKind::kUsage);
  }

  try {
    return action();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (e.kind() == ErrorKind::kUsage) std::cerr << "Run 'pcqa <command> --help' for usage.\n";
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::kData);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::kData);
  }
}
