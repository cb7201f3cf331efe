#include "pcqa/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "pcqa/error.hpp"
#include "pcqa/metrics.hpp"
#include "pcqa/scoring.hpp"

namespace pcqa::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw UsageError("train.lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("train.momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw UsageError("train.weight_decay must be non-negative");
  if (batch < 1) throw UsageError("train.batch must be >= 1");
  if (epochs < 1) throw UsageError("train.epochs must be >= 1");
  if (patches_per_cloud < 1) throw UsageError("train.patches_per_cloud must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw UsageError("train.val_fraction must lie in [0,1)");
}

double smooth_l1(double mos, double q) {
  const double d = std::abs(mos - q);
  return d < 1.0 ? 0.5 * d * d : d - 0.5;
}

template <typename T>
ad::Tensor<T> smooth_l1_loss(const ad::Tensor<T>& pred, std::span<const T> mos) {
  if (pred.rank() != 1 || pred.dim(0) != static_cast<std::int64_t>(mos.size()))
    throw UsageError("smooth_l1_loss: prediction shape " + ad::to_string(pred.shape()) +
                     " does not match " + std::to_string(mos.size()) + " targets");
  if (mos.empty()) throw UsageError("smooth_l1_loss: empty batch");
  const auto p = pred.values();
  const T inv = T(1) / static_cast<T>(mos.size());
  T total = 0;
  for (std::size_t i = 0; i < mos.size(); ++i) {
    const T d = std::abs(mos[i] - p[i]);
    total += d < T(1) ? T(0.5) * d * d : d - T(0.5);
  }
  std::vector<T> target(mos.begin(), mos.end());
  return ad::make_result<T>(
      {}, {total * inv}, {pred.node_ptr()},
      [target = std::move(target), inv](ad::Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        const T up = self.grad[0] * inv;
        for (std::size_t i = 0; i < target.size(); ++i) {
          const T d = in.value[i] - target[i];  // dL/dq for q - mos
          g[i] += up * std::clamp(d, T(-1), T(1));
        }
      },
      "smooth_l1");
}

template <typename T>
void sgd_step(std::vector<nn::Parameter<T>>& params, SgdState<T>& state, double lr, double momentum,
              double weight_decay) {
  if (state.velocity.size() != params.size()) {
    state.velocity.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i)
      state.velocity[i].assign(static_cast<std::size_t>(params[i].tensor.numel()), T(0));
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("non-finite gradient in parameter '" + p.name + "'");
  }
  const T m = static_cast<T>(momentum), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.tensor.has_grad()) continue;
    const T wd = p.decay ? static_cast<T>(weight_decay) : T(0);
    auto w = p.tensor.mutable_values();
    const auto g = p.tensor.grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = m * v[j] + (g[j] + wd * w[j]);
      w[j] -= step * v[j];
    }
  }
}

std::vector<LabeledCloud> load_clouds(const DatasetManifest& manifest) {
  std::vector<LabeledCloud> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back({load_ply(e.path), e.ref_id, e.mos});
  return out;
}

SelectionKey selection_key(const EpochLog& log, bool has_validation) {
  const double inf = std::numeric_limits<double>::infinity();
  SelectionKey k;
  if (has_validation) {
    k.primary = std::isfinite(log.val_srocc) ? log.val_srocc : -inf;
    k.secondary = std::isfinite(log.val_loss) ? -log.val_loss : -inf;
  } else {
    k.primary = std::isfinite(log.train_loss) ? -log.train_loss : -inf;
  }
  return k;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

struct EpochData {
  std::vector<float> features;  // [samples, per]
  std::vector<float> labels;
  std::size_t per = 0;
};

void append(EpochData& data, const std::vector<FeatureTensor>& feats, double mos) {
  for (const auto& f : feats) {
    data.per = f.data.size();
    data.features.insert(data.features.end(), f.data.begin(), f.data.end());
    data.labels.push_back(static_cast<float>(mos));
  }
}

std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch) {
  std::vector<std::pair<std::size_t, std::size_t>> r;
  for (std::size_t s = 0; s < n; s += batch) r.emplace_back(s, std::min(n, s + batch));
  if (r.size() >= 2 && r.back().second - r.back().first == 1) {
    r[r.size() - 2].second = r.back().second;
    r.pop_back();
  }
  return r;
}

}  // namespace

TrainResult train(nn::Model<float>& model, const std::vector<LabeledCloud>& train_set,
                  const std::vector<LabeledCloud>& val_set, const SamplingConfig& sampling,
                  const TrainConfig& config, std::optional<ResumeState> resume,
                  const EpochCallback& on_epoch) {
  config.validate();
  sampling.validate();
  // Clouds too small for one patch are skipped, not fatal.
  auto usable = [&](const std::vector<LabeledCloud>& set, const char* role) {
    std::vector<const LabeledCloud*> keep;
    for (const auto& c : set) {
      if (c.cloud.size() >= sampling.points_per_patch) {
        keep.push_back(&c);
        continue;
      }
      std::cerr << "warning: skipping " << role << " cloud '" << c.cloud.name << "' (" << c.cloud.size()
                << " points < " << sampling.points_per_patch << ")\n";
    }
    return keep;
  };
  const auto train_clouds = usable(train_set, "training");
  const auto val_clouds = usable(val_set, "validation");
  if (train_clouds.empty()) throw DataError("train: no usable training clouds");
  if (static_cast<int>(sampling.grid()) != model.config().grid)
    throw UsageError("train: sampling grid " + std::to_string(sampling.grid()) +
                     " does not match model grid " + std::to_string(model.config().grid));

  TrainResult result;
  SgdState<float> opt;
  int first_epoch = 1;
  if (resume) {
    first_epoch = resume->completed_epochs + 1;
    opt = std::move(resume->optimizer);
    result.best_state = std::move(resume->best_state);
    result.best_key = resume->best_key;
  }

  // Validation crops are fixed for the whole run.
  std::vector<std::vector<FeatureTensor>> val_features;
  for (const auto* v : val_clouds) val_features.push_back(cloud_features(v->cloud, sampling, config.ablation));
  const bool has_val = !val_clouds.empty();

  const auto g = static_cast<std::int64_t>(sampling.grid());
  for (int epoch = first_epoch; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t epoch_seed = mix_seed(config.seed, static_cast<std::uint64_t>(epoch));

    EpochData data;
    SamplingConfig crop = sampling;
    crop.patch_count = static_cast<std::size_t>(config.patches_per_cloud);
    for (std::size_t i = 0; i < train_clouds.size(); ++i) {
      crop.seed = mix_seed(epoch_seed, i);
      append(data, cloud_features(train_clouds[i]->cloud, crop, config.ablation), train_clouds[i]->mos);
    }

    const std::size_t n = data.labels.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(epoch_seed, 0xb47c4ULL));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    double loss_sum = 0.0;
    for (const auto& [begin, end] : batch_ranges(n, static_cast<std::size_t>(config.batch))) {
      const std::size_t b = end - begin;
      std::vector<float> x(b * data.per), y(b);
      for (std::size_t j = 0; j < b; ++j) {
        const std::size_t src = order[begin + j];
        std::copy_n(data.features.begin() + static_cast<std::ptrdiff_t>(src * data.per), data.per,
                    x.begin() + static_cast<std::ptrdiff_t>(j * data.per));
        y[j] = data.labels[src];
      }
      ad::Tensor<float> batch({static_cast<std::int64_t>(b), static_cast<std::int64_t>(kFeatureChannels), g, g},
                              std::move(x));
      model.zero_grad();
      const auto pred = model.forward(batch, true);
      const auto loss = smooth_l1_loss<float>(pred, y);
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      ad::backward(loss);
      sgd_step(model.parameters(), opt, config.lr, config.momentum, config.weight_decay);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(b);
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(n);
    if (has_val) {
      std::vector<double> pred, mos;
      double vloss = 0.0;
      for (std::size_t i = 0; i < val_clouds.size(); ++i) {
        const auto scores = score_features(model, val_features[i]);
        pred.push_back(nn::aggregate_quality(scores));
        mos.push_back(val_clouds[i]->mos);
        vloss += smooth_l1(val_clouds[i]->mos, pred.back());
      }
      log.val_loss = vloss / static_cast<double>(val_clouds.size());
      try {
        log.val_srocc = eval::srocc(pred, mos);
      } catch (const Error&) {
      }
      try {
        log.val_plcc = eval::plcc(pred, mos);
      } catch (const Error&) {
      }
    }
    const SelectionKey key = selection_key(log, has_val);
    if (result.best_state.empty() || key > result.best_key) {
      result.best_key = key;
      result.best_state = model.state();
      result.best_epoch = epoch;
      log.best = true;
    }
    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(log);
    if (on_epoch) on_epoch(log, model, opt, result);
  }
  return result;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void write_train_log(const std::vector<EpochLog>& log, const std::string& config_echo,
                     const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  std::istringstream echo(config_echo);
  for (std::string line; std::getline(echo, line);) out << "# " << line << '\n';
  out << "epoch,train_loss,val_srocc,val_plcc,wall_seconds\n";
  for (const auto& e : log)
    out << e.epoch << ',' << num(e.train_loss) << ',' << num(e.val_srocc) << ','
        << num(e.val_plcc) << ',' << num(e.wall_seconds) << '\n';
}

std::vector<EpochLog> read_train_log(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<EpochLog> log;
  bool header = false;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    EpochLog e;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw DataError(path.string() + ": malformed log row '" + line + "'");
    auto parse = [](const std::string& s) {
      return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
    };
    e.epoch = std::stoi(cells[0]);
    e.train_loss = parse(cells[1]);
    e.val_srocc = parse(cells[2]);
    e.val_plcc = parse(cells[3]);
    e.wall_seconds = parse(cells[4]);
    log.push_back(e);
  }
  return log;
}

namespace {

nlohmann::json key_json(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? "inf" : "-inf";
}
double json_key(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  return j.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                       : -std::numeric_limits<double>::infinity();
}

}  // namespace

void save_resume_state(const ResumeState& state, const std::vector<nn::Parameter<float>>& params,
                       const fs::path& path) {
  std::vector<ad::NamedArray> arrays;
  for (std::size_t i = 0; i < params.size() && i < state.optimizer.velocity.size(); ++i)
    arrays.push_back({"velocity." + params[i].name, params[i].tensor.shape(), state.optimizer.velocity[i]});
  ad::save_checkpoint(arrays, path);
  nlohmann::json meta = {{"completed_epochs", state.completed_epochs},
                         {"best_primary", key_json(state.best_key.primary)},
                         {"best_secondary", key_json(state.best_key.secondary)}};
  std::ofstream out(fs::path(path).concat(".json"));
  if (!out) throw DataError("cannot write resume metadata next to '" + path.string() + "'");
  out << meta.dump(2) << '\n';
}

ResumeState load_resume_state(const fs::path& path, const std::vector<nn::Parameter<float>>& params) {
  ResumeState s;
  const auto arrays = ad::load_checkpoint(path);
  if (!arrays.empty()) {
    if (arrays.size() != params.size())
      throw DataError(path.string() + ": optimizer state does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (arrays[i].name != "velocity." + params[i].name || arrays[i].shape != params[i].tensor.shape())
        throw DataError(path.string() + ": optimizer entry '" + arrays[i].name +
                        "' does not match parameter '" + params[i].name + "'");
      s.optimizer.velocity.push_back(arrays[i].values);
    }
  }
  const fs::path meta_path = fs::path(path).concat(".json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(meta_path));
    s.completed_epochs = meta.at("completed_epochs").get<int>();
    s.best_key.primary = json_key(meta.at("best_primary"));
    s.best_key.secondary = json_key(meta.at("best_secondary"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  return s;
}

template ad::Tensor<float> smooth_l1_loss(const ad::Tensor<float>&, std::span<const float>);
template ad::Tensor<double> smooth_l1_loss(const ad::Tensor<double>&, std::span<const double>);
template void sgd_step(std::vector<nn::Parameter<float>>&, SgdState<float>&, double, double, double);
template void sgd_step(std::vector<nn::Parameter<double>>&, SgdState<double>&, double, double, double);

}  // namespace pcqa::train
