#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcqa/autodiff.hpp"
#include "pcqa/checkpoint.hpp"
#include "pcqa/features.hpp"
#include "pcqa/nn.hpp"
#include "pcqa/pc_io.hpp"
#include "pcqa/sampling.hpp"

namespace pcqa::train {

struct TrainConfig {
  double lr = 1e-5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch = 128;
  int epochs = 500;
  std::uint64_t seed = 0;
  int patches_per_cloud = 100;  // fresh crop every epoch
  Ablation ablation = Ablation::kFull;
  double val_fraction = 0.1;  // share of training references held out for model selection

  /// Throws UsageError unless rates are positive (momentum and decay may be
  /// zero), batch >= 1, epochs >= 1, patches >= 1.
  void validate() const;
};

/// Per-sample Eq. (1): 0.5 d^2 when |d| < 1, else |d| - 0.5, with d = mos - q.
double smooth_l1(double mos, double q);

/// Batch mean of smooth_l1 as a differentiable scalar. `pred` is [B].
template <typename T>
ad::Tensor<T> smooth_l1_loss(const ad::Tensor<T>& pred, std::span<const T> mos);

/// Momentum buffers, one per parameter in model order.
template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

/// v <- momentum v + (g + decay w); w <- w - lr v. Parameters flagged
/// `decay = false` skip the decay term; parameters without a gradient are
/// left alone. Throws NumericError naming the first non-finite gradient
/// before touching any weight.
template <typename T>
void sgd_step(std::vector<nn::Parameter<T>>& params, SgdState<T>& state, double lr, double momentum,
              double weight_decay);

struct LabeledCloud {
  PointCloud cloud;
  std::string ref_id;
  double mos = 0.0;
};

/// Loads every manifest entry into memory.
std::vector<LabeledCloud> load_clouds(const DatasetManifest& manifest);

struct EpochLog {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_srocc = std::numeric_limits<double>::quiet_NaN();
  double val_plcc = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
  bool best = false;
};

/// Larger is better: validation SROCC (undefined counts as worst), then
/// lower validation loss; without a validation slice, lower training loss.
struct SelectionKey {
  double primary = -std::numeric_limits<double>::infinity();
  double secondary = -std::numeric_limits<double>::infinity();
  bool operator>(const SelectionKey& o) const {
    return primary > o.primary || (primary == o.primary && secondary > o.secondary);
  }
};
SelectionKey selection_key(const EpochLog& log, bool has_validation);

/// Where an interrupted run picks up.
struct ResumeState {
  int completed_epochs = 0;
  SgdState<float> optimizer;
  std::vector<ad::NamedArray> best_state;
  SelectionKey best_key;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::vector<ad::NamedArray> best_state;
  SelectionKey best_key;
  int best_epoch = 0;
};

/// Called after every epoch with the model's current weights and optimizer
/// state, e.g. to persist a resumable checkpoint.
using EpochCallback =
    std::function<void(const EpochLog&, const nn::Model<float>&, const SgdState<float>&,
                       const TrainResult&)>;

/// Epoch loop: re-crop `patches_per_cloud` patches from every training cloud
/// with an epoch-specific seed, label each with its cloud MOS, shuffle, step
/// SGD per batch, then score the validation clouds (fixed `sampling.seed`)
/// and keep the best weights. A trailing batch of one sample is merged into
/// the previous batch so batch norm always sees two or more samples.
TrainResult train(nn::Model<float>& model, const std::vector<LabeledCloud>& train_set,
                  const std::vector<LabeledCloud>& val_set, const SamplingConfig& sampling,
                  const TrainConfig& config, std::optional<ResumeState> resume = std::nullopt,
                  const EpochCallback& on_epoch = {});

/// CSV header: epoch,train_loss,val_srocc,val_plcc,wall_seconds. Leading
/// `# ` lines carry `config_echo`.
void write_train_log(const std::vector<EpochLog>& log, const std::string& config_echo,
                     const std::filesystem::path& path);
std::vector<EpochLog> read_train_log(const std::filesystem::path& path);

/// Optimizer sidecar for `--resume`: velocities plus progress counters.
void save_resume_state(const ResumeState& state, const std::vector<nn::Parameter<float>>& params,
                       const std::filesystem::path& path);
ResumeState load_resume_state(const std::filesystem::path& path,
                              const std::vector<nn::Parameter<float>>& params);

/// Deterministic 64-bit seed derivation (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace pcqa::train
