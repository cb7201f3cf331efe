#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcqa/nn.hpp"
#include "pcqa/sampling.hpp"
#include "pcqa/training.hpp"

namespace pcqa {

struct EvalConfig {
  bool logistic = false;
  double train_fraction = 0.8;
  int repeats = 5;
  std::uint64_t split_seed = 0;
};

/// Everything a run needs, loaded from an INI-style file:
///
///   [sampling]  patches, points, seed
///   [model]     repeats, widths, head_dim, kernel, scale, expansion,
///               stem_concat, head_bias, seed
///   [train]     lr, momentum, weight_decay, batch, epochs, seed,
///               patches_per_cloud, ablation, val_fraction
///   [eval]      logistic, train_fraction, repeats, split_seed
///   [run]       threads
///
/// `model.grid` follows from `sampling.points`. Unknown sections or keys are
/// rejected.
struct RunConfig {
  SamplingConfig sampling;
  nn::ModelConfig model;
  std::uint64_t model_seed = 0;
  train::TrainConfig train;
  EvalConfig eval;
  int threads = 0;  // 0 = all cores

  /// Applies "section.key" = value. Throws UsageError for unknown keys or
  /// unparsable values.
  void set(const std::string& dotted_key, const std::string& value);
  /// Validates every field and syncs the derived model grid.
  void finalize();
  /// Canonical INI text; parsing it back reproduces this config. The [run]
  /// section only affects speed, so artifact echoes may leave it out.
  std::string to_ini(bool include_run = true) const;

  /// Applies the keys present in `text` on top of the current values.
  void merge(const std::string& text, const std::string& origin = "<config>");
  void merge_file(const std::filesystem::path& path);

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  /// Every accepted "section.key".
  static std::vector<std::string> keys();
};

}  // namespace pcqa
