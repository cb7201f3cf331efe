#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pcqa/features.hpp"
#include "pcqa/metrics.hpp"
#include "pcqa/nn.hpp"
#include "pcqa/pc_io.hpp"
#include "pcqa/sampling.hpp"

namespace pcqa::eval {

/// One content-disjoint partition: every ref_id lands on exactly one side.
struct Split {
  std::vector<std::string> train_refs;
  std::vector<std::string> test_refs;
  DatasetManifest train;
  DatasetManifest test;
};

/// Shuffles the reference ids once with `seed`, then assigns each repeat a
/// contiguous (cyclic) block of ceil-rounded-to-train size as its test set,
/// so test sets only overlap when repeats * test size exceeds the reference
/// count. Throws UsageError when train_fraction is outside (0,1) or fewer
/// than two references exist.
std::vector<Split> make_splits(const DatasetManifest& manifest, double train_fraction,
                               std::size_t repeats, std::uint64_t seed);

/// Carves a reference-disjoint validation slice of `fraction` (at least one
/// reference when two or more exist) off a training manifest. Returns
/// {train_proper, validation}; validation is empty for a single reference.
std::pair<DatasetManifest, DatasetManifest> hold_out(const DatasetManifest& manifest,
                                                     double fraction, std::uint64_t seed);

/// Writes `<dir>/train.csv` and `<dir>/test.csv`, each headed by `comment`.
void write_split(const Split& split, const std::filesystem::path& dir,
                 const std::string& comment = {});

struct Metrics {
  double srocc = std::numeric_limits<double>::quiet_NaN();
  double plcc = std::numeric_limits<double>::quiet_NaN();
  double rmse = std::numeric_limits<double>::quiet_NaN();
  std::string error;  // why a metric is undefined

  bool valid() const { return std::isfinite(srocc) && std::isfinite(plcc) && std::isfinite(rmse); }
};

/// SROCC/PLCC/RMSE between predictions and MOS. Degenerate inputs leave the
/// affected metrics NaN and record the cause. With `logistic`, PLCC and RMSE
/// use predictions mapped through a fitted 4-parameter logistic.
Metrics compute_metrics(const std::vector<double>& predicted, const std::vector<double>& mos,
                        bool logistic = false);

struct CloudPrediction {
  std::string name;
  std::string ref_id;
  double mos = 0.0;
  double predicted = 0.0;
};

struct RepeatResult {
  std::string label;
  Metrics metrics;
  std::vector<CloudPrediction> clouds;
};

struct EvalOptions {
  SamplingConfig sampling;  // its seed is the fixed evaluation seed
  Ablation ablation = Ablation::kFull;
  bool logistic = false;
};

/// Scores every cloud of `test` (Q_f = mean patch score) and compares to MOS.
RepeatResult evaluate(nn::Model<float>& model, const DatasetManifest& test,
                      const EvalOptions& options, std::string label = "0");

struct EvalReport {
  std::vector<RepeatResult> repeats;
  Metrics average;
  bool logistic = false;
  std::string config_echo;
};

/// Averages each metric over repeats; undefined when any repeat is.
EvalReport summarize(std::vector<RepeatResult> repeats, bool logistic, std::string config_echo);

void write_report_csv(const EvalReport& report, const std::filesystem::path& path);

/// Aligned text table in the layout of the published result tables:
/// one row per entry, columns SROCC / PLCC / RMSE.
std::string format_table(const std::string& first_column,
                         const std::vector<std::pair<std::string, Metrics>>& rows);

/// Cross-dataset layout: one row per method, an SROCC/PLCC column pair per
/// dataset. `cells[m][d]` holds method m on dataset d.
std::string format_dataset_table(const std::vector<std::string>& methods,
                                 const std::vector<std::string>& datasets,
                                 const std::vector<std::vector<Metrics>>& cells);

}  // namespace pcqa::eval
