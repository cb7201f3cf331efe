#pragma once

#include <cstdint>
#include <filesystem>

#include "pcqa/pc_io.hpp"

namespace pcqa::synth {

/// Smooth colored surface number `shape` (sphere, torus, cube shell,
/// ellipsoid, rippled sphere; cycled), with `level` of combined geometric
/// jitter, color noise and darkening. Level 0 is pristine.
PointCloud make_cloud(int shape, int level, std::size_t points, std::uint64_t seed);

/// Opinion score for a degradation level: 4.5 at level 0 falling to 1.0 at
/// `levels - 1`, shifted by 0.05 per reference so every cloud is distinct.
double synthetic_mos(int reference, int level, int levels);

struct DatasetSpec {
  int references = 5;
  int levels = 4;
  std::size_t points = 5000;
  std::uint64_t seed = 0;
};

/// Writes `<dir>/ref<r>_l<k>.ply` for every reference and level plus
/// `<dir>/manifest.csv`, and returns the manifest.
DatasetManifest write_dataset(const DatasetSpec& spec, const std::filesystem::path& dir,
                              const std::string& comment = {});

}  // namespace pcqa::synth
