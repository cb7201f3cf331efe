#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pcqa/pc_io.hpp"

namespace pcqa {

struct SamplingConfig {
  std::size_t patch_count = 100;        // P
  std::size_t points_per_patch = 1024;  // N (= K of the kNN)
  std::uint64_t seed = 0;

  /// Side of the square grid a patch is reshaped into: N = grid * grid.
  std::size_t grid() const;
  /// Throws UsageError unless P >= 1 and N is a power of two with an integer
  /// square root (1024 -> 32 x 32).
  void validate() const;
};

/// N points cut from one cloud around a centroid, ordered by increasing
/// distance from the centroid (ties by ascending source index).
struct Patch {
  std::size_t centroid_index = 0;
  std::vector<std::size_t> indices;  // source indices, in patch order
  std::vector<Vec3> coords;
  std::vector<Rgb> colors;
  std::string source;

  std::size_t size() const noexcept { return coords.size(); }
};

/// Greedy farthest point sampling. The first index is drawn from a
/// mt19937_64 seeded with `seed`; every later pick maximizes the squared
/// distance to the nearest already-chosen point, lowest index on ties.
std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t count,
                                               std::uint64_t seed);

/// Exact k nearest neighbours of `centroid_index` (itself included).
Patch knn_patch(const PointCloud& cloud, std::size_t centroid_index, std::size_t k);

/// normalize_unit_sphere, then FPS centroids, then one kNN patch per centroid.
std::vector<Patch> extract_patches(const PointCloud& cloud, const SamplingConfig& cfg);

/// `PCQP1` dump: magic, P and N as uint32, coords float32 [P,N,3], colors
/// uint8 [P,N,3]. Little endian.
void write_patch_dump(const std::vector<Patch>& patches, const std::filesystem::path& path);
std::vector<Patch> read_patch_dump(const std::filesystem::path& path);

}  // namespace pcqa
