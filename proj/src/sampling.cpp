#include "pcqa/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "pcqa/error.hpp"
#include "pcqa/spectral.hpp"

namespace pcqa {

namespace {

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.write(b, 4);
}

}  // namespace

std::size_t SamplingConfig::grid() const {
  auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(points_per_patch))));
  return g;
}

void SamplingConfig::validate() const {
  if (patch_count < 1) throw UsageError("sampling: patch count must be >= 1");
  const std::size_t n = points_per_patch;
  const std::size_t g = grid();
  if (n < 1 || !spectral::is_power_of_two(n) || g * g != n)
    throw UsageError("sampling: points per patch " + std::to_string(n) +
                     " does not fill a square grid (use 1024 for 32 x 32)");
}

std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t count,
                                               std::uint64_t seed) {
  const std::size_t n = cloud.size();
  if (count == 0) throw UsageError("farthest_point_sample: count must be positive");
  if (count > n)
    throw UsageError("farthest_point_sample: count " + std::to_string(count) +
                     " exceeds cloud size " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  chosen.reserve(count);
  chosen.push_back(static_cast<std::size_t>(rng() % n));

  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < count) {
    const Vec3& last = cloud.points[chosen.back()];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = std::min(nearest[i], squared_distance(cloud.points[i], last));
      nearest[i] = d;
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

Patch knn_patch(const PointCloud& cloud, std::size_t centroid_index, std::size_t k) {
  const std::size_t n = cloud.size();
  if (centroid_index >= n) throw UsageError("knn_patch: centroid index out of range");
  if (k == 0) throw UsageError("knn_patch: k must be positive");
  if (k > n)
    throw UsageError("knn_patch: k " + std::to_string(k) + " exceeds cloud size " +
                     std::to_string(n));
  const Vec3& c = cloud.points[centroid_index];
  std::vector<std::pair<double, std::size_t>> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = {squared_distance(cloud.points[i], c), i};
  if (k < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k) - 1,
                              order.end());
  order.resize(k);
  std::sort(order.begin(), order.end());

  Patch patch;
  patch.centroid_index = centroid_index;
  patch.source = cloud.name;
  patch.indices.reserve(k);
  patch.coords.reserve(k);
  patch.colors.reserve(k);
  for (const auto& [d, i] : order) {
    patch.indices.push_back(i);
    patch.coords.push_back(cloud.points[i]);
    patch.colors.push_back(cloud.colors[i]);
  }
  return patch;
}

std::vector<Patch> extract_patches(const PointCloud& cloud, const SamplingConfig& cfg) {
  cfg.validate();
  if (cloud.size() < cfg.points_per_patch)
    throw DataError(cloud.name + ": cloud has " + std::to_string(cloud.size()) +
                    " points, fewer than the " + std::to_string(cfg.points_per_patch) +
                    " required per patch");
  if (cloud.size() < cfg.patch_count)
    throw DataError(cloud.name + ": cloud has fewer points than requested patches");
  const PointCloud unit = normalize_unit_sphere(cloud);
  const auto centroids = farthest_point_sample(unit, cfg.patch_count, cfg.seed);
  std::vector<Patch> patches(centroids.size());
  const auto count = static_cast<std::ptrdiff_t>(centroids.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i)
    patches[i] = knn_patch(unit, centroids[i], cfg.points_per_patch);
  return patches;
}

void write_patch_dump(const std::vector<Patch>& patches, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  const std::size_t n = patches.empty() ? 0 : patches.front().size();
  for (const auto& p : patches)
    if (p.size() != n) throw UsageError("write_patch_dump: patches differ in size");
  out.write("PCQP1", 5);
  write_u32(out, static_cast<std::uint32_t>(patches.size()));
  write_u32(out, static_cast<std::uint32_t>(n));
  for (const auto& p : patches)
    for (const auto& v : p.coords)
      for (double c : v) {
        float f = static_cast<float>(c);
        out.write(reinterpret_cast<const char*>(&f), 4);
      }
  for (const auto& p : patches)
    for (const auto& rgb : p.colors) out.write(reinterpret_cast<const char*>(rgb.data()), 3);
}

std::vector<Patch> read_patch_dump(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 13 || bytes.compare(0, 5, "PCQP1") != 0)
    throw DataError(path.string() + ": not a PCQP1 patch dump");
  std::uint32_t p = 0, n = 0;
  std::memcpy(&p, bytes.data() + 5, 4);
  std::memcpy(&n, bytes.data() + 9, 4);
  const std::size_t expect = 13 + std::size_t{p} * n * 3 * 5;
  if (bytes.size() != expect)
    throw DataError(path.string() + ": PCQP1 payload is " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(expect));
  std::vector<Patch> patches(p);
  const char* coords = bytes.data() + 13;
  const char* colors = coords + std::size_t{p} * n * 3 * 4;
  for (std::size_t i = 0; i < p; ++i) {
    patches[i].coords.resize(n);
    patches[i].colors.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      for (int a = 0; a < 3; ++a) {
        float f;
        std::memcpy(&f, coords + ((i * n + j) * 3 + a) * 4, 4);
        patches[i].coords[j][a] = f;
      }
      std::memcpy(patches[i].colors[j].data(), colors + (i * n + j) * 3, 3);
    }
  }
  return patches;
}

}  // namespace pcqa
