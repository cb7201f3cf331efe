#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pcqa {

using Vec3 = std::array<double, 3>;
using Rgb = std::array<std::uint8_t, 3>;

/// Point positions with one RGB triple per point.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Rgb> colors;
  std::string name;

  std::size_t size() const noexcept { return points.size(); }
};

enum class PlyEncoding { kAscii, kBinaryLittleEndian };
enum class PlyScalar { kFloat32, kFloat64 };

/// Reads vertex x/y/z and red/green/blue from an ASCII or binary little endian
/// PLY file. Other vertex properties and non-vertex elements are skipped.
/// Throws DataError with the offending line or byte offset on failure.
PointCloud load_ply(const std::filesystem::path& path);

/// Parses PLY content already held in memory. `origin` names the source in
/// error messages and becomes the cloud name.
PointCloud parse_ply(std::string_view bytes, const std::string& origin);

void write_ply(const PointCloud& cloud, const std::filesystem::path& path,
               PlyEncoding encoding = PlyEncoding::kBinaryLittleEndian,
               PlyScalar coord_type = PlyScalar::kFloat64);

/// Centers the cloud on its mean and scales so the farthest point has norm 1.
/// Colors are untouched. Throws DataError when every point coincides.
PointCloud normalize_unit_sphere(const PointCloud& cloud);

struct ManifestEntry {
  std::filesystem::path path;
  double mos = 0.0;
  std::string ref_id;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
  std::vector<std::string> reference_ids() const;  // sorted, unique
};

/// Loads a `path,mos,ref_id` CSV. Relative paths resolve against the
/// manifest's directory; every path must exist and appear once.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Parses manifest text. Relative paths resolve against `base_dir`.
DatasetManifest parse_manifest(std::string_view text,
                               const std::filesystem::path& base_dir,
                               bool check_exists = true);

/// Paths are written relative to the manifest's directory when possible.
/// Each line of `comment` becomes a leading `# ` line.
void write_manifest(const DatasetManifest& manifest,
                    const std::filesystem::path& path,
                    const std::string& comment = {});

std::string read_file(const std::filesystem::path& path);

}  // namespace pcqa
