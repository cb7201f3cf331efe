#include "pcqa/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "pcqa/error.hpp"
#include "pcqa/training.hpp"

namespace pcqa::synth {

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 surface_point(int shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double a = 2 * kPi * u(rng);
  const double z = 2 * u(rng) - 1;
  const double r = std::sqrt(1 - z * z);
  switch (shape % 5) {
    case 0:
      return {r * std::cos(a), r * std::sin(a), z};
    case 1: {
      const double b = 2 * kPi * u(rng);
      return {(1 + 0.4 * std::cos(b)) * std::cos(a), (1 + 0.4 * std::cos(b)) * std::sin(a),
              0.4 * std::sin(b)};
    }
    case 2: {
      Vec3 p{2 * u(rng) - 1, 2 * u(rng) - 1, 2 * u(rng) - 1};
      const auto face = static_cast<std::size_t>(rng() % 3);
      p[face] = p[face] < 0 ? -1.0 : 1.0;
      return p;
    }
    case 3:
      return {1.4 * r * std::cos(a), 0.8 * r * std::sin(a), 0.6 * z};
    default: {
      const double s = 1 + 0.15 * std::sin(5 * a) * std::sin(4 * z);
      return {s * r * std::cos(a), s * r * std::sin(a), s * z};
    }
  }
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

PointCloud make_cloud(int shape, int level, std::size_t points, std::uint64_t seed) {
  if (points == 0) throw UsageError("synth: point count must be positive");
  if (level < 0) throw UsageError("synth: level must be non-negative");
  std::mt19937_64 rng(train::mix_seed(seed, static_cast<std::uint64_t>(shape)));
  std::mt19937_64 noise(train::mix_seed(seed ^ 0x6e6f697365ULL,
                                        static_cast<std::uint64_t>(shape * 1000 + level)));
  std::normal_distribution<double> n01(0.0, 1.0);
  const double jitter = 0.012 * level;
  const double color_sd = 14.0 * level;
  const double phase = 0.7 * shape;
  const double fade = std::max(0.0, 1.0 - 0.12 * level);  // colors darken with level

  PointCloud c;
  c.points.reserve(points);
  c.colors.reserve(points);
  for (std::size_t i = 0; i < points; ++i) {
    const Vec3 p = surface_point(shape, rng);
    const double r = 128 + 100 * std::sin(2.0 * p[0] + phase);
    const double g = 128 + 100 * std::sin(1.5 * p[1] + 2 * phase);
    const double b = 128 + 100 * std::cos(2.5 * p[2] - phase);
    c.points.push_back({p[0] + jitter * n01(noise), p[1] + jitter * n01(noise),
                        p[2] + jitter * n01(noise)});
    c.colors.push_back({to_byte(fade * r + color_sd * n01(noise)), to_byte(fade * g + color_sd * n01(noise)),
                        to_byte(fade * b + color_sd * n01(noise))});
  }
  c.name = "ref" + std::to_string(shape) + "_l" + std::to_string(level);
  return c;
}

double synthetic_mos(int reference, int level, int levels) {
  const double t = levels > 1 ? static_cast<double>(level) / (levels - 1) : 0.0;
  return 4.5 - 3.5 * t + 0.05 * reference;
}

DatasetManifest write_dataset(const DatasetSpec& spec, const std::filesystem::path& dir,
                              const std::string& comment) {
  if (spec.references < 1 || spec.levels < 1) throw UsageError("synth: references and levels must be >= 1");
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  for (int r = 0; r < spec.references; ++r)
    for (int l = 0; l < spec.levels; ++l) {
      const PointCloud c = make_cloud(r, l, spec.points, spec.seed);
      const auto path = dir / (c.name + ".ply");
      write_ply(c, path, PlyEncoding::kBinaryLittleEndian, PlyScalar::kFloat32);
      m.entries.push_back({path, synthetic_mos(r, l, spec.levels), "ref" + std::to_string(r)});
    }
  write_manifest(m, dir / "manifest.csv", comment);
  return m;
}

}  // namespace pcqa::synth
