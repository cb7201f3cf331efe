#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcqa/pc_io.hpp"
#include "pcqa/sampling.hpp"

namespace pcqa {

inline constexpr std::size_t kFeatureChannels = 9;
inline constexpr std::size_t kCoordChannel = 0;
inline constexpr std::size_t kRgbChannel = 3;
inline constexpr std::size_t kFrequencyChannel = 6;

/// Per-patch [9, G, G] grid: channels 0-2 coordinates, 3-5 RGB in [0,1],
/// 6-8 frequency magnitude in [0,1]. Row-major.
struct FeatureTensor {
  std::size_t grid = 0;
  std::vector<double> data;

  double at(std::size_t c, std::size_t row, std::size_t col) const {
    return data[(c * grid + row) * grid + col];
  }
  std::span<const double> channel(std::size_t c) const {
    return {data.data() + c * grid * grid, grid * grid};
  }
};

/// |fftshift(fft(coords[:, a]))| per axis, then min-max scaled to [0,1] over
/// the whole N x 3 block. A constant block maps to zeros.
std::vector<Vec3> frequency_attribute(std::span<const Vec3> coords);

/// Same magnitudes before the min-max scaling.
std::vector<Vec3> frequency_magnitude_raw(std::span<const Vec3> coords);

std::vector<Vec3> rgb_attribute(std::span<const Rgb> colors);
/// Integer input variant; throws DataError for values outside [0,255].
std::vector<Vec3> rgb_attribute(std::span<const std::array<int, 3>> colors);

/// Lays each N x 3 attribute out as three row-major G x G channels.
FeatureTensor assemble(const Patch& patch);

/// Inverse of the row-major layout for one attribute (three channels).
std::vector<Vec3> unflatten_attribute(const FeatureTensor& t, std::size_t first_channel);

/// `PCQF1` dump: magic, P and G as int32, float32 [P,9,G,G]. Little endian.
void write_feature_dump(const std::vector<FeatureTensor>& features,
                        const std::filesystem::path& path);
std::vector<FeatureTensor> read_feature_dump(const std::filesystem::path& path);

}  // namespace pcqa

namespace pcqa {

/// Input ablations: the dropped attribute's channels are zeroed so every
/// variant shares one architecture.
enum class Ablation { kFull, kNoRgb, kNoFrequency };

Ablation parse_ablation(std::string_view name);  // full | no_rgb | no_frequency
std::string_view to_string(Ablation a);
void apply_ablation(FeatureTensor& t, Ablation a);

}  // namespace pcqa
