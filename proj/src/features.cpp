#include "pcqa/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "pcqa/error.hpp"
#include "pcqa/spectral.hpp"

namespace pcqa {

std::vector<Vec3> frequency_magnitude_raw(std::span<const Vec3> coords) {
  const std::size_t n = coords.size();
  if (n == 0) throw UsageError("frequency_attribute: empty patch");
  std::vector<Vec3> out(n);
  std::vector<double> axis(n);
  for (int a = 0; a < 3; ++a) {
    for (std::size_t i = 0; i < n; ++i) axis[i] = coords[i][a];
    const auto mag = spectral::fftshift(spectral::magnitude(spectral::fft(std::span<const double>(axis))));
    for (std::size_t i = 0; i < n; ++i) out[i][a] = mag[i];
  }
  return out;
}

std::vector<Vec3> frequency_attribute(std::span<const Vec3> coords) {
  auto out = frequency_magnitude_raw(coords);
  double lo = out[0][0];
  double hi = out[0][0];
  for (const auto& v : out)
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  const double range = hi - lo;
  for (auto& v : out)
    for (double& x : v) x = range > 0.0 ? (x - lo) / range : 0.0;
  return out;
}

std::vector<Vec3> rgb_attribute(std::span<const Rgb> colors) {
  std::vector<Vec3> out(colors.size());
  for (std::size_t i = 0; i < colors.size(); ++i)
    for (int a = 0; a < 3; ++a) out[i][a] = colors[i][a] / 255.0;
  return out;
}

std::vector<Vec3> rgb_attribute(std::span<const std::array<int, 3>> colors) {
  std::vector<Vec3> out(colors.size());
  for (std::size_t i = 0; i < colors.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      const int v = colors[i][a];
      if (v < 0 || v > 255)
        throw DataError("rgb_attribute: color value " + std::to_string(v) + " at point " +
                        std::to_string(i) + " is outside [0,255]");
      out[i][a] = v / 255.0;
    }
  return out;
}

FeatureTensor assemble(const Patch& patch) {
  const std::size_t n = patch.size();
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || g * g != n || !spectral::is_power_of_two(n))
    throw UsageError("assemble: patch of " + std::to_string(n) +
                     " points does not fill a square power-of-two grid");
  if (patch.colors.size() != n) throw UsageError("assemble: colors and coords differ in length");

  FeatureTensor t;
  t.grid = g;
  t.data.assign(kFeatureChannels * n, 0.0);
  auto place = [&](const std::vector<Vec3>& attr, std::size_t first) {
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t i = 0; i < n; ++i) t.data[(first + a) * n + i] = attr[i][a];
  };
  place(patch.coords, kCoordChannel);
  place(rgb_attribute(patch.colors), kRgbChannel);
  place(frequency_attribute(patch.coords), kFrequencyChannel);
  return t;
}

std::vector<Vec3> unflatten_attribute(const FeatureTensor& t, std::size_t first_channel) {
  const std::size_t n = t.grid * t.grid;
  std::vector<Vec3> out(n);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t i = 0; i < n; ++i) out[i][a] = t.data[(first_channel + a) * n + i];
  return out;
}

void write_feature_dump(const std::vector<FeatureTensor>& features,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  const std::int32_t p = static_cast<std::int32_t>(features.size());
  const std::int32_t g = features.empty() ? 0 : static_cast<std::int32_t>(features[0].grid);
  out.write("PCQF1", 5);
  out.write(reinterpret_cast<const char*>(&p), 4);
  out.write(reinterpret_cast<const char*>(&g), 4);
  std::vector<float> buf;
  for (const auto& f : features) {
    if (static_cast<std::int32_t>(f.grid) != g)
      throw UsageError("write_feature_dump: feature grids differ");
    buf.assign(f.data.begin(), f.data.end());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

std::vector<FeatureTensor> read_feature_dump(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 13 || bytes.compare(0, 5, "PCQF1") != 0)
    throw DataError(path.string() + ": not a PCQF1 feature dump");
  std::int32_t p = 0, g = 0;
  std::memcpy(&p, bytes.data() + 5, 4);
  std::memcpy(&g, bytes.data() + 9, 4);
  if (p < 0 || g < 0) throw DataError(path.string() + ": negative extents in PCQF1 header");
  const std::size_t per = kFeatureChannels * static_cast<std::size_t>(g) * g;
  const std::size_t expect = 13 + static_cast<std::size_t>(p) * per * 4;
  if (bytes.size() != expect)
    throw DataError(path.string() + ": PCQF1 payload is " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(expect));
  std::vector<FeatureTensor> out(p);
  for (std::int32_t i = 0; i < p; ++i) {
    out[i].grid = static_cast<std::size_t>(g);
    out[i].data.resize(per);
    for (std::size_t j = 0; j < per; ++j) {
      float f;
      std::memcpy(&f, bytes.data() + 13 + (i * per + j) * 4, 4);
      out[i].data[j] = f;
    }
  }
  return out;
}

}  // namespace pcqa

namespace pcqa {

Ablation parse_ablation(std::string_view name) {
  if (name == "full") return Ablation::kFull;
  if (name == "no_rgb") return Ablation::kNoRgb;
  if (name == "no_frequency") return Ablation::kNoFrequency;
  throw UsageError("unknown ablation mode '" + std::string(name) +
                   "' (expected full, no_rgb or no_frequency)");
}

std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoRgb: return "no_rgb";
    case Ablation::kNoFrequency: return "no_frequency";
  }
  return "full";
}

void apply_ablation(FeatureTensor& t, Ablation a) {
  if (a == Ablation::kFull) return;
  const std::size_t first = a == Ablation::kNoRgb ? kRgbChannel : kFrequencyChannel;
  const std::size_t plane = t.grid * t.grid;
  std::fill(t.data.begin() + static_cast<std::ptrdiff_t>(first * plane),
            t.data.begin() + static_cast<std::ptrdiff_t>((first + 3) * plane), 0.0);
}

}  // namespace pcqa
