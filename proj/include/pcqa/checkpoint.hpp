#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pcqa/autodiff.hpp"

namespace pcqa::ad {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// `PCQW1` weight file: magic, uint32 entry count, then per entry uint32 name
/// length, name bytes, uint32 rank, uint32 extents, float32 payload. Little
/// endian.
void save_checkpoint(const std::vector<NamedArray>& arrays, const std::filesystem::path& path);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

}  // namespace pcqa::ad
