#include "pcqa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pcqa/error.hpp"
#include "pcqa/pc_io.hpp"

namespace pcqa::ad {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little endian host");

namespace {

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw DataError(origin_ + ": truncated checkpoint at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* dst, std::size_t n) {
    need(n * 4);
    std::memcpy(dst, bytes_.data() + pos_, n * 4);
    pos_ += n * 4;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::vector<NamedArray>& arrays, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write("PCQW1", 5);
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (static_cast<std::int64_t>(a.values.size()) != numel(a.shape))
      throw UsageError("save_checkpoint: '" + a.name + "' payload does not match its shape");
    put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto e : a.shape) put_u32(out, static_cast<std::uint32_t>(e));
    out.write(reinterpret_cast<const char*>(a.values.data()),
              static_cast<std::streamsize>(a.values.size() * sizeof(float)));
  }
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  Reader r(read_file(path), path.string());
  if (r.str(5) != "PCQW1") throw DataError(path.string() + ": not a PCQW1 checkpoint");
  const std::uint32_t count = r.u32();
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(r.u32());
    a.values.resize(static_cast<std::size_t>(numel(a.shape)));
    r.floats(a.values.data(), a.values.size());
    arrays.push_back(std::move(a));
  }
  if (!r.done()) throw DataError(path.string() + ": trailing bytes after checkpoint entries");
  return arrays;
}

}  // namespace pcqa::ad
