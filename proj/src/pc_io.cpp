#include "pcqa/pc_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "pcqa/error.hpp"

namespace pcqa {

namespace fs = std::filesystem;

namespace {

enum class PlyType { kInt8, kUInt8, kInt16, kUInt16, kInt32, kUInt32, kFloat32, kFloat64 };

std::optional<PlyType> parse_type(std::string_view name) {
  if (name == "char" || name == "int8") return PlyType::kInt8;
  if (name == "uchar" || name == "uint8") return PlyType::kUInt8;
  if (name == "short" || name == "int16") return PlyType::kInt16;
  if (name == "ushort" || name == "uint16") return PlyType::kUInt16;
  if (name == "int" || name == "int32") return PlyType::kInt32;
  if (name == "uint" || name == "uint32") return PlyType::kUInt32;
  if (name == "float" || name == "float32") return PlyType::kFloat32;
  if (name == "double" || name == "float64") return PlyType::kFloat64;
  return std::nullopt;
}

std::size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::kInt8:
    case PlyType::kUInt8: return 1;
    case PlyType::kInt16:
    case PlyType::kUInt16: return 2;
    case PlyType::kInt32:
    case PlyType::kUInt32:
    case PlyType::kFloat32: return 4;
    case PlyType::kFloat64: return 8;
  }
  return 0;
}

template <typename T>
T load_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

double load_scalar(PlyType t, const char* p) {
  switch (t) {
    case PlyType::kInt8: return load_le<std::int8_t>(p);
    case PlyType::kUInt8: return load_le<std::uint8_t>(p);
    case PlyType::kInt16: return load_le<std::int16_t>(p);
    case PlyType::kUInt16: return load_le<std::uint16_t>(p);
    case PlyType::kInt32: return load_le<std::int32_t>(p);
    case PlyType::kUInt32: return load_le<std::uint32_t>(p);
    case PlyType::kFloat32: return load_le<float>(p);
    case PlyType::kFloat64: return load_le<double>(p);
  }
  return 0.0;
}

struct Property {
  std::string name;
  PlyType type = PlyType::kFloat32;
  bool is_list = false;
  PlyType count_type = PlyType::kUInt8;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> props;
};

struct Header {
  bool ascii = false;
  std::vector<Element> elements;
  std::size_t body_offset = 0;  // first byte after "end_header\n"
  std::size_t body_line = 0;    // 1-based line number of the first body line
};

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

[[noreturn]] void header_error(const std::string& origin, std::size_t line,
                               const std::string& msg) {
  throw DataError(origin + ": malformed PLY header at line " + std::to_string(line) +
                  ": " + msg);
}

Header parse_header(std::string_view bytes, const std::string& origin) {
  Header h;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool have_format = false;
  while (true) {
    if (pos >= bytes.size()) header_error(origin, line_no + 1, "missing end_header");
    std::size_t eol = bytes.find('\n', pos);
    if (eol == std::string_view::npos) header_error(origin, line_no + 1, "missing end_header");
    std::string_view line = bytes.substr(pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = eol + 1;
    ++line_no;
    auto tok = split_ws(line);
    if (line_no == 1) {
      if (tok.size() != 1 || tok[0] != "ply") header_error(origin, 1, "expected 'ply' magic");
      continue;
    }
    if (tok.empty()) continue;
    if (tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() < 2) header_error(origin, line_no, "incomplete format line");
      if (tok[1] == "ascii") {
        h.ascii = true;
      } else if (tok[1] == "binary_little_endian") {
        h.ascii = false;
      } else if (tok[1] == "binary_big_endian") {
        throw DataError(origin + ": unsupported PLY format binary_big_endian at line " +
                        std::to_string(line_no));
      } else {
        header_error(origin, line_no, "unknown format '" + std::string(tok[1]) + "'");
      }
      have_format = true;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) header_error(origin, line_no, "element needs a name and a count");
      Element e;
      e.name = std::string(tok[1]);
      auto [p, ec] = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), e.count);
      if (ec != std::errc() || p != tok[2].data() + tok[2].size())
        header_error(origin, line_no, "bad element count '" + std::string(tok[2]) + "'");
      h.elements.push_back(std::move(e));
    } else if (tok[0] == "property") {
      if (h.elements.empty()) header_error(origin, line_no, "property before any element");
      Property prop;
      if (tok.size() == 5 && tok[1] == "list") {
        auto ct = parse_type(tok[2]);
        auto it = parse_type(tok[3]);
        if (!ct || !it) header_error(origin, line_no, "unknown list property type");
        prop.is_list = true;
        prop.count_type = *ct;
        prop.type = *it;
        prop.name = std::string(tok[4]);
      } else if (tok.size() == 3) {
        auto t = parse_type(tok[1]);
        if (!t) header_error(origin, line_no, "unknown property type '" + std::string(tok[1]) + "'");
        prop.type = *t;
        prop.name = std::string(tok[2]);
      } else {
        header_error(origin, line_no, "malformed property line");
      }
      h.elements.back().props.push_back(std::move(prop));
    } else if (tok[0] == "end_header") {
      if (!have_format) header_error(origin, line_no, "missing format line");
      h.body_offset = pos;
      h.body_line = line_no + 1;
      return h;
    } else {
      header_error(origin, line_no, "unexpected keyword '" + std::string(tok[0]) + "'");
    }
  }
}

struct VertexLayout {
  std::size_t element = 0;
  std::array<int, 3> xyz{-1, -1, -1};
  std::array<int, 3> rgb{-1, -1, -1};
};

VertexLayout locate_vertex(const Header& h, const std::string& origin) {
  VertexLayout lay;
  auto it = std::find_if(h.elements.begin(), h.elements.end(),
                         [](const Element& e) { return e.name == "vertex"; });
  if (it == h.elements.end()) throw DataError(origin + ": PLY has no vertex element");
  lay.element = static_cast<std::size_t>(it - h.elements.begin());
  const char* coord_names[3] = {"x", "y", "z"};
  const char* color_names[3] = {"red", "green", "blue"};
  for (std::size_t i = 0; i < it->props.size(); ++i) {
    const auto& p = it->props[i];
    for (int a = 0; a < 3; ++a) {
      if (p.name == coord_names[a]) {
        if (p.is_list) throw DataError(origin + ": vertex property " + p.name + " is a list");
        lay.xyz[a] = static_cast<int>(i);
      }
      if (p.name == color_names[a]) {
        if (p.is_list || p.type != PlyType::kUInt8)
          throw DataError(origin + ": vertex property " + p.name + " must be uint8");
        lay.rgb[a] = static_cast<int>(i);
      }
    }
  }
  for (int a = 0; a < 3; ++a) {
    if (lay.xyz[a] < 0)
      throw DataError(origin + ": missing required vertex property '" + coord_names[a] + "'");
    if (lay.rgb[a] < 0)
      throw DataError(origin + ": missing required vertex property '" + color_names[a] + "'");
  }
  if (it->count == 0) throw DataError(origin + ": PLY declares zero vertices");
  return lay;
}

void store_vertex(PointCloud& cloud, const VertexLayout& lay, const std::vector<double>& row) {
  cloud.points.push_back({row[lay.xyz[0]], row[lay.xyz[1]], row[lay.xyz[2]]});
  cloud.colors.push_back({static_cast<std::uint8_t>(row[lay.rgb[0]]),
                          static_cast<std::uint8_t>(row[lay.rgb[1]]),
                          static_cast<std::uint8_t>(row[lay.rgb[2]])});
}

void read_binary(std::string_view bytes, const Header& h, const VertexLayout& lay,
                 PointCloud& cloud, const std::string& origin) {
  std::size_t pos = h.body_offset;
  auto need = [&](std::size_t n, const std::string& what) {
    if (pos + n > bytes.size())
      throw DataError(origin + ": truncated PLY payload at byte " + std::to_string(pos) +
                      " while reading " + what);
  };
  for (std::size_t ei = 0; ei <= lay.element; ++ei) {
    const Element& e = h.elements[ei];
    const bool is_vertex = ei == lay.element;
    std::vector<double> row(e.props.size());
    if (is_vertex) {
      cloud.points.reserve(e.count);
      cloud.colors.reserve(e.count);
    }
    for (std::size_t r = 0; r < e.count; ++r) {
      for (std::size_t pi = 0; pi < e.props.size(); ++pi) {
        const Property& p = e.props[pi];
        const std::string what = e.name + " " + std::to_string(r) + " property " + p.name;
        if (p.is_list) {
          need(type_size(p.count_type), what);
          auto n = static_cast<std::size_t>(load_scalar(p.count_type, bytes.data() + pos));
          pos += type_size(p.count_type);
          need(n * type_size(p.type), what);
          pos += n * type_size(p.type);
        } else {
          need(type_size(p.type), what);
          row[pi] = load_scalar(p.type, bytes.data() + pos);
          pos += type_size(p.type);
        }
      }
      if (is_vertex) store_vertex(cloud, lay, row);
    }
  }
}

void read_ascii(std::string_view bytes, const Header& h, const VertexLayout& lay,
                PointCloud& cloud, const std::string& origin) {
  std::size_t pos = h.body_offset;
  std::size_t line_no = h.body_line;
  auto next_line = [&](const std::string& what) -> std::string_view {
    while (true) {
      if (pos >= bytes.size())
        throw DataError(origin + ": truncated PLY payload at line " + std::to_string(line_no) +
                        " while reading " + what);
      std::size_t eol = bytes.find('\n', pos);
      if (eol == std::string_view::npos) eol = bytes.size();
      std::string_view line = bytes.substr(pos, eol - pos);
      pos = eol + 1;
      ++line_no;
      if (split_ws(line).empty()) continue;
      return line;
    }
  };
  auto parse_number = [&](std::string_view tok, const std::string& what) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size())
      throw DataError(origin + ": bad number '" + std::string(tok) + "' at line " +
                      std::to_string(line_no - 1) + " (" + what + ")");
    return v;
  };
  for (std::size_t ei = 0; ei <= lay.element; ++ei) {
    const Element& e = h.elements[ei];
    const bool is_vertex = ei == lay.element;
    std::vector<double> row(e.props.size());
    if (is_vertex) {
      cloud.points.reserve(e.count);
      cloud.colors.reserve(e.count);
    }
    for (std::size_t r = 0; r < e.count; ++r) {
      const std::string what = e.name + " " + std::to_string(r);
      auto tok = split_ws(next_line(what));
      std::size_t t = 0;
      for (std::size_t pi = 0; pi < e.props.size(); ++pi) {
        const Property& p = e.props[pi];
        if (t >= tok.size())
          throw DataError(origin + ": too few values at line " + std::to_string(line_no - 1) +
                          " (" + what + ")");
        if (p.is_list) {
          auto n = static_cast<std::size_t>(parse_number(tok[t++], what));
          t += n;
        } else {
          row[pi] = parse_number(tok[t++], what);
        }
      }
      if (is_vertex) {
        for (int a = 0; a < 3; ++a) {
          double c = row[lay.rgb[a]];
          if (c < 0 || c > 255 || c != std::floor(c))
            throw DataError(origin + ": color value out of range at line " +
                            std::to_string(line_no - 1));
        }
        store_vertex(cloud, lay, row);
      }
    }
  }
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

PointCloud parse_ply(std::string_view bytes, const std::string& origin) {
  Header h = parse_header(bytes, origin);
  VertexLayout lay = locate_vertex(h, origin);
  PointCloud cloud;
  cloud.name = origin;
  if (h.ascii) {
    read_ascii(bytes, h, lay, cloud, origin);
  } else {
    read_binary(bytes, h, lay, cloud, origin);
  }
  return cloud;
}

PointCloud load_ply(const fs::path& path) {
  PointCloud cloud = parse_ply(read_file(path), path.string());
  cloud.name = path.stem().string();
  return cloud;
}

void write_ply(const PointCloud& cloud, const fs::path& path, PlyEncoding encoding,
               PlyScalar coord_type) {
  if (cloud.points.size() != cloud.colors.size())
    throw UsageError("write_ply: points and colors differ in length");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  const char* ctype = coord_type == PlyScalar::kFloat32 ? "float" : "double";
  out << "ply\nformat "
      << (encoding == PlyEncoding::kAscii ? "ascii" : "binary_little_endian") << " 1.0\n"
      << "comment " << cloud.name << "\n"
      << "element vertex " << cloud.size() << "\n"
      << "property " << ctype << " x\nproperty " << ctype << " y\nproperty " << ctype
      << " z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  if (encoding == PlyEncoding::kAscii) {
    char buf[64];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      for (int a = 0; a < 3; ++a) {
        std::to_chars_result r;
        if (coord_type == PlyScalar::kFloat32) {
          r = std::to_chars(buf, buf + sizeof(buf), static_cast<float>(cloud.points[i][a]));
        } else {
          r = std::to_chars(buf, buf + sizeof(buf), cloud.points[i][a]);
        }
        out.write(buf, r.ptr - buf);
        out.put(' ');
      }
      out << int(cloud.colors[i][0]) << ' ' << int(cloud.colors[i][1]) << ' '
          << int(cloud.colors[i][2]) << '\n';
    }
  } else {
    static_assert(std::endian::native == std::endian::little,
                  "binary PLY writer assumes a little endian host");
    std::vector<char> buf;
    const std::size_t csize = coord_type == PlyScalar::kFloat32 ? 4 : 8;
    buf.resize(cloud.size() * (3 * csize + 3));
    char* p = buf.data();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      for (int a = 0; a < 3; ++a) {
        if (coord_type == PlyScalar::kFloat32) {
          float f = static_cast<float>(cloud.points[i][a]);
          std::memcpy(p, &f, 4);
        } else {
          std::memcpy(p, &cloud.points[i][a], 8);
        }
        p += csize;
      }
      std::memcpy(p, cloud.colors[i].data(), 3);
      p += 3;
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  if (cloud.points.empty()) throw DataError(cloud.name + ": cannot normalize an empty cloud");
  Vec3 mean{0, 0, 0};
  for (const auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) mean[a] += p[a];
  const double n = static_cast<double>(cloud.size());
  for (auto& m : mean) m /= n;

  PointCloud out;
  out.name = cloud.name;
  out.colors = cloud.colors;
  out.points.resize(cloud.size());
  double max_norm = 0.0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      out.points[i][a] = cloud.points[i][a] - mean[a];
      s += out.points[i][a] * out.points[i][a];
    }
    max_norm = std::max(max_norm, s);
  }
  max_norm = std::sqrt(max_norm);
  if (!(max_norm > 0.0) || !std::isfinite(max_norm))
    throw DataError(cloud.name + ": degenerate cloud, all points coincide");
  for (auto& p : out.points)
    for (auto& c : p) c /= max_norm;
  return out;
}

std::vector<std::string> DatasetManifest::reference_ids() const {
  std::set<std::string> ids;
  for (const auto& e : entries) ids.insert(e.ref_id);
  return {ids.begin(), ids.end()};
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

DatasetManifest parse_manifest(std::string_view text, const fs::path& base_dir,
                               bool check_exists) {
  DatasetManifest m;
  std::set<std::string> seen;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;

    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      std::size_t comma = line.find(',', start);
      fields.push_back(trim(line.substr(start, comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (!header_seen) {
      if (fields.size() != 3 || fields[0] != "path" || fields[1] != "mos" ||
          fields[2] != "ref_id")
        throw DataError("manifest line " + std::to_string(line_no) +
                        ": expected header 'path,mos,ref_id'");
      header_seen = true;
      continue;
    }
    const std::string where = "manifest record at line " + std::to_string(line_no);
    if (fields.size() != 3)
      throw DataError(where + ": expected 3 fields, found " + std::to_string(fields.size()));
    ManifestEntry e;
    fs::path p{std::string(fields[0])};
    e.path = p.is_absolute() ? p : (base_dir / p).lexically_normal();
    double mos = 0.0;
    auto [ptr, ec] = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), mos);
    if (ec != std::errc() || ptr != fields[1].data() + fields[1].size() || !std::isfinite(mos))
      throw DataError(where + " ('" + std::string(fields[0]) + "'): MOS '" +
                      std::string(fields[1]) + "' is not a finite number");
    e.mos = mos;
    e.ref_id = std::string(fields[2]);
    if (e.ref_id.empty()) throw DataError(where + ": empty ref_id");
    if (!seen.insert(e.path.string()).second)
      throw DataError(where + ": duplicate path '" + e.path.string() + "'");
    if (check_exists && !fs::exists(e.path))
      throw DataError(where + ": file '" + e.path.string() + "' does not exist");
    m.entries.push_back(std::move(e));
  }
  if (!header_seen) throw DataError("manifest is empty");
  if (m.entries.empty()) throw DataError("manifest has no records");
  return m;
}

DatasetManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("manifest '" + path.string() + "' does not exist");
  return parse_manifest(read_file(path), path.parent_path());
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path,
                    const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  std::size_t start = 0;
  while (start < comment.size()) {
    std::size_t eol = comment.find('\n', start);
    if (eol == std::string::npos) eol = comment.size();
    out << "# " << comment.substr(start, eol - start) << '\n';
    start = eol + 1;
  }
  out << "path,mos,ref_id\n";
  const fs::path dir = fs::absolute(path).parent_path();
  char buf[64];
  for (const auto& e : manifest.entries) {
    auto r = std::to_chars(buf, buf + sizeof(buf), e.mos);
    fs::path rel = fs::absolute(e.path).lexically_normal().lexically_relative(dir);
    if (rel.empty()) rel = fs::absolute(e.path);
    out << rel.generic_string() << ',' << std::string_view(buf, r.ptr - buf) << ',' << e.ref_id
        << '\n';
  }
}

}  // namespace pcqa
