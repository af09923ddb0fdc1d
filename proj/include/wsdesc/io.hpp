#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "wsdesc/pointcloud.hpp"

namespace wsdesc::io {

namespace fs = std::filesystem;

namespace detail {

enum class PlyScalar { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

inline bool parse_ply_scalar(const std::string& name, PlyScalar& out) {
  static const std::array<std::pair<const char*, PlyScalar>, 16> table{{
      {"char", PlyScalar::Int8},     {"int8", PlyScalar::Int8},       {"uchar", PlyScalar::UInt8},
      {"uint8", PlyScalar::UInt8},   {"short", PlyScalar::Int16},     {"int16", PlyScalar::Int16},
      {"ushort", PlyScalar::UInt16}, {"uint16", PlyScalar::UInt16},   {"int", PlyScalar::Int32},
      {"int32", PlyScalar::Int32},   {"uint", PlyScalar::UInt32},     {"uint32", PlyScalar::UInt32},
      {"float", PlyScalar::Float32}, {"float32", PlyScalar::Float32}, {"double", PlyScalar::Float64},
      {"float64", PlyScalar::Float64},
  }};
  for (const auto& [key, value] : table) {
    if (name == key) {
      out = value;
      return true;
    }
  }
  return false;
}

inline std::size_t ply_scalar_size(PlyScalar t) {
  switch (t) {
    case PlyScalar::Int8:
    case PlyScalar::UInt8: return 1;
    case PlyScalar::Int16:
    case PlyScalar::UInt16: return 2;
    case PlyScalar::Int32:
    case PlyScalar::UInt32:
    case PlyScalar::Float32: return 4;
    case PlyScalar::Float64: return 8;
  }
  return 0;
}

template <typename T>
T load_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

inline double decode_ply_scalar(PlyScalar t, const unsigned char* p) {
  switch (t) {
    case PlyScalar::Int8: return static_cast<double>(static_cast<std::int8_t>(p[0]));
    case PlyScalar::UInt8: return static_cast<double>(p[0]);
    case PlyScalar::Int16: return load_le<std::int16_t>(p);
    case PlyScalar::UInt16: return load_le<std::uint16_t>(p);
    case PlyScalar::Int32: return load_le<std::int32_t>(p);
    case PlyScalar::UInt32: return load_le<std::uint32_t>(p);
    case PlyScalar::Float32: return load_le<float>(p);
    case PlyScalar::Float64: return load_le<double>(p);
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  PlyScalar type = PlyScalar::Float32;
  bool is_list = false;
  PlyScalar count_type = PlyScalar::UInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

inline std::string lower_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

inline Vec3 checked_point(double x, double y, double z, const std::string& path, std::size_t loc) {
  Vec3 p(x, y, z);
  if (!p.allFinite()) throw ParseError(path, loc, "non-finite coordinate");
  return p;
}

inline PointCloud load_ply(const fs::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(name, 0, "cannot open file");

  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };

  if (!next_line() || line != "ply") throw ParseError(name, 1, "missing 'ply' magic");
  enum class Format { Ascii, BinaryLE } format = Format::Ascii;
  bool have_format = false;
  std::vector<PlyElement> elements;
  for (;;) {
    if (!next_line()) throw ParseError(name, line_no, "unexpected end of header");
    std::istringstream ls(line);
    std::string keyword;
    ls >> keyword;
    if (keyword.empty() || keyword == "comment" || keyword == "obj_info") continue;
    if (keyword == "end_header") break;
    if (keyword == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") {
        format = Format::Ascii;
      } else if (fmt == "binary_little_endian") {
        format = Format::BinaryLE;
      } else if (fmt == "binary_big_endian") {
        throw ParseError(name, line_no, "big-endian binary PLY is not supported");
      } else {
        throw ParseError(name, line_no, "unknown PLY format '" + fmt + "'");
      }
      have_format = true;
    } else if (keyword == "element") {
      PlyElement e;
      long long count = -1;
      ls >> e.name >> count;
      if (e.name.empty() || count < 0) throw ParseError(name, line_no, "malformed element line");
      e.count = static_cast<std::size_t>(count);
      elements.push_back(std::move(e));
    } else if (keyword == "property") {
      if (elements.empty()) throw ParseError(name, line_no, "property before any element");
      PlyProperty prop;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type >> prop.name;
        prop.is_list = true;
        if (!parse_ply_scalar(count_type, prop.count_type) || !parse_ply_scalar(item_type, prop.type)) {
          throw ParseError(name, line_no, "unsupported list property type");
        }
      } else {
        ls >> prop.name;
        if (!parse_ply_scalar(type, prop.type)) {
          throw ParseError(name, line_no, "unsupported property type '" + type + "'");
        }
      }
      if (prop.name.empty()) throw ParseError(name, line_no, "property without a name");
      elements.back().properties.push_back(prop);
    } else {
      throw ParseError(name, line_no, "unknown header keyword '" + keyword + "'");
    }
  }
  if (!have_format) throw ParseError(name, line_no, "missing format line");

  std::size_t vertex_element = elements.size();
  std::array<std::size_t, 3> xyz{};
  for (std::size_t e = 0; e < elements.size(); ++e) {
    if (elements[e].name != "vertex") continue;
    vertex_element = e;
    std::array<bool, 3> found{};
    for (std::size_t p = 0; p < elements[e].properties.size(); ++p) {
      const auto& prop = elements[e].properties[p];
      for (int a = 0; a < 3; ++a) {
        if (prop.name == std::string(1, "xyz"[a])) {
          if (prop.is_list) throw ParseError(name, line_no, "coordinate declared as a list");
          xyz[a] = p;
          found[a] = true;
        }
      }
    }
    if (!found[0] || !found[1] || !found[2]) throw ParseError(name, line_no, "vertex element lacks x/y/z");
    break;
  }
  if (vertex_element == elements.size()) throw ParseError(name, line_no, "no vertex element");

  PointCloud cloud;
  cloud.id = path.stem().string();
  const PlyElement& vertex = elements[vertex_element];
  cloud.points.reserve(vertex.count);

  if (format == Format::Ascii) {
    for (std::size_t e = 0; e <= vertex_element; ++e) {
      for (std::size_t i = 0; i < elements[e].count; ++i) {
        do {
          if (!next_line()) {
            throw ParseError(name, line_no, "file ends before element '" + elements[e].name + "' #" +
                                                std::to_string(i) + " of " +
                                                std::to_string(elements[e].count));
          }
        } while (line.find_first_not_of(" \t") == std::string::npos);
        if (e != vertex_element) continue;
        std::istringstream ls(line);
        std::vector<double> values;
        for (const auto& prop : vertex.properties) {
          if (prop.is_list) {
            double n = 0;
            if (!(ls >> n)) throw ParseError(name, line_no, "truncated vertex line");
            for (int k = 0; k < static_cast<int>(n); ++k) {
              double skip;
              if (!(ls >> skip)) throw ParseError(name, line_no, "truncated vertex list");
            }
            values.push_back(0.0);
            continue;
          }
          std::string token;
          if (!(ls >> token)) throw ParseError(name, line_no, "truncated vertex line");
          try {
            std::size_t used = 0;
            values.push_back(std::stod(token, &used));
            if (used != token.size()) throw std::invalid_argument(token);
          } catch (const std::out_of_range&) {
            throw ParseError(name, line_no, "non-finite coordinate");
          } catch (const std::invalid_argument&) {
            throw ParseError(name, line_no, "malformed number '" + token + "'");
          }
        }
        cloud.points.push_back(checked_point(values[xyz[0]], values[xyz[1]], values[xyz[2]], name, line_no));
      }
    }
    return cloud;
  }

  // Binary little-endian payload.
  const auto payload_start = static_cast<std::size_t>(in.tellg());
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t off = 0;
  auto need = [&](std::size_t bytes) {
    if (off + bytes > data.size()) {
      throw ParseError(name, payload_start + off, "binary payload truncated");
    }
  };
  for (std::size_t e = 0; e <= vertex_element; ++e) {
    const auto& el = elements[e];
    for (std::size_t i = 0; i < el.count; ++i) {
      std::array<double, 3> c{};
      for (std::size_t p = 0; p < el.properties.size(); ++p) {
        const auto& prop = el.properties[p];
        if (prop.is_list) {
          need(ply_scalar_size(prop.count_type));
          const double n = decode_ply_scalar(prop.count_type, data.data() + off);
          off += ply_scalar_size(prop.count_type);
          if (n < 0) throw ParseError(name, payload_start + off, "negative list length");
          const std::size_t bytes = static_cast<std::size_t>(n) * ply_scalar_size(prop.type);
          need(bytes);
          off += bytes;
          continue;
        }
        const std::size_t sz = ply_scalar_size(prop.type);
        need(sz);
        if (e == vertex_element) {
          for (int a = 0; a < 3; ++a) {
            if (xyz[a] == p) c[a] = decode_ply_scalar(prop.type, data.data() + off);
          }
        }
        off += sz;
      }
      if (e == vertex_element) cloud.points.push_back(checked_point(c[0], c[1], c[2], name, payload_start + off));
    }
  }
  return cloud;
}

inline PointCloud load_off(const fs::path& path) {
  const std::string name = path.string();
  std::ifstream in(path);
  if (!in) throw ParseError(name, 0, "cannot open file");
  std::string line;
  std::size_t line_no = 0;
  auto next_content = [&]() -> bool {
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
    }
    return false;
  };
  if (!next_content()) throw ParseError(name, 1, "empty OFF file");
  std::istringstream header(line);
  std::string magic;
  header >> magic;
  if (magic != "OFF") throw ParseError(name, line_no, "missing 'OFF' magic");
  long long nv = -1, nf = -1;
  if (!(header >> nv >> nf)) {
    if (!next_content()) throw ParseError(name, line_no, "missing OFF counts");
    std::istringstream counts(line);
    if (!(counts >> nv >> nf)) throw ParseError(name, line_no, "malformed OFF counts");
  }
  if (nv < 0 || nf < 0) throw ParseError(name, line_no, "negative OFF counts");
  PointCloud cloud;
  cloud.id = path.stem().string();
  cloud.points.reserve(static_cast<std::size_t>(nv));
  for (long long i = 0; i < nv; ++i) {
    if (!next_content()) throw ParseError(name, line_no, "file ends before vertex #" + std::to_string(i));
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) throw ParseError(name, line_no, "malformed vertex line");
    cloud.points.push_back(checked_point(x, y, z, name, line_no));
  }
  return cloud;
}

inline PointCloud load_xyz(const fs::path& path) {
  const std::string name = path.string();
  std::ifstream in(path);
  if (!in) throw ParseError(name, 0, "cannot open file");
  PointCloud cloud;
  cloud.id = path.stem().string();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::string tok[3];
    if (!(ls >> tok[0] >> tok[1] >> tok[2])) throw ParseError(name, line_no, "expected three coordinates");
    double v[3];
    for (int a = 0; a < 3; ++a) {
      try {
        std::size_t used = 0;
        v[a] = std::stod(tok[a], &used);
        if (used != tok[a].size()) throw std::invalid_argument(tok[a]);
      } catch (const std::out_of_range&) {
        throw ParseError(name, line_no, "non-finite coordinate");
      } catch (const std::invalid_argument&) {
        throw ParseError(name, line_no, "malformed number '" + tok[a] + "'");
      }
    }
    cloud.points.push_back(checked_point(v[0], v[1], v[2], name, line_no));
  }
  return cloud;
}

}  // namespace detail

/// Reads .ply (ASCII or binary little-endian), .off or .xyz. Meshes yield
/// their vertices only.
inline PointCloud load_point_cloud(const fs::path& path) {
  const std::string ext = detail::lower_extension(path);
  PointCloud cloud;
  if (ext == ".ply") {
    cloud = detail::load_ply(path);
  } else if (ext == ".off") {
    cloud = detail::load_off(path);
  } else if (ext == ".xyz") {
    cloud = detail::load_xyz(path);
  } else {
    throw ParseError(path.string(), 0, "unsupported extension '" + ext + "'");
  }
  if (cloud.empty()) throw ParseError(path.string(), 0, "file contains no points");
  return cloud;
}

/// Writes a binary little-endian PLY with float64 coordinates (lossless).
inline void save_ply(const PointCloud& cloud, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  for (const auto& p : cloud.points) {
    for (int a = 0; a < 3; ++a) {
      double v = p[a];
      unsigned char b[8];
      std::memcpy(b, &v, 8);
      if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 8);
      out.write(reinterpret_cast<const char*>(b), 8);
    }
  }
  if (!out) throw Error("failed writing " + path.string());
}

/// Twelve float64 values, row-major 3x4 [R|t].
inline std::string format_transform(const Mat3& m, const Vec3& t) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (int r = 0; r < 3; ++r) {
    os << m(r, 0) << ' ' << m(r, 1) << ' ' << m(r, 2) << ' ' << t[r] << '\n';
  }
  return os.str();
}

inline void save_transform(const RigidTransform& t, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << format_transform(t.rotation, t.translation);
}

inline AffineTransform parse_transform_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::array<double, 12> v{};
  for (std::size_t i = 0; i < 12; ++i) {
    std::string tok;
    if (!(in >> tok)) throw ParseError(origin, i, "expected 12 values, found " + std::to_string(i));
    try {
      v[i] = std::stod(tok);
    } catch (const std::exception&) {
      throw ParseError(origin, i, "malformed number '" + tok + "'");
    }
  }
  std::string extra;
  if (in >> extra) throw ParseError(origin, 12, "trailing data after 12 values");
  AffineTransform t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t.matrix(r, c) = v[r * 4 + c];
    t.translation[r] = v[r * 4 + 3];
  }
  if (!t.all_finite()) throw ParseError(origin, 0, "non-finite transform entry");
  return t;
}

/// Loads a rigid transform and validates orthonormality at 1e-6 (text round-off).
inline RigidTransform load_rigid_transform(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::stringstream ss;
  ss << in.rdbuf();
  const AffineTransform a = parse_transform_text(ss.str(), path.string());
  RigidTransform r{a.matrix, a.translation};
  if (!r.is_valid(1e-6)) throw ParseError(path.string(), 0, "transform is not rigid");
  return r;
}

}  // namespace wsdesc::io
