#pragma once

// File formats shared by the CLI stages: ASCII PLY point clouds (float64
// vertex elements with optional normals), 8-bit PGM images, 16-bit PGM
// depth maps in integer millimeters and small CSV helpers. Writers use
// fixed formatting so identical inputs produce byte-identical files.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "scanpilot/geom.hpp"
#include "scanpilot/grid.hpp"

namespace scanpilot::io {

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// PLY

inline void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream f(path);
  if (!f) throw IoError("write_ply: cannot open " + path.string());
  const bool normals = cloud.has_normals();
  f << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n";
  f << "property double x\nproperty double y\nproperty double z\n";
  if (normals) f << "property double nx\nproperty double ny\nproperty double nz\n";
  f << "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    f << format_double(p.x()) << ' ' << format_double(p.y()) << ' ' << format_double(p.z());
    if (normals) {
      const Vec3& n = cloud.normals[i];
      f << ' ' << format_double(n.x()) << ' ' << format_double(n.y()) << ' '
        << format_double(n.z());
    }
    f << '\n';
  }
  if (!f) throw IoError("write_ply: write failed for " + path.string());
}

inline PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("read_ply: cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind("ply", 0) != 0) {
    throw IoError("read_ply: missing ply magic in " + path.string());
  }
  std::size_t vertex_count = 0;
  std::vector<std::string> props;
  bool ascii = false, in_vertex = false;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      ascii = fmt == "ascii";
    } else if (tok == "element") {
      std::string name;
      ss >> name >> vertex_count;
      in_vertex = name == "vertex";
      if (!in_vertex && vertex_count > 0 && !props.empty()) break;
    } else if (tok == "property" && in_vertex) {
      std::string type, name;
      ss >> type >> name;
      props.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }
  if (!ascii) throw IoError("read_ply: only ascii 1.0 supported: " + path.string());
  int ix = -1, iy = -1, iz = -1, inx = -1, iny = -1, inz = -1;
  for (int i = 0; i < static_cast<int>(props.size()); ++i) {
    if (props[i] == "x") ix = i;
    else if (props[i] == "y") iy = i;
    else if (props[i] == "z") iz = i;
    else if (props[i] == "nx") inx = i;
    else if (props[i] == "ny") iny = i;
    else if (props[i] == "nz") inz = i;
  }
  if (ix < 0 || iy < 0 || iz < 0) throw IoError("read_ply: missing x/y/z in " + path.string());
  const bool normals = inx >= 0 && iny >= 0 && inz >= 0;

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  std::vector<double> row(props.size());
  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (!std::getline(f, line)) throw IoError("read_ply: truncated vertex list " + path.string());
    std::istringstream ss(line);
    for (double& r : row) {
      if (!(ss >> r)) throw IoError("read_ply: malformed vertex row in " + path.string());
    }
    cloud.points.emplace_back(row[ix], row[iy], row[iz]);
    if (normals) cloud.normals.emplace_back(row[inx], row[iny], row[inz]);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// PGM (binary P5). 8-bit for images/masks, 16-bit big-endian for depth (mm).

inline void write_pgm8(const std::filesystem::path& path, const Grid<double>& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_pgm8: cannot open " + path.string());
  f << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.width));
  for (int h = 0; h < img.height; ++h) {
    for (int w = 0; w < img.width; ++w) {
      double v = img.at(h, w);
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      row[static_cast<std::size_t>(w)] = static_cast<unsigned char>(v * 255.0 + 0.5);
    }
    f.write(reinterpret_cast<const char*>(row.data()), img.width);
  }
}

inline void write_pgm8(const std::filesystem::path& path, const BinaryGrid& mask) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_pgm8: cannot open " + path.string());
  f << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(mask.width));
  for (int h = 0; h < mask.height; ++h) {
    for (int w = 0; w < mask.width; ++w) {
      row[static_cast<std::size_t>(w)] = mask.at(h, w) ? 255 : 0;
    }
    f.write(reinterpret_cast<const char*>(row.data()), mask.width);
  }
}

namespace detail {

inline void read_pgm_header(std::istream& f, const std::string& where, int& width, int& height,
                            int& maxval) {
  std::string magic;
  f >> magic;
  if (magic != "P5") throw IoError("read_pgm: not a P5 file: " + where);
  auto next_int = [&](int& out) {
    // Skip whitespace and '#' comments between header fields.
    int c = f.get();
    while (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') {
      if (c == '#') {
        while (c != '\n' && c != EOF) c = f.get();
      }
      c = f.get();
    }
    f.unget();
    if (!(f >> out)) throw IoError("read_pgm: bad header in " + where);
  };
  next_int(width);
  next_int(height);
  next_int(maxval);
  f.get();  // single whitespace before raster
}

}  // namespace detail

inline Grid<double> read_pgm8(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_pgm8: cannot open " + path.string());
  int w = 0, h = 0, maxval = 0;
  detail::read_pgm_header(f, path.string(), w, h, maxval);
  if (maxval != 255) throw IoError("read_pgm8: expected 8-bit maxval in " + path.string());
  Grid<double> img(w, h);
  std::vector<unsigned char> row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), w);
    if (!f) throw IoError("read_pgm8: truncated raster in " + path.string());
    for (int x = 0; x < w; ++x) img.at(y, x) = row[static_cast<std::size_t>(x)] / 255.0;
  }
  return img;
}

inline BinaryGrid read_pgm8_mask(const std::filesystem::path& path) {
  Grid<double> img = read_pgm8(path);
  BinaryGrid mask(img.width, img.height);
  for (std::size_t i = 0; i < img.data.size(); ++i) mask.data[i] = img.data[i] >= 0.5 ? 1 : 0;
  return mask;
}

/// Depth grid in meters serialized as 16-bit PGM holding integer millimeters.
inline void write_pgm16_depth(const std::filesystem::path& path, const DepthGrid& depth) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_pgm16_depth: cannot open " + path.string());
  f << "P5\n" << depth.width << ' ' << depth.height << "\n65535\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(depth.width) * 2);
  for (int h = 0; h < depth.height; ++h) {
    for (int w = 0; w < depth.width; ++w) {
      const double d = depth.at(h, w);
      unsigned int mm = 0;
      if (d > 0.0) {
        const double v = d * 1000.0 + 0.5;
        mm = v >= 65535.0 ? 65535u : static_cast<unsigned int>(v);
      }
      row[static_cast<std::size_t>(w) * 2] = static_cast<unsigned char>(mm >> 8);
      row[static_cast<std::size_t>(w) * 2 + 1] = static_cast<unsigned char>(mm & 0xff);
    }
    f.write(reinterpret_cast<const char*>(row.data()), depth.width * 2);
  }
}

inline DepthGrid read_pgm16_depth(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_pgm16_depth: cannot open " + path.string());
  int w = 0, h = 0, maxval = 0;
  detail::read_pgm_header(f, path.string(), w, h, maxval);
  if (maxval != 65535) throw IoError("read_pgm16_depth: expected 16-bit maxval in " + path.string());
  DepthGrid depth(w, h);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 2);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), w * 2);
    if (!f) throw IoError("read_pgm16_depth: truncated raster in " + path.string());
    for (int x = 0; x < w; ++x) {
      const unsigned int mm = (static_cast<unsigned int>(row[static_cast<std::size_t>(x) * 2]) << 8) |
                              row[static_cast<std::size_t>(x) * 2 + 1];
      depth.at(y, x) = mm / 1000.0;
    }
  }
  return depth;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_csv(const std::filesystem::path& path, const std::string& header,
                      const std::vector<std::string>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("write_csv: cannot open " + path.string());
  f << header << '\n';
  for (const std::string& r : rows) f << r << '\n';
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                                      bool skip_header = true) {
  std::ifstream f(path);
  if (!f) throw IoError("read_csv: cannot open " + path.string());
  std::vector<std::vector<std::string>> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (first && skip_header) {
      first = false;
      continue;
    }
    first = false;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t pos = line.find(',', start);
      if (pos == std::string::npos) {
        cells.push_back(line.substr(start));
        break;
      }
      cells.push_back(line.substr(start, pos - start));
      start = pos + 1;
    }
    out.push_back(std::move(cells));
  }
  return out;
}

}  // namespace scanpilot::io
