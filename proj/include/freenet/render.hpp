#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "freenet/common.hpp"

namespace freenet {

// Fixed 16-colour class palette; class id k uses palette[(k-1) % 16] and
// unlabeled pixels (id 0) render black.
struct Rgb {
  std::uint8_t r, g, b;
};

inline const std::array<Rgb, 16>& class_palette() {
  static const std::array<Rgb, 16> palette = {{{230, 25, 75},
                                               {60, 180, 75},
                                               {255, 225, 25},
                                               {0, 130, 200},
                                               {245, 130, 48},
                                               {145, 30, 180},
                                               {70, 240, 240},
                                               {240, 50, 230},
                                               {210, 245, 60},
                                               {250, 190, 212},
                                               {0, 128, 128},
                                               {220, 190, 255},
                                               {170, 110, 40},
                                               {255, 250, 200},
                                               {128, 0, 0},
                                               {170, 255, 195}}};
  return palette;
}

inline Rgb class_color(int cls) {
  if (cls == 0) return {0, 0, 0};
  return class_palette()[(cls - 1) % 16];
}

// Binary P6 PPM of a label/prediction raster.
inline void write_ppm(const std::string& path, const std::vector<std::uint16_t>& raster, int h, int w) {
  if (raster.size() != static_cast<std::size_t>(std::int64_t(h) * w))
    throw ShapeError("write_ppm: raster size does not match " + std::to_string(h) + "x" + std::to_string(w));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("write_ppm: cannot open '" + path + "' for writing");
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Rgb col = class_color(raster[std::size_t(r) * w + c]);
      row[3 * c] = col.r;
      row[3 * c + 1] = col.g;
      row[3 * c + 2] = col.b;
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw FormatError("write_ppm: write to '" + path + "' failed");
}

// Argmax class map (1-based) from [N,H,W] logits; ties resolve to the lowest
// class id.
template <class T>
std::vector<std::uint16_t> argmax_map(const T& logits) {
  const int n = logits.shape[0], h = logits.shape[1], w = logits.shape[2];
  const std::int64_t hw = std::int64_t(h) * w;
  std::vector<std::uint16_t> out(static_cast<std::size_t>(hw));
  for (std::int64_t i = 0; i < hw; ++i) {
    int best = 0;
    auto best_v = logits.v[i];
    for (int k = 1; k < n; ++k) {
      const auto v = logits.v[k * hw + i];
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    out[i] = static_cast<std::uint16_t>(best + 1);
  }
  return out;
}

// Raw uint16 little-endian raster (same payload layout as <stem>.labels).
inline void save_label_raster(const std::string& path, const std::vector<std::uint16_t>& raster) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_label_raster: cannot open '" + path + "'");
  std::vector<unsigned char> bytes(raster.size() * 2);
  for (std::size_t i = 0; i < raster.size(); ++i) {
    bytes[2 * i] = static_cast<unsigned char>(raster[i]);
    bytes[2 * i + 1] = static_cast<unsigned char>(raster[i] >> 8);
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("save_label_raster: write failed");
}

inline std::vector<std::uint16_t> load_label_raster(const std::string& path, std::size_t expected) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw FormatError("load_label_raster: cannot open '" + path + "'");
  const std::streamsize size = is.tellg();
  if (static_cast<std::size_t>(size) != expected * 2)
    throw FormatError("load_label_raster: '" + path + "' expected " + std::to_string(expected * 2) +
                      " bytes, found " + std::to_string(size));
  is.seekg(0);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(size));
  if (!is.read(reinterpret_cast<char*>(bytes.data()), size)) throw FormatError("load_label_raster: read failed");
  std::vector<std::uint16_t> out(expected);
  for (std::size_t i = 0; i < expected; ++i)
    out[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
  return out;
}

}  // namespace freenet
