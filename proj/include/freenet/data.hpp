#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "freenet/rng.hpp"
#include "freenet/tensor.hpp"

namespace freenet {

// A scene on disk is a triple sharing one path stem:
//   <stem>.hdr    UTF-8 "key: value" lines (bands/height/width/classes/
//                 dtype/byteorder, optional class_names)
//   <stem>.cube   raw float32 little-endian, band-major [C,H,W]
//   <stem>.labels raw uint16 little-endian, row-major, 0 = unlabeled
// Split masks live in a separate raw uint8 raster: 0 none, 1 train, 2 test.
struct HsiScene {
  TensorData<float> cube;  // [C,H,W]
  std::vector<std::uint16_t> labels;
  int num_classes = 0;
  std::vector<std::string> class_names;  // empty or one per class

  int bands() const { return cube.shape[0]; }
  int height() const { return cube.shape[1]; }
  int width() const { return cube.shape[2]; }
};

namespace detail {

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw FormatError("cannot open '" + path + "'");
  const std::streamsize size = is.tellg();
  is.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(size));
  if (size > 0 && !is.read(buf.data(), size)) throw FormatError("cannot read '" + path + "'");
  return buf;
}

inline void write_file(const std::string& path, const char* data, std::size_t size) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os.write(data, static_cast<std::streamsize>(size));
  if (!os) throw FormatError("write to '" + path + "' failed");
}

inline std::uint16_t load_u16_le(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

inline float load_f32_le(const unsigned char* p) {
  const std::uint32_t bits =
      std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline void save_scene(const std::string& stem, const HsiScene& scene) {
  if (scene.labels.size() != static_cast<std::size_t>(std::int64_t(scene.height()) * scene.width()))
    throw ShapeError("save_scene: label raster does not match cube dims");
  std::ostringstream hdr;
  hdr << "bands: " << scene.bands() << "\n"
      << "height: " << scene.height() << "\n"
      << "width: " << scene.width() << "\n"
      << "classes: " << scene.num_classes << "\n"
      << "dtype: float32\n"
      << "byteorder: little\n";
  if (!scene.class_names.empty()) {
    hdr << "class_names: ";
    for (std::size_t i = 0; i < scene.class_names.size(); ++i) {
      if (i) hdr << ',';
      hdr << scene.class_names[i];
    }
    hdr << "\n";
  }
  const std::string h = hdr.str();
  detail::write_file(stem + ".hdr", h.data(), h.size());

  std::vector<unsigned char> cube_bytes(scene.cube.v.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(cube_bytes.data(), scene.cube.v.data(), cube_bytes.size());
  } else {
    for (std::size_t i = 0; i < scene.cube.v.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &scene.cube.v[i], 4);
      cube_bytes[4 * i] = static_cast<unsigned char>(bits);
      cube_bytes[4 * i + 1] = static_cast<unsigned char>(bits >> 8);
      cube_bytes[4 * i + 2] = static_cast<unsigned char>(bits >> 16);
      cube_bytes[4 * i + 3] = static_cast<unsigned char>(bits >> 24);
    }
  }
  detail::write_file(stem + ".cube", reinterpret_cast<const char*>(cube_bytes.data()), cube_bytes.size());

  std::vector<unsigned char> label_bytes(scene.labels.size() * 2);
  for (std::size_t i = 0; i < scene.labels.size(); ++i) {
    label_bytes[2 * i] = static_cast<unsigned char>(scene.labels[i]);
    label_bytes[2 * i + 1] = static_cast<unsigned char>(scene.labels[i] >> 8);
  }
  detail::write_file(stem + ".labels", reinterpret_cast<const char*>(label_bytes.data()), label_bytes.size());
}

inline HsiScene load_scene(const std::string& stem) {
  const auto hdr_bytes = detail::read_file(stem + ".hdr");
  std::istringstream hdr(std::string(hdr_bytes.begin(), hdr_bytes.end()));
  int bands = -1, height = -1, width = -1, classes = -1;
  std::string dtype, byteorder;
  std::vector<std::string> class_names;
  std::string line;
  int line_no = 0;
  while (std::getline(hdr, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos)
      throw FormatError(stem + ".hdr:" + std::to_string(line_no) + ": expected 'key: value'");
    const std::string key = line.substr(0, colon);
    std::string value = line.substr(colon + 1);
    while (!value.empty() && value.front() == ' ') value.erase(value.begin());
    while (!value.empty() && (value.back() == '\r' || value.back() == ' ')) value.pop_back();
    auto as_int = [&](int& dst) {
      try {
        dst = std::stoi(value);
      } catch (const std::exception&) {
        throw FormatError(stem + ".hdr:" + std::to_string(line_no) + ": bad integer '" + value + "'");
      }
      if (dst < 1) throw FormatError(stem + ".hdr:" + std::to_string(line_no) + ": '" + key + "' must be positive");
    };
    if (key == "bands") as_int(bands);
    else if (key == "height") as_int(height);
    else if (key == "width") as_int(width);
    else if (key == "classes") as_int(classes);
    else if (key == "dtype") dtype = value;
    else if (key == "byteorder") byteorder = value;
    else if (key == "class_names") {
      std::istringstream cs(value);
      std::string name;
      while (std::getline(cs, name, ',')) class_names.push_back(name);
    }
    // unknown keys are ignored for forward compatibility
  }
  if (bands < 0 || height < 0 || width < 0 || classes < 0)
    throw FormatError(stem + ".hdr: missing one of bands/height/width/classes");
  if (dtype != "float32") throw FormatError(stem + ".hdr: unknown dtype '" + dtype + "' (only float32)");
  if (byteorder != "little") throw FormatError(stem + ".hdr: unknown byteorder '" + byteorder + "' (only little)");
  if (!class_names.empty() && class_names.size() != static_cast<std::size_t>(classes))
    throw FormatError(stem + ".hdr: " + std::to_string(class_names.size()) + " class_names for " +
                      std::to_string(classes) + " classes");

  HsiScene scene;
  scene.num_classes = classes;
  scene.class_names = std::move(class_names);

  const auto cube_bytes = detail::read_file(stem + ".cube");
  const std::size_t want_cube = std::size_t(4) * bands * height * width;
  if (cube_bytes.size() != want_cube)
    throw FormatError(stem + ".cube: expected " + std::to_string(want_cube) + " bytes for [" + std::to_string(bands) +
                      "," + std::to_string(height) + "," + std::to_string(width) + "], found " +
                      std::to_string(cube_bytes.size()));
  scene.cube = TensorData<float>({bands, height, width});
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(scene.cube.v.data(), cube_bytes.data(), want_cube);
  } else {
    const auto* p = reinterpret_cast<const unsigned char*>(cube_bytes.data());
    for (std::size_t i = 0; i < scene.cube.v.size(); ++i) scene.cube.v[i] = detail::load_f32_le(p + 4 * i);
  }

  const auto label_bytes = detail::read_file(stem + ".labels");
  const std::size_t want_labels = std::size_t(2) * height * width;
  if (label_bytes.size() != want_labels)
    throw FormatError(stem + ".labels: expected " + std::to_string(want_labels) + " bytes, found " +
                      std::to_string(label_bytes.size()));
  scene.labels.resize(std::size_t(height) * width);
  const auto* lp = reinterpret_cast<const unsigned char*>(label_bytes.data());
  for (std::size_t i = 0; i < scene.labels.size(); ++i) {
    scene.labels[i] = detail::load_u16_le(lp + 2 * i);
    if (scene.labels[i] > classes)
      throw FormatError(stem + ".labels: label " + std::to_string(scene.labels[i]) + " at byte offset " +
                        std::to_string(2 * i) + " exceeds " + std::to_string(classes) + " classes");
  }
  return scene;
}

// ----- split masks ----------------------------------------------------------

constexpr std::uint8_t kMaskNone = 0, kMaskTrain = 1, kMaskTest = 2;

inline void save_masks(const std::string& path, const std::vector<std::uint8_t>& mask) {
  detail::write_file(path, reinterpret_cast<const char*>(mask.data()), mask.size());
}

inline std::vector<std::uint8_t> load_masks(const std::string& path, std::size_t expected) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() != expected)
    throw FormatError(path + ": expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes.size()));
  std::vector<std::uint8_t> mask(bytes.begin(), bytes.end());
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] > 2)
      throw FormatError(path + ": mask value " + std::to_string(mask[i]) + " at byte offset " + std::to_string(i) +
                        " (want 0/1/2)");
  return mask;
}

struct Split {
  std::vector<std::uint8_t> mask;  // 0 none, 1 train, 2 test
  std::vector<std::string> warnings;
};

// Per class: min(per_class_train, count-1) training pixels chosen by seeded
// shuffle, remainder to test.  Classes with fewer than 2 labeled pixels are
// left out of both masks, with a warning.
inline Split random_split(const std::vector<std::uint16_t>& labels, int h, int w, int num_classes,
                          int per_class_train, std::uint64_t seed) {
  if (per_class_train < 1) throw ConfigError("random_split: per_class_train must be >= 1");
  if (static_cast<std::int64_t>(labels.size()) != std::int64_t(h) * w)
    throw ShapeError("random_split: raster size does not match dims");
  Split split;
  split.mask.assign(labels.size(), kMaskNone);
  std::vector<std::vector<std::int64_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l == 0) continue;
    if (l > num_classes)
      throw ContractError("random_split: label " + std::to_string(l) + " exceeds " + std::to_string(num_classes));
    by_class[l - 1].push_back(static_cast<std::int64_t>(i));
  }
  for (int k = 0; k < num_classes; ++k) {
    auto& idx = by_class[k];
    if (idx.size() < 2) {
      split.warnings.push_back("class " + std::to_string(k + 1) + " has " + std::to_string(idx.size()) +
                               " labeled pixel(s); skipped (needs at least 2)");
      continue;
    }
    Rng rng = Rng::stream(seed, 0x5B11u, static_cast<std::uint64_t>(k + 1));
    rng.shuffle(idx);
    const std::size_t n_train = std::min<std::size_t>(per_class_train, idx.size() - 1);
    for (std::size_t i = 0; i < idx.size(); ++i)
      split.mask[idx[i]] = i < n_train ? kMaskTrain : kMaskTest;
  }
  return split;
}

// ----- per-band normalization ------------------------------------------------

struct BandStats {
  double mean = 0;
  double stddev = 0;
};

// In-place z-score per band over all pixels; a stddev below 1e-8 is clamped,
// so constant bands map to all zeros.
inline std::vector<BandStats> normalize_bands(TensorData<float>& cube) {
  if (cube.rank() != 3) throw ShapeError("normalize_bands: want [C,H,W]");
  const int c = cube.shape[0];
  const std::int64_t hw = std::int64_t(cube.shape[1]) * cube.shape[2];
  std::vector<BandStats> stats(c);
  for (int b = 0; b < c; ++b) {
    float* p = cube.data() + b * hw;
    double sum = 0;
    for (std::int64_t i = 0; i < hw; ++i) sum += p[i];
    const double mean = sum / double(hw);
    double var = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
      const double d = p[i] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / double(hw));
    const double denom = sd < 1e-8 ? 1e-8 : sd;
    for (std::int64_t i = 0; i < hw; ++i) p[i] = static_cast<float>((p[i] - mean) / denom);
    stats[b] = {mean, sd};
  }
  return stats;
}

// ----- synthetic fixture ------------------------------------------------------

struct SyntheticConfig {
  int height = 64;
  int width = 64;
  int bands = 8;
  int classes = 4;
  double noise_sigma = 0.1;
  std::uint64_t seed = 1;
};

// Class signature: a per-class offset plus a phase-shifted sinusoid across
// bands.  Adjacent offsets differ by 0.75 while the sinusoid contributes at
// most +-0.25 per band, so clean signatures are strictly separated.
inline double synthetic_signature(int cls, int band, int num_classes, int num_bands) {
  const double two_pi = 6.283185307179586476925286766559;
  return 0.75 * (cls - 1) +
         0.25 * std::sin(two_pi * band / double(num_bands) + two_pi * (cls - 1) / double(num_classes));
}

// Grid geometry for the synthetic label map: near-square tiling, tiles
// assigned classes round-robin in row-major order.
struct SyntheticGrid {
  int rows = 0, cols = 0;
  int tile_class(int tr, int tc, int num_classes) const { return (tr * cols + tc) % num_classes + 1; }
};

inline SyntheticGrid synthetic_grid(int num_classes) {
  SyntheticGrid g;
  g.cols = static_cast<int>(std::ceil(std::sqrt(double(num_classes))));
  g.rows = (num_classes + g.cols - 1) / g.cols;
  return g;
}

inline HsiScene generate_synthetic_scene(const SyntheticConfig& cfg) {
  if (cfg.classes < 2) throw ConfigError("generate_synthetic_scene: need at least 2 classes");
  if (cfg.classes > 4096) throw ConfigError("generate_synthetic_scene: too many classes");
  if (cfg.bands < 1) throw ConfigError("generate_synthetic_scene: need at least 1 band");
  if (cfg.noise_sigma < 0) throw ConfigError("generate_synthetic_scene: noise sigma must be >= 0");
  const SyntheticGrid grid = synthetic_grid(cfg.classes);
  if (cfg.height < grid.rows || cfg.width < grid.cols)
    throw ConfigError("generate_synthetic_scene: scene too small for " + std::to_string(cfg.classes) + " classes");

  HsiScene scene;
  scene.num_classes = cfg.classes;
  scene.labels.resize(std::size_t(cfg.height) * cfg.width);
  for (int r = 0; r < cfg.height; ++r) {
    const int tr = static_cast<int>(std::int64_t(r) * grid.rows / cfg.height);
    for (int c = 0; c < cfg.width; ++c) {
      const int tc = static_cast<int>(std::int64_t(c) * grid.cols / cfg.width);
      scene.labels[std::size_t(r) * cfg.width + c] = static_cast<std::uint16_t>(grid.tile_class(tr, tc, cfg.classes));
    }
  }
  scene.cube = TensorData<float>({cfg.bands, cfg.height, cfg.width});
  Rng rng = Rng::stream(cfg.seed, 0xDA7Au, 0);
  for (int b = 0; b < cfg.bands; ++b) {
    float* plane = scene.cube.data() + std::int64_t(b) * cfg.height * cfg.width;
    for (std::int64_t i = 0; i < std::int64_t(cfg.height) * cfg.width; ++i) {
      const int cls = scene.labels[i];
      plane[i] = static_cast<float>(synthetic_signature(cls, b, cfg.classes, cfg.bands) +
                                    cfg.noise_sigma * rng.normal());
    }
  }
  return scene;
}

}  // namespace freenet
