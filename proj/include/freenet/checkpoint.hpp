#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "freenet/layers.hpp"
#include "freenet/tensor.hpp"

namespace freenet {

// On-disk weight format (all integers little-endian):
//   magic "FPGA" | version u32 | records...
// record: name_len u32 | name bytes | rank u32 | extent u32 * rank | f32 * n
// Records run to end of file.  Values are always stored as f32.

namespace detail {

static_assert(std::numeric_limits<float>::is_iec559, "IEEE-754 float required");

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
  return true;
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline bool get_f32(std::istream& is, float& f) {
  std::uint32_t bits;
  if (!get_u32(is, bits)) return false;
  std::memcpy(&f, &bits, 4);
  return true;
}

constexpr char kMagic[4] = {'F', 'P', 'G', 'A'};
constexpr std::uint32_t kVersion = 1;

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const std::vector<Param<S>>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_checkpoint: cannot open '" + path + "' for writing");
  os.write(detail::kMagic, 4);
  detail::put_u32(os, detail::kVersion);
  for (const auto& p : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto& shape = p.tensor.shape();
    detail::put_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (const S v : p.tensor.values()) detail::put_f32(os, static_cast<float>(v));
  }
  if (!os) throw FormatError("save_checkpoint: write to '" + path + "' failed");
}

inline std::vector<std::pair<std::string, TensorData<float>>> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("read_checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, detail::kMagic, 4) != 0)
    throw FormatError("read_checkpoint: '" + path + "' has no FPGA magic");
  std::uint32_t version = 0;
  if (!detail::get_u32(is, version) || version != detail::kVersion)
    throw FormatError("read_checkpoint: unsupported version " + std::to_string(version));
  std::vector<std::pair<std::string, TensorData<float>>> out;
  std::uint32_t name_len = 0;
  while (detail::get_u32(is, name_len)) {
    if (name_len == 0 || name_len > (1u << 16))
      throw FormatError("read_checkpoint: implausible name length " + std::to_string(name_len));
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw FormatError("read_checkpoint: truncated record name");
    std::uint32_t rank = 0;
    if (!detail::get_u32(is, rank) || rank > 8)
      throw FormatError("read_checkpoint: bad rank in record '" + name + "'");
    Shape shape(rank);
    std::int64_t n = 1;
    for (auto& d : shape) {
      std::uint32_t e = 0;
      if (!detail::get_u32(is, e) || e == 0) throw FormatError("read_checkpoint: bad extent in '" + name + "'");
      d = static_cast<int>(e);
      n *= d;
    }
    std::vector<float> vals(static_cast<std::size_t>(n));
    for (auto& v : vals)
      if (!detail::get_f32(is, v))
        throw FormatError("read_checkpoint: truncated values in '" + name + "'");
    out.emplace_back(std::move(name), TensorData<float>(std::move(shape), std::move(vals)));
  }
  return out;
}

// Strict load: the file must contain exactly the model's parameters, with
// matching shapes.
template <class S>
void load_checkpoint(const std::string& path, std::vector<Param<S>>& params) {
  auto records = read_checkpoint(path);
  if (records.size() != params.size())
    throw FormatError("load_checkpoint: '" + path + "' has " + std::to_string(records.size()) +
                      " parameters, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& [name, data] = records[i];
    if (name != p.name)
      throw FormatError("load_checkpoint: parameter " + std::to_string(i) + " is '" + name + "', model expects '" +
                        p.name + "' (config mismatch?)");
    if (data.shape != p.tensor.shape())
      throw FormatError("load_checkpoint: '" + name + "' has shape " + shape_str(data.shape) + ", model expects " +
                        shape_str(p.tensor.shape()) + " (config mismatch?)");
    auto& dst = p.tensor.values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<S>(data.v[j]);
  }
}

}  // namespace freenet
