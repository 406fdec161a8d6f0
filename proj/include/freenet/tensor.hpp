#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "freenet/common.hpp"

namespace freenet {

// Plain dense row-major array.  No autodiff here; graphs wrap these values.
template <class S>
struct TensorData {
  Shape shape;
  std::vector<S> v;

  TensorData() = default;
  explicit TensorData(Shape s) : shape(std::move(s)) {
    check_shape(shape, "TensorData");
    v.assign(static_cast<std::size_t>(freenet::numel(shape)), S{0});
  }
  TensorData(Shape s, std::vector<S> values) : shape(std::move(s)), v(std::move(values)) {
    check_shape(shape, "TensorData");
    if (static_cast<std::int64_t>(v.size()) != freenet::numel(shape))
      throw ShapeError("TensorData: " + std::to_string(v.size()) + " values for shape " +
                       shape_str(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  // [C,H,W] accessors for the common case.
  S& at(int c, int h, int w) {
    return v[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }
  S at(int c, int h, int w) const {
    return v[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }

  bool all_finite() const {
    for (S x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

// Zero-pad a [C,H,W] cube on the bottom/right so H and W become multiples of
// `multiple`.  Returns the input unchanged (by copy) when already aligned.
template <class S>
TensorData<S> pad_spatial_to_multiple(const TensorData<S>& x, int multiple) {
  if (x.rank() != 3) throw ShapeError("pad_spatial_to_multiple: want [C,H,W], got " + shape_str(x.shape));
  if (multiple < 1) throw DomainError("pad_spatial_to_multiple: multiple must be >= 1");
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int hp = (h + multiple - 1) / multiple * multiple;
  const int wp = (w + multiple - 1) / multiple * multiple;
  if (hp == h && wp == w) return x;
  TensorData<S> out({c, hp, wp});
  for (int ci = 0; ci < c; ++ci)
    for (int r = 0; r < h; ++r) {
      const S* src = x.data() + (static_cast<std::size_t>(ci) * h + r) * w;
      S* dst = out.data() + (static_cast<std::size_t>(ci) * hp + r) * wp;
      for (int col = 0; col < w; ++col) dst[col] = src[col];
    }
  return out;
}

// Crop a [C,H,W] cube back to the top-left h x w window.
template <class S>
TensorData<S> crop_spatial(const TensorData<S>& x, int h, int w) {
  if (x.rank() != 3) throw ShapeError("crop_spatial: want [C,H,W], got " + shape_str(x.shape));
  if (h < 1 || w < 1 || h > x.shape[1] || w > x.shape[2])
    throw ShapeError("crop_spatial: window " + std::to_string(h) + "x" + std::to_string(w) +
                     " outside " + shape_str(x.shape));
  const int c = x.shape[0];
  if (h == x.shape[1] && w == x.shape[2]) return x;
  TensorData<S> out({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int r = 0; r < h; ++r) {
      const S* src = x.data() + (static_cast<std::size_t>(ci) * x.shape[1] + r) * x.shape[2];
      S* dst = out.data() + (static_cast<std::size_t>(ci) * h + r) * w;
      for (int col = 0; col < w; ++col) dst[col] = src[col];
    }
  return out;
}

}  // namespace freenet
