#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "freenet/layers.hpp"
#include "freenet/tensor.hpp"

namespace freenet {

// End-to-end fully convolutional classifier for [bands,H,W] cubes.  The
// encoder is a stem plus four attention-gated blocks (the first three end in
// a stride-2 downsample, giving feature strides 2/4/8/8); the decoder fuses
// the four block outputs through 1x1 lateral convolutions, deepest first,
// upsampling back to full resolution, and a two-conv head emits per-pixel
// class logits (no softmax).
struct FreeNetConfig {
  int in_bands = 0;
  int num_classes = 0;
  double beta = 1.0;        // width multiplier on every internal channel count
  int reduction_ratio = 16;  // attention bottleneck divisor

  static constexpr std::array<int, 4> kBaseWidths{64, 128, 192, 256};
  static constexpr int kBaseDecoderWidth = 128;
  static constexpr int kStrideMultiple = 8;  // spatial dims must divide by this

  int scaled(int base) const {
    const int w = static_cast<int>(std::lround(beta * base));
    if (w < 1)
      throw ConfigError("FreeNetConfig: beta " + std::to_string(beta) + " rounds a width of " +
                        std::to_string(base) + " down to zero channels");
    return w;
  }
  std::array<int, 4> widths() const {
    return {scaled(kBaseWidths[0]), scaled(kBaseWidths[1]), scaled(kBaseWidths[2]), scaled(kBaseWidths[3])};
  }
  int decoder_width() const { return scaled(kBaseDecoderWidth); }

  void validate() const {
    if (in_bands < 1) throw ConfigError("FreeNetConfig: in_bands must be >= 1");
    if (num_classes < 2) throw ConfigError("FreeNetConfig: num_classes must be >= 2");
    if (!(beta > 0)) throw ConfigError("FreeNetConfig: beta must be positive");
    if (reduction_ratio < 1) throw ConfigError("FreeNetConfig: reduction_ratio must be >= 1");
    (void)widths();
    (void)decoder_width();
  }
};

template <class S>
struct BasicModule {  // 3x3 conv -> group norm -> relu
  Conv2dLayer<S> conv;
  GroupNormLayer<S> gn;

  static BasicModule create(int cin, int cout, Rng& rng) {
    BasicModule m;
    m.conv = Conv2dLayer<S>::create(cin, cout, 3, 1, /*with_bias=*/true, rng);
    m.gn = GroupNormLayer<S>::create(cout);
    return m;
  }
  Tensor<S> forward(Graph<S>& g, const Tensor<S>& x) const {
    return g.relu(gn.forward(g, conv.forward(g, x)));
  }
  void collect(std::vector<Param<S>>& out, const std::string& prefix) const {
    conv.collect(out, prefix + ".conv");
    gn.collect(out, prefix + ".gn");
  }
};

template <class S>
struct HybridBlock {  // spectral attention -> basic module -> optional stride-2 conv+relu
  SpectralAttention<S> sa;
  BasicModule<S> basic;
  Conv2dLayer<S> down;  // undefined weight when the block keeps its stride
  bool has_down = false;

  static HybridBlock create(int cin, int cout_down, bool with_down, int reduction_ratio, Rng& rng) {
    HybridBlock b;
    b.sa = SpectralAttention<S>::create(cin, reduction_ratio, rng);
    b.basic = BasicModule<S>::create(cin, cin, rng);
    b.has_down = with_down;
    if (with_down) b.down = Conv2dLayer<S>::create(cin, cout_down, 3, 2, /*with_bias=*/true, rng);
    return b;
  }
  Tensor<S> forward(Graph<S>& g, const Tensor<S>& x) const {
    Tensor<S> t = basic.forward(g, sa.forward(g, x));
    if (has_down) t = g.relu(down.forward(g, t));
    return t;
  }
  void collect(std::vector<Param<S>>& out, const std::string& prefix) const {
    sa.collect(out, prefix + ".sa");
    basic.collect(out, prefix + ".basic");
    if (has_down) down.collect(out, prefix + ".down");
  }
};

template <class S>
class FreeNetModel {
 public:
  FreeNetConfig config;
  BasicModule<S> stem;
  std::array<HybridBlock<S>, 4> blocks;
  Conv2dLayer<S> lateral4_1, lateral3_1, lateral2_2, lateral1_3;
  std::array<Conv2dLayer<S>, 3> decoder;  // each stage: 3x3 conv -> relu -> 2x upsample
  Conv2dLayer<S> head3, head1;

  static FreeNetModel build(const FreeNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    FreeNetModel m;
    m.config = cfg;
    const auto w = cfg.widths();
    const int wd = cfg.decoder_width();
    int idx = 0;
    auto next_rng = [&] { return Rng::stream(seed, 0x1417, static_cast<std::uint64_t>(idx++)); };
    auto rng = next_rng();
    m.stem = BasicModule<S>::create(cfg.in_bands, w[0], rng);
    for (int b = 0; b < 4; ++b) {
      rng = next_rng();
      const bool with_down = b < 3;
      m.blocks[b] = HybridBlock<S>::create(w[b], with_down ? w[b + 1] : 0, with_down, cfg.reduction_ratio, rng);
    }
    rng = next_rng();
    m.lateral4_1 = Conv2dLayer<S>::create(w[3], wd, 1, 1, true, rng);
    rng = next_rng();
    m.lateral3_1 = Conv2dLayer<S>::create(w[3], wd, 1, 1, true, rng);
    rng = next_rng();
    m.lateral2_2 = Conv2dLayer<S>::create(w[2], wd, 1, 1, true, rng);
    rng = next_rng();
    m.lateral1_3 = Conv2dLayer<S>::create(w[1], wd, 1, 1, true, rng);
    for (int d = 0; d < 3; ++d) {
      rng = next_rng();
      m.decoder[d] = Conv2dLayer<S>::create(wd, wd, 3, 1, true, rng);
    }
    rng = next_rng();
    m.head3 = Conv2dLayer<S>::create(wd, wd, 3, 1, true, rng);
    rng = next_rng();
    m.head1 = Conv2dLayer<S>::create(wd, cfg.num_classes, 1, 1, true, rng);
    m.rebuild_param_list();
    return m;
  }

  // Full-image forward.  Spatial dims must be multiples of 8 so the three
  // downsample/upsample pairs land back on the input grid; callers with
  // arbitrary dims go through predict_padded.
  Tensor<S> forward(Graph<S>& g, const Tensor<S>& x) const {
    if (x.shape().size() != 3 || x.shape()[0] != config.in_bands)
      throw ShapeError("FreeNetModel::forward: want [" + std::to_string(config.in_bands) + ",H,W], got " +
                       shape_str(x.shape()));
    const int h = x.shape()[1], w = x.shape()[2];
    if (h % FreeNetConfig::kStrideMultiple != 0 || w % FreeNetConfig::kStrideMultiple != 0)
      throw DimensionError("FreeNetModel::forward: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                           " are not multiples of 8; use predict_padded for arbitrary sizes");

    Tensor<S> s = stem.forward(g, x);
    Tensor<S> p1 = blocks[0].forward(g, s);    // stride 2
    Tensor<S> p2 = blocks[1].forward(g, p1);   // stride 4
    Tensor<S> p3 = blocks[2].forward(g, p2);   // stride 8
    Tensor<S> p4 = blocks[3].forward(g, p3);   // stride 8

    Tensor<S> q = lateral4_1.forward(g, p4);
    q = g.add(q, lateral3_1.forward(g, p3));
    q = g.upsample2x(g.relu(decoder[0].forward(g, q)));
    q = g.add(q, lateral2_2.forward(g, p2));
    q = g.upsample2x(g.relu(decoder[1].forward(g, q)));
    q = g.add(q, lateral1_3.forward(g, p1));
    q = g.upsample2x(g.relu(decoder[2].forward(g, q)));
    q = g.relu(head3.forward(g, q));
    return head1.forward(g, q);
  }

  // Zero-pads H and W up to the next multiple of 8 (bottom/right), runs the
  // network without recording gradients, and crops the logits back, so the
  // output raster matches the input exactly.
  TensorData<S> predict_padded(const TensorData<S>& x) const {
    if (x.rank() != 3) throw ShapeError("predict_padded: want [C,H,W], got " + shape_str(x.shape));
    const int h = x.shape[1], w = x.shape[2];
    TensorData<S> padded = pad_spatial_to_multiple(x, FreeNetConfig::kStrideMultiple);
    Graph<S> g(/*record=*/false);
    Tensor<S> input = Tensor<S>::from_data(std::move(padded));
    Tensor<S> logits = forward(g, input);
    return crop_spatial(logits.data(), h, w);
  }

  std::vector<Param<S>>& parameters() { return params_; }
  const std::vector<Param<S>>& parameters() const { return params_; }

  std::int64_t count_params() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

 private:
  void rebuild_param_list() {
    params_.clear();
    stem.collect(params_, "stem");
    for (int b = 0; b < 4; ++b) blocks[b].collect(params_, "block" + std::to_string(b + 1));
    lateral4_1.collect(params_, "lateral4_1");
    lateral3_1.collect(params_, "lateral3_1");
    lateral2_2.collect(params_, "lateral2_2");
    lateral1_3.collect(params_, "lateral1_3");
    for (int d = 0; d < 3; ++d) decoder[d].collect(params_, "decoder" + std::to_string(d + 1));
    head3.collect(params_, "head.conv3");
    head1.collect(params_, "head.conv1");
  }

  std::vector<Param<S>> params_;
};

// ----- analytic cost model -------------------------------------------------
//
// FLOP convention, also used by the CLI report: one multiply-accumulate is
// two FLOPs; conv/dense cost counts weights only (bias adds are ignored);
// group norm, relu, sigmoid, upsampling, and elementwise adds/scales cost one
// FLOP per output element.

struct LayerCost {
  std::string name;
  Shape out;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostReport {
  std::vector<LayerCost> rows;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

namespace detail {

inline std::int64_t conv_flops(int cin, int cout, int k, std::int64_t out_px) {
  return 2 * std::int64_t(k) * k * cin * cout * out_px;
}

struct CostBuilder {
  CostReport report;
  void row(std::string name, Shape out, std::int64_t params, std::int64_t flops) {
    report.params += params;
    report.flops += flops;
    report.rows.push_back({std::move(name), std::move(out), params, flops});
  }
};

// Encoder rows shared by the full model and the patch-based comparison.
// Returns the spatial extents after each downsample.
inline std::array<std::pair<int, int>, 4> encoder_cost(CostBuilder& b, const FreeNetConfig& cfg, int h, int w) {
  const auto ws = cfg.widths();
  auto down_extent = [](int e) { return (e - 1) / 2 + 1; };  // 3x3, stride 2, pad 1
  std::array<std::pair<int, int>, 4> ext;
  ext[0] = {down_extent(h), down_extent(w)};
  for (int i = 1; i < 4; ++i)
    ext[i] = {down_extent(ext[i - 1].first), down_extent(ext[i - 1].second)};
  ext[3] = ext[2];  // block 4 keeps stride 8

  auto basic_cost = [&](const std::string& name, int cin, int cout, std::int64_t px, Shape out) {
    b.row(name, std::move(out), std::int64_t(9) * cin * cout + cout + 2 * cout,
          conv_flops(cin, cout, 3, px) + 2 * cout * px);  // + gn + relu
  };
  auto sa_cost = [&](const std::string& name, int c, std::int64_t px, Shape out) {
    const int hid = std::max(1, c / cfg.reduction_ratio);
    const std::int64_t fc = 2 * std::int64_t(c) * hid * 2;
    b.row(name, std::move(out), std::int64_t(2) * c * hid, std::int64_t(c) * px + fc + hid + c + std::int64_t(c) * px);
  };

  const std::int64_t p0 = std::int64_t(h) * w;
  basic_cost("stem", cfg.in_bands, ws[0], p0, {ws[0], h, w});
  int cur_h = h, cur_w = w;
  for (int blk = 0; blk < 4; ++blk) {
    const int c = ws[blk];
    const std::int64_t px = std::int64_t(cur_h) * cur_w;
    const std::string prefix = "block" + std::to_string(blk + 1);
    sa_cost(prefix + ".sa", c, px, {c, cur_h, cur_w});
    basic_cost(prefix + ".basic", c, c, px, {c, cur_h, cur_w});
    if (blk < 3) {
      const auto [dh, dw] = ext[blk];
      const std::int64_t dpx = std::int64_t(dh) * dw;
      b.row(prefix + ".down", {ws[blk + 1], dh, dw}, std::int64_t(9) * c * ws[blk + 1] + ws[blk + 1],
            conv_flops(c, ws[blk + 1], 3, dpx) + ws[blk + 1] * dpx);  // + relu
      cur_h = dh;
      cur_w = dw;
    }
  }
  return ext;
}

}  // namespace detail

inline CostReport model_cost(const FreeNetConfig& cfg, int h, int w) {
  cfg.validate();
  if (h < 1 || w < 1) throw ShapeError("model_cost: non-positive spatial extent");
  if (h % FreeNetConfig::kStrideMultiple != 0 || w % FreeNetConfig::kStrideMultiple != 0)
    throw DimensionError("model_cost: spatial dims must be multiples of 8 (pad first)");
  detail::CostBuilder b;
  const auto ws = cfg.widths();
  const int wd = cfg.decoder_width();
  detail::encoder_cost(b, cfg, h, w);

  const int h1 = h / 2, w1 = w / 2, h2 = h / 4, w2 = w / 4, h3 = h / 8, w3 = w / 8;
  const std::int64_t p0 = std::int64_t(h) * w, p1 = std::int64_t(h1) * w1, p2 = std::int64_t(h2) * w2,
                     p3 = std::int64_t(h3) * w3;

  auto lateral = [&](const std::string& name, int cin, std::int64_t px, Shape out, bool fused) {
    // 1x1 conv, plus the elementwise fuse add for all but the deepest tap
    b.row(name, std::move(out), std::int64_t(cin) * wd + wd, detail::conv_flops(cin, wd, 1, px) + (fused ? wd * px : 0));
  };
  auto stage = [&](const std::string& name, std::int64_t px_in, std::int64_t px_out, Shape out) {
    // 3x3 conv -> relu at the incoming resolution, then 2x nearest upsample
    b.row(name, std::move(out), std::int64_t(9) * wd * wd + wd,
          detail::conv_flops(wd, wd, 3, px_in) + wd * px_in + wd * px_out);
  };

  lateral("lateral4_1", ws[3], p3, {wd, h3, w3}, false);
  lateral("lateral3_1", ws[3], p3, {wd, h3, w3}, true);
  stage("decoder1", p3, p2, {wd, h2, w2});
  lateral("lateral2_2", ws[2], p2, {wd, h2, w2}, true);
  stage("decoder2", p2, p1, {wd, h1, w1});
  lateral("lateral1_3", ws[1], p1, {wd, h1, w1}, true);
  stage("decoder3", p1, p0, {wd, h, w});
  b.row("head.conv3", {wd, h, w}, std::int64_t(9) * wd * wd + wd, detail::conv_flops(wd, wd, 3, p0) + wd * p0);
  b.row("head.conv1", {cfg.num_classes, h, w}, std::int64_t(wd) * cfg.num_classes + cfg.num_classes,
        detail::conv_flops(wd, cfg.num_classes, 1, p0));
  return b.report;
}

inline std::int64_t count_flops(const FreeNetConfig& cfg, int h, int w) { return model_cost(cfg, h, w).flops; }

// Cost of the patch-based alternative: the same encoder run on one
// patch x patch window per labeled pixel, with a 1x1 classifier conv on the
// final feature grid, times num_pixels windows.
inline std::int64_t count_flops_patch_based(const FreeNetConfig& cfg, int patch, std::int64_t num_pixels) {
  cfg.validate();
  if (patch % 2 == 0 || patch < 9)
    throw DomainError("count_flops_patch_based: patch must be odd and at least 9 (center-pixel labeling), got " +
                      std::to_string(patch));
  if (num_pixels < 1) throw DomainError("count_flops_patch_based: num_pixels must be positive");
  detail::CostBuilder b;
  const auto ext = detail::encoder_cost(b, cfg, patch, patch);
  const auto ws = cfg.widths();
  const std::int64_t p3 = std::int64_t(ext[3].first) * ext[3].second;
  b.row("classifier", {cfg.num_classes, ext[3].first, ext[3].second},
        std::int64_t(ws[3]) * cfg.num_classes + cfg.num_classes,
        detail::conv_flops(ws[3], cfg.num_classes, 1, p3));
  return b.report.flops * num_pixels;
}

}  // namespace freenet
