#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "freenet/freenet.hpp"
#include "freenet/gradcheck.hpp"
#include "test_util.hpp"

using freenet::ConfigError;
using freenet::Conv2dLayer;
using freenet::DimensionError;
using freenet::DomainError;
using freenet::FreeNetConfig;
using freenet::FreeNetModel;
using freenet::Graph;
using freenet::Rng;
using freenet::Shape;
using freenet::ShapeError;
using freenet::Tensor;
using freenet::TensorData;

namespace {

using T = Tensor<double>;
using G = Graph<double>;
using Model = FreeNetModel<double>;

FreeNetConfig make_config(int bands, int classes, double beta, int r = 16) {
  FreeNetConfig cfg;
  cfg.in_bands = bands;
  cfg.num_classes = classes;
  cfg.beta = beta;
  cfg.reduction_ratio = r;
  return cfg;
}

// Independent parameter ledger: walks the architecture by hand and adds up
// tensor sizes without touching the model classes.
std::int64_t ledger_params(int bands, int classes, double beta, int r) {
  auto scaled = [&](int base) { return static_cast<int>(std::lround(beta * base)); };
  const std::int64_t w[4] = {scaled(64), scaled(128), scaled(192), scaled(256)};
  const std::int64_t wd = scaled(128);
  auto basic = [](std::int64_t cin, std::int64_t cout) { return 9 * cin * cout + cout + 2 * cout; };
  auto attention = [&](std::int64_t c) { return 2 * c * std::max<std::int64_t>(1, c / r); };
  auto down = [](std::int64_t cin, std::int64_t cout) { return 9 * cin * cout + cout; };
  auto lateral = [&](std::int64_t cin) { return cin * wd + wd; };

  std::int64_t n = basic(bands, w[0]);
  for (int b = 0; b < 4; ++b) {
    n += attention(w[b]) + basic(w[b], w[b]);
    if (b < 3) n += down(w[b], w[b + 1]);
  }
  n += lateral(w[3]) + lateral(w[3]) + lateral(w[2]) + lateral(w[1]);
  n += 4 * (9 * wd * wd + wd);  // three decoder stages plus the 3x3 head
  n += wd * classes + classes;
  return n;
}

// ----- plain-loop reference network, built on the model's own weights ------

struct Ref {
  int c, h, w;
  std::vector<double> v;
};

Ref ref_conv(const Ref& x, const Conv2dLayer<double>& layer) {
  const int cout = layer.out_channels(), k = layer.kernel(), stride = layer.stride;
  std::vector<double> bias = layer.bias.defined() ? layer.bias.values() : std::vector<double>{};
  Ref out;
  out.c = cout;
  out.h = (x.h - 1) / stride + 1;
  out.w = (x.w - 1) / stride + 1;
  out.v = testutil::conv_reference(x.v, x.c, x.h, x.w, layer.weight.values(), cout, k, bias, stride);
  return out;
}

Ref ref_relu(Ref x) {
  for (auto& v : x.v) v = std::max(0.0, v);
  return x;
}

Ref ref_gn(const Ref& x, const freenet::GroupNormLayer<double>& layer) {
  const int per = x.c / layer.groups;
  const std::size_t hw = std::size_t(x.h) * x.w;
  Ref out = x;
  for (int grp = 0; grp < layer.groups; ++grp) {
    double mean = 0.0;
    for (int cc = grp * per; cc < (grp + 1) * per; ++cc)
      for (std::size_t i = 0; i < hw; ++i) mean += x.v[cc * hw + i];
    mean /= double(per * hw);
    double var = 0.0;
    for (int cc = grp * per; cc < (grp + 1) * per; ++cc)
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = x.v[cc * hw + i] - mean;
        var += d * d;
      }
    var /= double(per * hw);
    const double inv = 1.0 / std::sqrt(var + double(layer.eps));
    for (int cc = grp * per; cc < (grp + 1) * per; ++cc) {
      const double gamma = layer.gamma.values()[std::size_t(cc)];
      const double beta = layer.beta.values()[std::size_t(cc)];
      for (std::size_t i = 0; i < hw; ++i) out.v[cc * hw + i] = gamma * (x.v[cc * hw + i] - mean) * inv + beta;
    }
  }
  return out;
}

Ref ref_attention(const Ref& x, const freenet::SpectralAttention<double>& sa) {
  const int hidden = sa.fc1.weight.shape()[0];
  const std::size_t hw = std::size_t(x.h) * x.w;
  std::vector<double> s(std::size_t(x.c), 0.0);
  for (int cc = 0; cc < x.c; ++cc) {
    for (std::size_t i = 0; i < hw; ++i) s[std::size_t(cc)] += x.v[cc * hw + i];
    s[std::size_t(cc)] /= double(hw);
  }
  std::vector<double> hid(std::size_t(hidden), 0.0);
  for (int j = 0; j < hidden; ++j) {
    double a = 0.0;
    for (int cc = 0; cc < x.c; ++cc) a += sa.fc1.weight.values()[std::size_t(j) * x.c + cc] * s[std::size_t(cc)];
    hid[std::size_t(j)] = std::max(0.0, a);
  }
  Ref out = x;
  for (int cc = 0; cc < x.c; ++cc) {
    double a = 0.0;
    for (int j = 0; j < hidden; ++j) a += sa.fc2.weight.values()[std::size_t(cc) * hidden + j] * hid[std::size_t(j)];
    const double gate = 1.0 / (1.0 + std::exp(-a));
    for (std::size_t i = 0; i < hw; ++i) out.v[cc * hw + i] = x.v[cc * hw + i] * gate;
  }
  return out;
}

Ref ref_upsample(const Ref& x) {
  Ref out;
  out.c = x.c;
  out.h = 2 * x.h;
  out.w = 2 * x.w;
  out.v.resize(std::size_t(out.c) * out.h * out.w);
  for (int cc = 0; cc < x.c; ++cc)
    for (int i = 0; i < out.h; ++i)
      for (int j = 0; j < out.w; ++j)
        out.v[(std::size_t(cc) * out.h + i) * out.w + j] = x.v[(std::size_t(cc) * x.h + i / 2) * x.w + j / 2];
  return out;
}

Ref ref_add(Ref a, const Ref& b) {
  REQUIRE(a.v.size() == b.v.size());
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

Ref ref_basic(const Ref& x, const freenet::BasicModule<double>& m) {
  return ref_relu(ref_gn(ref_conv(x, m.conv), m.gn));
}

Ref ref_block(const Ref& x, const freenet::HybridBlock<double>& blk) {
  Ref t = ref_basic(ref_attention(x, blk.sa), blk.basic);
  if (blk.has_down) t = ref_relu(ref_conv(t, blk.down));
  return t;
}

Ref ref_forward(const Model& m, const Ref& x) {
  Ref s = ref_basic(x, m.stem);
  Ref p1 = ref_block(s, m.blocks[0]);
  Ref p2 = ref_block(p1, m.blocks[1]);
  Ref p3 = ref_block(p2, m.blocks[2]);
  Ref p4 = ref_block(p3, m.blocks[3]);

  Ref q = ref_conv(p4, m.lateral4_1);
  q = ref_add(q, ref_conv(p3, m.lateral3_1));
  q = ref_upsample(ref_relu(ref_conv(q, m.decoder[0])));
  q = ref_add(q, ref_conv(p2, m.lateral2_2));
  q = ref_upsample(ref_relu(ref_conv(q, m.decoder[1])));
  q = ref_add(q, ref_conv(p1, m.lateral1_3));
  q = ref_upsample(ref_relu(ref_conv(q, m.decoder[2])));
  q = ref_relu(ref_conv(q, m.head3));
  return ref_conv(q, m.head1);
}

}  // namespace

TEST_CASE("config widths scale with beta and reject degenerate settings") {
  CHECK(make_config(10, 5, 1.0).widths() == std::array<int, 4>{64, 128, 192, 256});
  CHECK(make_config(10, 5, 0.75).widths() == std::array<int, 4>{48, 96, 144, 192});
  CHECK(make_config(10, 5, 0.5).widths() == std::array<int, 4>{32, 64, 96, 128});
  CHECK(make_config(10, 5, 0.5).decoder_width() == 64);
  CHECK_THROWS_AS(make_config(10, 5, 0.001).validate(), ConfigError);
  CHECK_THROWS_AS(make_config(0, 5, 1.0).validate(), ConfigError);
  CHECK_THROWS_AS(make_config(10, 1, 1.0).validate(), ConfigError);
  CHECK_THROWS_AS(make_config(10, 5, -1.0).validate(), ConfigError);
  FreeNetConfig bad_ratio = make_config(10, 5, 1.0);
  bad_ratio.reduction_ratio = 0;
  CHECK_THROWS_AS(bad_ratio.validate(), ConfigError);
}

TEST_CASE("parameter count matches an independent ledger at reference sizes") {
  for (double beta : {1.0, 0.75, 0.5, 0.25, 0.125}) {
    CAPTURE(beta);
    auto cfg = make_config(144, 15, beta);
    auto m = Model::build(cfg, 1);
    CHECK(m.count_params() == ledger_params(144, 15, beta, 16));
    CHECK(freenet::model_cost(cfg, 64, 64).params == m.count_params());
  }
  // Frozen totals for the 144-band, 15-class reference scene; the β=1.0 and
  // β=0.5 models land within 8% and 10% of the published 2.749M and 0.724M.
  CHECK(Model::build(make_config(144, 15, 1.0), 1).count_params() == 2'643'471);
  CHECK(Model::build(make_config(144, 15, 0.75), 1).count_params() == 1'503'567);
  CHECK(Model::build(make_config(144, 15, 0.5), 1).count_params() == 683'023);
  CHECK(std::fabs(2'643'471.0 / 2'749'000.0 - 1.0) < 0.08);
  CHECK(std::fabs(683'023.0 / 724'000.0 - 1.0) < 0.10);
  auto odd = make_config(7, 3, 0.3, 5);
  CHECK(Model::build(odd, 2).count_params() == ledger_params(7, 3, 0.3, 5));
}

TEST_CASE("parameter list is named and ordered for checkpoints") {
  auto m = Model::build(make_config(4, 3, 0.125, 4), 9);
  const auto& params = m.parameters();
  REQUIRE(params.size() == 52);
  CHECK(params[0].name == "stem.conv.weight");
  CHECK(params[4].name == "block1.sa.fc1.weight");
  auto has = [&](const std::string& name) {
    for (const auto& p : params)
      if (p.name == name) return true;
    return false;
  };
  CHECK(has("block3.down.bias"));
  CHECK(has("block4.basic.gn.beta"));
  CHECK(has("lateral1_3.weight"));
  CHECK(has("decoder2.weight"));
  CHECK(has("head.conv1.bias"));
  CHECK_FALSE(has("block4.down.weight"));
  for (const auto& p : params) CHECK(p.tensor.all_finite());
}

TEST_CASE("build is deterministic in the seed") {
  auto cfg = make_config(5, 4, 0.25, 4);
  auto a = Model::build(cfg, 42);
  auto b = Model::build(cfg, 42);
  auto c = Model::build(cfg, 43);
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (a.parameters()[i].tensor.values() != b.parameters()[i].tensor.values()) all_equal = false;
    if (a.parameters()[i].tensor.values() != c.parameters()[i].tensor.values()) any_diff = true;
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("forward emits one logit map per class on the input grid") {
  auto m = Model::build(make_config(5, 7, 0.25, 4), 3);
  Rng rng(17);
  G g(/*record=*/false);
  auto x = testutil::random_tensor<double>({5, 16, 24}, rng, false);
  auto y = m.forward(g, x);
  CHECK(y.shape() == Shape{7, 16, 24});
  CHECK(y.all_finite());
  auto tiny = m.forward(g, testutil::random_tensor<double>({5, 8, 8}, rng, false));
  CHECK(tiny.shape() == Shape{7, 8, 8});
}

TEST_CASE("forward rejects off-grid and mis-banded inputs") {
  auto m = Model::build(make_config(5, 3, 0.25, 4), 3);
  Rng rng(19);
  G g(/*record=*/false);
  auto msg = testutil::thrown_message<DimensionError>(
      [&] { m.forward(g, testutil::random_tensor<double>({5, 12, 16}, rng, false)); });
  CHECK(msg.find("predict_padded") != std::string::npos);
  CHECK_THROWS_AS(m.forward(g, testutil::random_tensor<double>({4, 16, 16}, rng, false)), ShapeError);
  CHECK_THROWS_AS(m.forward(g, testutil::random_tensor<double>({5, 16}, rng, false)), ShapeError);
}

TEST_CASE("forward matches a plain-loop reference network") {
  auto m = Model::build(make_config(8, 5, 0.25, 4), 11);
  Rng rng(23);
  auto x = testutil::random_tensor<double>({8, 16, 16}, rng, false);
  G g(/*record=*/false);
  auto y = m.forward(g, x);

  Ref rx{8, 16, 16, x.values()};
  Ref want = ref_forward(m, rx);
  CHECK(want.c == 5);
  CHECK(want.h == 16);
  CHECK(want.w == 16);
  testutil::check_close(y.values(), want.v, 1e-9);
}

TEST_CASE("padding helpers add zeros bottom-right and crop reverses them") {
  TensorData<double> x({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto p = freenet::pad_spatial_to_multiple(x, 4);
  CHECK(p.shape == Shape{1, 4, 4});
  CHECK(p.v == std::vector<double>{1, 2, 3, 0, 4, 5, 6, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  auto back = freenet::crop_spatial(p, 2, 3);
  CHECK(back.shape == x.shape);
  CHECK(back.v == x.v);
  auto same = freenet::pad_spatial_to_multiple(x, 1);
  CHECK(same.shape == x.shape);
  CHECK(same.v == x.v);
}

TEST_CASE("predict_padded handles arbitrary extents and matches forward on aligned ones") {
  auto m = Model::build(make_config(3, 4, 0.25, 4), 5);
  Rng rng(29);

  TensorData<double> x({3, 13, 21}, testutil::random_values<double>(3 * 13 * 21, rng));
  auto y = m.predict_padded(x);
  CHECK(y.shape == Shape{4, 13, 21});

  auto padded = freenet::pad_spatial_to_multiple(x, 8);
  G g(/*record=*/false);
  auto full = m.forward(g, T::from_data(padded));
  auto cropped = freenet::crop_spatial(full.data(), 13, 21);
  CHECK(y.v == cropped.v);

  TensorData<double> aligned({3, 16, 8}, testutil::random_values<double>(3 * 16 * 8, rng));
  auto direct = m.forward(g, T::from_data(aligned));
  CHECK(m.predict_padded(aligned).v == direct.values());
}

TEST_CASE("zeroed lateral taps reduce the decoder to the deepest path") {
  auto m = Model::build(make_config(4, 3, 0.25, 4), 7);
  for (auto* lat : {&m.lateral3_1, &m.lateral2_2, &m.lateral1_3}) {
    for (auto& v : lat->weight.values()) v = 0.0;
    for (auto& v : lat->bias.values()) v = 0.0;
  }
  Rng rng(31);
  auto x = testutil::random_tensor<double>({4, 16, 16}, rng, false);
  G g(/*record=*/false);
  auto y = m.forward(g, x);

  auto s = m.stem.forward(g, x);
  auto p1 = m.blocks[0].forward(g, s);
  auto p2 = m.blocks[1].forward(g, p1);
  auto p3 = m.blocks[2].forward(g, p2);
  auto p4 = m.blocks[3].forward(g, p3);
  auto q = m.lateral4_1.forward(g, p4);
  q = g.upsample2x(g.relu(m.decoder[0].forward(g, q)));
  q = g.upsample2x(g.relu(m.decoder[1].forward(g, q)));
  q = g.upsample2x(g.relu(m.decoder[2].forward(g, q)));
  q = m.head1.forward(g, g.relu(m.head3.forward(g, q)));
  CHECK(y.values() == q.values());
}

TEST_CASE("end-to-end gradients match finite differences on sampled parameters") {
  auto m = Model::build(make_config(3, 4, 0.125, 4), 13);
  Rng rng(37);
  auto x = testutil::random_tensor<double>({3, 8, 8}, rng, /*requires_grad=*/true);
  auto build = [&m](G& g, std::vector<T>& leaves) {
    auto y = m.forward(g, leaves[0]);
    return g.reduce_mean(g.mul(y, y), {0, 1, 2});
  };
  std::vector<T> leaves = {x,
                           m.blocks[0].sa.fc1.weight,
                           m.blocks[2].down.bias,
                           m.stem.gn.gamma,
                           m.lateral3_1.bias,
                           m.head1.bias};
  CHECK(freenet::finite_difference_check<double>(build, leaves) < 1e-3);
}

TEST_CASE("flop model freezes the convolution convention") {
  CHECK(freenet::detail::conv_flops(2, 4, 3, 64) == 9'216);
  CHECK(freenet::detail::conv_flops(4, 4, 1, 4) == 128);
}

TEST_CASE("flop count grows linearly with pixel count") {
  auto cfg = make_config(103, 9, 1.0);
  const auto base = double(freenet::count_flops(cfg, 352, 352));
  CHECK(double(freenet::count_flops(cfg, 704, 704)) == doctest::Approx(4.0 * base).epsilon(1e-6));
  CHECK(double(freenet::count_flops(cfg, 352, 704)) == doctest::Approx(2.0 * base).epsilon(1e-6));
  CHECK_THROWS_AS(freenet::count_flops(cfg, 350, 352), DimensionError);
}

TEST_CASE("patch-based inference cost dwarfs the full-image cost") {
  auto cfg = make_config(144, 15, 1.0);
  const std::int64_t full = freenet::count_flops(cfg, 352, 1912);
  const std::int64_t pixels = std::int64_t(352) * 1912;
  const std::int64_t patched = freenet::count_flops_patch_based(cfg, 27, pixels);
  CHECK(patched == pixels * freenet::count_flops_patch_based(cfg, 27, 1));
  const double ratio = double(patched) / double(full);
  CHECK(ratio > 460.0 * 0.85);
  CHECK(ratio < 460.0 * 1.15);
  CHECK(ratio == doctest::Approx(405.41).epsilon(0.01));
  CHECK_THROWS_AS(freenet::count_flops_patch_based(cfg, 7, 10), DomainError);
  CHECK_THROWS_AS(freenet::count_flops_patch_based(cfg, 26, 10), DomainError);
  CHECK_THROWS_AS(freenet::count_flops_patch_based(cfg, 27, 0), DomainError);
}

TEST_CASE("cost report rows are consistent with the built model") {
  auto cfg = make_config(8, 5, 0.25, 4);
  auto report = freenet::model_cost(cfg, 32, 24);
  auto m = Model::build(cfg, 1);
  CHECK(report.params == m.count_params());
  std::int64_t row_params = 0, row_flops = 0;
  for (const auto& row : report.rows) {
    row_params += row.params;
    row_flops += row.flops;
    CHECK(row.flops > 0);
  }
  CHECK(row_params == report.params);
  CHECK(row_flops == report.flops);

  REQUIRE(!report.rows.empty());
  CHECK(report.rows.front().name == "stem");
  CHECK(report.rows.front().out == Shape{16, 32, 24});
  CHECK(report.rows.front().params == 9 * 8 * 16 + 16 + 2 * 16);
  CHECK(report.rows.back().name == "head.conv1");
  CHECK(report.rows.back().out == Shape{5, 32, 24});
}
