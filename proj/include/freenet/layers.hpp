#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "freenet/autodiff.hpp"
#include "freenet/rng.hpp"

namespace freenet {

// Named parameter with its optimizer policy: weight decay applies to conv and
// dense weights only, never to biases or normalization affines.
template <class S>
struct Param {
  std::string name;
  Tensor<S> tensor;
  bool weight_decay = false;
};

namespace init {

// Kaiming/He normal, fan-in mode: std = sqrt(2 / fan_in).
template <class S>
void kaiming_normal(Tensor<S>& t, std::int64_t fan_in, Rng& rng) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = S(rng.normal() * std_dev);
}

}  // namespace init

template <class S>
struct Conv2dLayer {
  Tensor<S> weight;  // [Cout,Cin,k,k]
  Tensor<S> bias;    // [Cout], undefined when bias-free
  int stride = 1;

  static Conv2dLayer create(int cin, int cout, int kernel, int stride, bool with_bias, Rng& rng) {
    if (kernel != 1 && kernel != 3)
      throw ConfigError("Conv2dLayer: kernel must be 1 or 3, got " + std::to_string(kernel));
    if (stride != 1 && stride != 2)
      throw ConfigError("Conv2dLayer: stride must be 1 or 2, got " + std::to_string(stride));
    if (cin < 1 || cout < 1) throw ConfigError("Conv2dLayer: channel counts must be positive");
    Conv2dLayer layer;
    layer.stride = stride;
    layer.weight = Tensor<S>::zeros({cout, cin, kernel, kernel}, /*requires_grad=*/true);
    init::kaiming_normal(layer.weight, std::int64_t(cin) * kernel * kernel, rng);
    if (with_bias) layer.bias = Tensor<S>::zeros({cout}, /*requires_grad=*/true);
    return layer;
  }

  Tensor<S> forward(Graph<S>& g, const Tensor<S>& x) const { return g.conv2d(x, weight, bias, stride); }

  int kernel() const { return weight.shape()[2]; }
  int in_channels() const { return weight.shape()[1]; }
  int out_channels() const { return weight.shape()[0]; }

  void collect(std::vector<Param<S>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, true});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, false});
  }
};

// Group count rule used across the net: gcd(32, C), which always divides C.
inline int group_count_for(int channels) {
  return static_cast<int>(std::gcd(32, channels));
}

template <class S>
struct GroupNormLayer {
  Tensor<S> gamma;
  Tensor<S> beta;
  int groups = 1;
  S eps = S(1e-5);

  static GroupNormLayer create(int channels) {
    GroupNormLayer layer;
    layer.groups = group_count_for(channels);
    layer.gamma = Tensor<S>::zeros({channels}, /*requires_grad=*/true);
    layer.beta = Tensor<S>::zeros({channels}, /*requires_grad=*/true);
    for (auto& v : layer.gamma.values()) v = S{1};
    return layer;
  }

  Tensor<S> forward(Graph<S>& g, const Tensor<S>& x) const {
    return g.group_norm(x, gamma, beta, groups, eps);
  }

  void collect(std::vector<Param<S>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma, false});
    out.push_back({prefix + ".beta", beta, false});
  }
};

template <class S>
struct DenseLayer {
  Tensor<S> weight;  // [out,in]
  Tensor<S> bias;    // undefined when bias-free

  static DenseLayer create(int in, int out, bool with_bias, Rng& rng) {
    if (in < 1 || out < 1) throw ConfigError("DenseLayer: sizes must be positive");
    DenseLayer layer;
    layer.weight = Tensor<S>::zeros({out, in}, /*requires_grad=*/true);
    init::kaiming_normal(layer.weight, in, rng);
    if (with_bias) layer.bias = Tensor<S>::zeros({out}, /*requires_grad=*/true);
    return layer;
  }

  Tensor<S> forward(Graph<S>& g, const Tensor<S>& x) const { return g.dense(x, weight, bias); }

  void collect(std::vector<Param<S>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, true});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, false});
  }
};

// Channel attention from per-channel spatial means:
//   s = spatial_mean(x)            [C]
//   t = sigmoid(W2 relu(W1 s))     [C], both dense layers bias-free
//   y = x * t (channel broadcast)
// Hidden width is max(1, floor(C / reduction_ratio)).
template <class S>
struct SpectralAttention {
  DenseLayer<S> fc1;
  DenseLayer<S> fc2;

  static SpectralAttention create(int channels, int reduction_ratio, Rng& rng) {
    if (reduction_ratio < 1) throw ConfigError("SpectralAttention: reduction ratio must be >= 1");
    const int hidden = std::max(1, channels / reduction_ratio);
    SpectralAttention sa;
    sa.fc1 = DenseLayer<S>::create(channels, hidden, /*with_bias=*/false, rng);
    sa.fc2 = DenseLayer<S>::create(hidden, channels, /*with_bias=*/false, rng);
    return sa;
  }

  Tensor<S> forward(Graph<S>& g, const Tensor<S>& x) const {
    const int c = x.shape()[0];
    Tensor<S> s = g.reduce_mean(x, {1, 2});
    Tensor<S> t = g.sigmoid(fc2.forward(g, g.relu(fc1.forward(g, s))));
    return g.mul(x, g.reshape(t, {c, 1, 1}));
  }

  // The gate vector alone, for tests and inspection.
  Tensor<S> gate(Graph<S>& g, const Tensor<S>& x) const {
    Tensor<S> s = g.reduce_mean(x, {1, 2});
    return g.sigmoid(fc2.forward(g, g.relu(fc1.forward(g, s))));
  }

  void collect(std::vector<Param<S>>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

}  // namespace freenet
