#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <utility>
#include <vector>

#include "freenet/common.hpp"
#include "freenet/tensor.hpp"

namespace freenet {

template <class S>
class Graph;

namespace detail {

template <class S>
struct Node {
  TensorData<S> value;
  std::vector<S> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  void* graph = nullptr;  // owning graph for op nodes, null for leaves
  std::function<void()> backward;
  std::vector<std::shared_ptr<Node>> parents;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.v.size(), S{0});
  }
  bool grad_ready() const { return !grad.empty(); }
};

inline int floor_div(int a, int b) {
  const int q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
inline int ceil_div(int a, int b) { return -floor_div(-a, b); }

}  // namespace detail

// Handle to a value in (or feeding) a computation graph.  Leaves own
// parameters and inputs; op results are created through Graph methods.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(TensorData<S>(std::move(shape)), requires_grad);
  }
  static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
    return from_data(TensorData<S>(std::move(shape), std::move(values)), requires_grad);
  }
  static Tensor from_data(TensorData<S> data, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node<S>>();
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().value.shape; }
  std::int64_t numel() const { return node().value.numel(); }
  bool requires_grad() const { return node().requires_grad; }

  TensorData<S>& data() { return node().value; }
  const TensorData<S>& data() const { return node().value; }
  std::vector<S>& values() { return node().value.v; }
  const std::vector<S>& values() const { return node().value.v; }

  bool has_grad() const { return defined() && node().grad_ready(); }
  std::vector<S>& grad() {
    if (!node().grad_ready()) throw UsageError("Tensor: gradient not populated");
    return node().grad;
  }
  const std::vector<S>& grad() const {
    if (!node().grad_ready()) throw UsageError("Tensor: gradient not populated");
    return node().grad;
  }
  void zero_grad() {
    if (defined() && node().grad_ready()) std::fill(node().grad.begin(), node().grad.end(), S{0});
  }

  S item() const {
    if (numel() != 1) throw UsageError("Tensor::item: tensor is not scalar, shape " + shape_str(shape()));
    return node().value.v[0];
  }
  bool all_finite() const { return node().value.all_finite(); }

 private:
  detail::Node<S>& node() {
    if (!node_) throw UsageError("Tensor: undefined handle");
    return *node_;
  }
  const detail::Node<S>& node() const {
    if (!node_) throw UsageError("Tensor: undefined handle");
    return *node_;
  }

  std::shared_ptr<detail::Node<S>> node_;
  friend class Graph<S>;
};

struct Position {
  int r = 0;
  int c = 0;
};

// Dynamic tape.  Ops append in execution order; backward replays the tape in
// exact reverse order, accumulating into .grad additively, so a tensor used
// twice receives both contributions.
template <class S>
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}

  void clear() {
    tape_.clear();
    backward_done_ = false;
  }
  std::size_t size() const { return tape_.size(); }

  // ----- elementwise ----------------------------------------------------

  Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) { return binary(a, b, /*is_mul=*/false); }
  Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) { return binary(a, b, /*is_mul=*/true); }

  Tensor<S> relu(const Tensor<S>& x) {
    auto node = new_node(TensorData<S>(x.shape()), {x});
    const auto& xv = x.values();
    auto& yv = node->value.v;
    for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > S{0} ? xv[i] : S{0};
    if (node->requires_grad) {
      auto* self = node.get();
      auto* xp = x.node_.get();
      node->backward = [self, xp] {
        xp->ensure_grad();
        const auto& xv = xp->value.v;
        for (std::size_t i = 0; i < xv.size(); ++i)
          if (xv[i] > S{0}) xp->grad[i] += self->grad[i];
      };
    }
    return wrap(node);
  }

  Tensor<S> sigmoid(const Tensor<S>& x) {
    auto node = new_node(TensorData<S>(x.shape()), {x});
    const auto& xv = x.values();
    auto& yv = node->value.v;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const S v = xv[i];
      // Evaluate from the non-overflowing side.
      if (v >= S{0}) {
        const S e = std::exp(-v);
        yv[i] = S{1} / (S{1} + e);
      } else {
        const S e = std::exp(v);
        yv[i] = e / (S{1} + e);
      }
    }
    if (node->requires_grad) {
      auto* self = node.get();
      auto* xp = x.node_.get();
      node->backward = [self, xp] {
        xp->ensure_grad();
        const auto& yv = self->value.v;
        for (std::size_t i = 0; i < yv.size(); ++i)
          xp->grad[i] += self->grad[i] * yv[i] * (S{1} - yv[i]);
      };
    }
    return wrap(node);
  }

  // ----- reductions / reshape -------------------------------------------

  Tensor<S> reduce_mean(const Tensor<S>& x, const std::vector<int>& axes) {
    return reduce(x, axes, /*mean=*/true);
  }
  Tensor<S> reduce_sum(const Tensor<S>& x, const std::vector<int>& axes) {
    return reduce(x, axes, /*mean=*/false);
  }

  Tensor<S> reshape(const Tensor<S>& x, Shape target) {
    check_shape(target, "reshape");
    if (freenet::numel(target) != x.numel())
      throw ShapeError("reshape: " + shape_str(x.shape()) + " has " + std::to_string(x.numel()) +
                       " elements, target " + shape_str(target) + " wants " +
                       std::to_string(freenet::numel(target)));
    auto node = new_node(TensorData<S>(std::move(target), x.values()), {x});
    if (node->requires_grad) {
      auto* self = node.get();
      auto* xp = x.node_.get();
      node->backward = [self, xp] {
        xp->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) xp->grad[i] += self->grad[i];
      };
    }
    return wrap(node);
  }

  // ----- neural-net ops ---------------------------------------------------

  // 2-D convolution over [Cin,H,W] with weight [Cout,Cin,k,k], odd k, implicit
  // zero padding (k-1)/2, stride 1 or 2.  bias may be an undefined handle.
  Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride) {
    if (x.shape().size() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
    if (w.shape().size() != 4 || w.shape()[2] != w.shape()[3])
      throw ShapeError("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(w.shape()));
    const int cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    const int cout = w.shape()[0], k = w.shape()[2];
    if (w.shape()[1] != cin)
      throw ShapeError("conv2d: weight expects " + std::to_string(w.shape()[1]) + " input channels, input has " +
                       std::to_string(cin));
    if (k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (stride != 1 && stride != 2) throw ConfigError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
    if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != cout))
      throw ShapeError("conv2d: bias must be [Cout]");
    const int p = (k - 1) / 2;
    const int oh = (h + 2 * p - k) / stride + 1;
    const int ow = (wd + 2 * p - k) / stride + 1;
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: output would be empty for input " + shape_str(x.shape()));

    std::vector<Tensor<S>> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    auto node = new_node(TensorData<S>({cout, oh, ow}), parents);
    conv2d_forward(x.data(), w.data(), bias.defined() ? &bias.data() : nullptr, node->value, stride);
    if (node->requires_grad) {
      auto* self = node.get();
      auto* xp = x.node_.get();
      auto* wp = w.node_.get();
      auto* bp = bias.defined() ? bias.node_.get() : nullptr;
      node->backward = [self, xp, wp, bp, stride] {
        conv2d_backward(*self, *xp, *wp, bp, stride);
      };
    }
    return wrap(node);
  }

  // Group normalization over [C,H,W]: statistics per group of channels across
  // all spatial positions; gamma/beta are per-channel affine parameters.
  Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, int groups,
                       S eps = S(1e-5)) {
    if (x.shape().size() != 3) throw ShapeError("group_norm: input must be [C,H,W]");
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (groups < 1 || c % groups != 0)
      throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(c) +
                       " channels");
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
      throw ShapeError("group_norm: gamma/beta must be [C]");

    auto node = new_node(TensorData<S>(x.shape()), {x, gamma, beta});
    const std::int64_t hw = std::int64_t(h) * w;
    const int per = c / groups;
    const std::int64_t gn = per * hw;
    auto xhat = std::make_shared<std::vector<S>>(x.values().size());
    auto inv_std = std::make_shared<std::vector<S>>(groups);
    const S* xv = x.values().data();
    S* yv = node->value.v.data();
    const S* gv = gamma.values().data();
    const S* bv = beta.values().data();
    for (int g = 0; g < groups; ++g) {
      const S* gx = xv + std::int64_t(g) * gn;
      S* gxh = xhat->data() + std::int64_t(g) * gn;
      double sum = 0;
      for (std::int64_t i = 0; i < gn; ++i) sum += gx[i];
      const double mean = sum / double(gn);
      double var = 0;
      for (std::int64_t i = 0; i < gn; ++i) {
        const double d = gx[i] - mean;
        var += d * d;
      }
      var /= double(gn);
      const S inv = S(1.0 / std::sqrt(var + double(eps)));
      (*inv_std)[g] = inv;
      for (int cc = 0; cc < per; ++cc) {
        const int ch = g * per + cc;
        const S ga = gv[ch], be = bv[ch];
        const S* xr = gx + std::int64_t(cc) * hw;
        S* xhr = gxh + std::int64_t(cc) * hw;
        S* yr = yv + std::int64_t(ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const S xh = (xr[i] - S(mean)) * inv;
          xhr[i] = xh;
          yr[i] = ga * xh + be;
        }
      }
    }
    if (node->requires_grad) {
      auto* self = node.get();
      auto* xp = x.node_.get();
      auto* gp = gamma.node_.get();
      auto* bp = beta.node_.get();
      node->backward = [self, xp, gp, bp, xhat, inv_std, groups, per, hw, gn] {
        const bool need_x = xp->requires_grad;
        if (need_x) xp->ensure_grad();
        if (gp->requires_grad) gp->ensure_grad();
        if (bp->requires_grad) bp->ensure_grad();
        const S* dy = self->grad.data();
        const S* gv = gp->value.v.data();
        const S* xh = xhat->data();
        for (int g = 0; g < groups; ++g) {
          const std::int64_t base = std::int64_t(g) * gn;
          // dxhat = dy * gamma; two group-wide sums drive the input gradient
          double s1 = 0, s2 = 0;
          if (need_x) {
            for (int cc = 0; cc < per; ++cc) {
              const int ch = g * per + cc;
              const S ga = gv[ch];
              const S* dyr = dy + std::int64_t(ch) * hw;
              const S* xhr = xh + base + std::int64_t(cc) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                const S dxh = dyr[i] * ga;
                s1 += dxh;
                s2 += dxh * xhr[i];
              }
            }
          }
          const S inv = (*inv_std)[g];
          const S m1 = S(s1 / double(gn));
          const S m2 = S(s2 / double(gn));
          for (int cc = 0; cc < per; ++cc) {
            const int ch = g * per + cc;
            const S ga = gv[ch];
            const S* dyr = dy + std::int64_t(ch) * hw;
            const S* xhr = xh + base + std::int64_t(cc) * hw;
            if (need_x) {
              S* dxr = xp->grad.data() + std::int64_t(ch) * hw;
              for (std::int64_t i = 0; i < hw; ++i)
                dxr[i] += inv * (dyr[i] * ga - m1 - xhr[i] * m2);
            }
            if (gp->requires_grad) {
              double dg = 0;
              for (std::int64_t i = 0; i < hw; ++i) dg += dyr[i] * xhr[i];
              gp->grad[ch] += S(dg);
            }
            if (bp->requires_grad) {
              double db = 0;
              for (std::int64_t i = 0; i < hw; ++i) db += dyr[i];
              bp->grad[ch] += S(db);
            }
          }
        }
      };
    }
    return wrap(node);
  }

  // Fully connected layer on a rank-1 vector: y = W x (+ b).
  Tensor<S> dense(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
    if (x.shape().size() != 1) throw ShapeError("dense: input must be rank-1, got " + shape_str(x.shape()));
    if (w.shape().size() != 2 || w.shape()[1] != x.shape()[0])
      throw ShapeError("dense: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    const int out = w.shape()[0], in = w.shape()[1];
    if (bias.defined() && bias.shape() != Shape{out}) throw ShapeError("dense: bias must be [out]");

    std::vector<Tensor<S>> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    auto node = new_node(TensorData<S>({out}), parents);
    const S* xv = x.values().data();
    const S* wv = w.values().data();
    S* yv = node->value.v.data();
    for (int o = 0; o < out; ++o) {
      S acc = bias.defined() ? bias.values()[o] : S{0};
      const S* row = wv + std::int64_t(o) * in;
      for (int i = 0; i < in; ++i) acc += row[i] * xv[i];
      yv[o] = acc;
    }
    if (node->requires_grad) {
      auto* self = node.get();
      auto* xp = x.node_.get();
      auto* wp = w.node_.get();
      auto* bp = bias.defined() ? bias.node_.get() : nullptr;
      node->backward = [self, xp, wp, bp, out, in] {
        const S* dy = self->grad.data();
        if (xp->requires_grad) {
          xp->ensure_grad();
          const S* wv = wp->value.v.data();
          for (int o = 0; o < out; ++o) {
            const S g = dy[o];
            const S* row = wv + std::int64_t(o) * in;
            for (int i = 0; i < in; ++i) xp->grad[i] += g * row[i];
          }
        }
        if (wp->requires_grad) {
          wp->ensure_grad();
          const S* xv = xp->value.v.data();
          for (int o = 0; o < out; ++o) {
            const S g = dy[o];
            S* row = wp->grad.data() + std::int64_t(o) * in;
            for (int i = 0; i < in; ++i) row[i] += g * xv[i];
          }
        }
        if (bp && bp->requires_grad) {
          bp->ensure_grad();
          for (int o = 0; o < out; ++o) bp->grad[o] += dy[o];
        }
      };
    }
    return wrap(node);
  }

  // Nearest-neighbour 2x spatial upsampling of [C,H,W].
  Tensor<S> upsample2x(const Tensor<S>& x) {
    if (x.shape().size() != 3) throw ShapeError("upsample2x: input must be [C,H,W]");
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    auto node = new_node(TensorData<S>({c, 2 * h, 2 * w}), {x});
    const S* xv = x.values().data();
    S* yv = node->value.v.data();
    for (int ci = 0; ci < c; ++ci)
      for (int r = 0; r < 2 * h; ++r) {
        const S* xr = xv + (std::int64_t(ci) * h + r / 2) * w;
        S* yr = yv + (std::int64_t(ci) * 2 * h + r) * (2 * w);
        for (int col = 0; col < 2 * w; ++col) yr[col] = xr[col / 2];
      }
    if (node->requires_grad) {
      auto* self = node.get();
      auto* xp = x.node_.get();
      node->backward = [self, xp, c, h, w] {
        xp->ensure_grad();
        const S* dy = self->grad.data();
        for (int ci = 0; ci < c; ++ci)
          for (int r = 0; r < 2 * h; ++r) {
            S* dxr = xp->grad.data() + (std::int64_t(ci) * h + r / 2) * w;
            const S* dyr = dy + (std::int64_t(ci) * 2 * h + r) * (2 * w);
            for (int col = 0; col < 2 * w; ++col) dxr[col / 2] += dyr[col];
          }
      };
    }
    return wrap(node);
  }

  // Cross-entropy of softmax(logits) averaged over the sampled positions
  // only; logits is [N,H,W], labels a row-major raster of 1-based class ids
  // (0 = unlabeled) of size lh x lw.  Returns a scalar.
  Tensor<S> masked_cross_entropy(const Tensor<S>& logits, std::shared_ptr<const std::vector<std::uint16_t>> labels,
                                 int lh, int lw, const std::vector<Position>& positions) {
    if (logits.shape().size() != 3) throw ShapeError("masked_cross_entropy: logits must be [N,H,W]");
    if (!labels || static_cast<std::int64_t>(labels->size()) != std::int64_t(lh) * lw)
      throw ShapeError("masked_cross_entropy: label raster size does not match " + std::to_string(lh) + "x" +
                       std::to_string(lw));
    if (positions.empty()) throw DomainError("masked_cross_entropy: no positions to average over");
    const int n_cls = logits.shape()[0], h = logits.shape()[1], w = logits.shape()[2];
    if (lh > h || lw > w)
      throw ShapeError("masked_cross_entropy: label raster larger than logit raster");
    const std::int64_t n = static_cast<std::int64_t>(positions.size());

    auto probs = std::make_shared<std::vector<S>>(n * n_cls);
    auto targets = std::make_shared<std::vector<int>>(n);
    auto pos_copy = std::make_shared<std::vector<Position>>(positions);
    const S* lv = logits.values().data();
    const std::int64_t hw = std::int64_t(h) * w;
    double total = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto [r, c] = positions[i];
      if (r < 0 || c < 0 || r >= lh || c >= lw)
        throw ContractError("masked_cross_entropy: position (" + std::to_string(r) + "," + std::to_string(c) +
                            ") outside " + std::to_string(lh) + "x" + std::to_string(lw) + " raster");
      const int label = (*labels)[std::int64_t(r) * lw + c];
      if (label < 1 || label > n_cls)
        throw ContractError("masked_cross_entropy: label " + std::to_string(label) + " at (" + std::to_string(r) +
                            "," + std::to_string(c) + ") outside 1.." + std::to_string(n_cls));
      (*targets)[i] = label - 1;
      const std::int64_t off = std::int64_t(r) * w + c;
      S mx = lv[off];
      for (int k = 1; k < n_cls; ++k) mx = std::max(mx, lv[k * hw + off]);
      double denom = 0;
      for (int k = 0; k < n_cls; ++k) denom += std::exp(double(lv[k * hw + off] - mx));
      const double lse = double(mx) + std::log(denom);
      for (int k = 0; k < n_cls; ++k)
        (*probs)[i * n_cls + k] = S(std::exp(double(lv[k * hw + off] - mx)) / denom);
      total += lse - double(lv[(label - 1) * hw + off]);
    }
    auto node = new_node(TensorData<S>(Shape{}, {S(total / double(n))}), {logits});
    if (node->requires_grad) {
      auto* self = node.get();
      auto* lp = logits.node_.get();
      node->backward = [self, lp, probs, targets, pos_copy, n_cls, w, hw, n] {
        lp->ensure_grad();
        const S g = self->grad[0] / S(n);
        for (std::int64_t i = 0; i < n; ++i) {
          const auto [r, c] = (*pos_copy)[i];
          const std::int64_t off = std::int64_t(r) * w + c;
          for (int k = 0; k < n_cls; ++k) {
            S d = (*probs)[i * n_cls + k];
            if (k == (*targets)[i]) d -= S{1};
            lp->grad[k * hw + off] += g * d;
          }
        }
      };
    }
    return wrap(node);
  }

  // ----- backward ---------------------------------------------------------

  void backward(const Tensor<S>& loss) {
    if (!record_) throw UsageError("Graph::backward: graph not recording");
    if (backward_done_) throw UsageError("Graph::backward: called twice without clear()");
    if (!loss.defined() || loss.node_->graph != this)
      throw UsageError("Graph::backward: loss was not produced by this graph");
    if (loss.numel() != 1)
      throw UsageError("Graph::backward: loss must be scalar, shape " + shape_str(loss.shape()));
    backward_done_ = true;
    loss.node_->ensure_grad();
    loss.node_->grad[0] = S{1};
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      auto& n = **it;
      if (n.backward && n.grad_ready()) n.backward();
    }
  }

 private:
  std::shared_ptr<detail::Node<S>> new_node(TensorData<S> value, const std::vector<Tensor<S>>& parents) {
    auto node = std::make_shared<detail::Node<S>>();
    node->value = std::move(value);
    node->graph = this;
    bool needs = false;
    for (const auto& p : parents) {
      if (!p.defined()) throw UsageError("Graph: undefined tensor passed to op");
      if (p.node_->graph != nullptr && p.node_->graph != this)
        throw UsageError("Graph: input tensor belongs to a different graph");
      node->parents.push_back(p.node_);
      needs = needs || p.node_->requires_grad;
    }
    node->requires_grad = record_ && needs;
    tape_.push_back(node);
    return node;
  }

  std::shared_ptr<detail::Node<S>> new_node(TensorData<S> value, std::initializer_list<Tensor<S>> parents) {
    return new_node(std::move(value), std::vector<Tensor<S>>(parents));
  }

  static Tensor<S> wrap(std::shared_ptr<detail::Node<S>> node) {
    Tensor<S> t;
    t.node_ = std::move(node);
    return t;
  }

  // add/mul with equal shapes or channel-vector broadcasting:
  // [C,H,W] op [C,1,1] applies the vector once per channel plane.
  Tensor<S> binary(const Tensor<S>& a, const Tensor<S>& b, bool is_mul) {
    const char* name = is_mul ? "mul" : "add";
    const bool same = a.shape() == b.shape();
    bool a_full = false;
    if (!same) {
      auto is_cvec = [](const Shape& s) { return s.size() == 3 && s[1] == 1 && s[2] == 1; };
      auto is_chw = [](const Shape& s) { return s.size() == 3; };
      if (is_chw(a.shape()) && is_cvec(b.shape()) && a.shape()[0] == b.shape()[0]) {
        a_full = true;
      } else if (is_chw(b.shape()) && is_cvec(a.shape()) && a.shape()[0] == b.shape()[0]) {
        a_full = false;
      } else {
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
      }
    }
    if (same) {
      auto node = new_node(TensorData<S>(a.shape()), {a, b});
      const auto& av = a.values();
      const auto& bv = b.values();
      auto& yv = node->value.v;
      if (is_mul)
        for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] * bv[i];
      else
        for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + bv[i];
      if (node->requires_grad) {
        auto* self = node.get();
        auto* ap = a.node_.get();
        auto* bp = b.node_.get();
        node->backward = [self, ap, bp, is_mul] {
          const auto& dy = self->grad;
          if (ap->requires_grad) {
            ap->ensure_grad();
            if (is_mul)
              for (std::size_t i = 0; i < dy.size(); ++i) ap->grad[i] += dy[i] * bp->value.v[i];
            else
              for (std::size_t i = 0; i < dy.size(); ++i) ap->grad[i] += dy[i];
          }
          if (bp->requires_grad) {
            bp->ensure_grad();
            if (is_mul)
              for (std::size_t i = 0; i < dy.size(); ++i) bp->grad[i] += dy[i] * ap->value.v[i];
            else
              for (std::size_t i = 0; i < dy.size(); ++i) bp->grad[i] += dy[i];
          }
        };
      }
      return wrap(node);
    }
    // broadcast: full is [C,H,W], vec is [C,1,1]
    const Tensor<S>& full = a_full ? a : b;
    const Tensor<S>& vec = a_full ? b : a;
    const int c = full.shape()[0];
    const std::int64_t hw = std::int64_t(full.shape()[1]) * full.shape()[2];
    auto node = new_node(TensorData<S>(full.shape()), {full, vec});
    const S* fv = full.values().data();
    const S* vv = vec.values().data();
    S* yv = node->value.v.data();
    for (int ci = 0; ci < c; ++ci) {
      const S t = vv[ci];
      const S* fr = fv + ci * hw;
      S* yr = yv + ci * hw;
      if (is_mul)
        for (std::int64_t i = 0; i < hw; ++i) yr[i] = fr[i] * t;
      else
        for (std::int64_t i = 0; i < hw; ++i) yr[i] = fr[i] + t;
    }
    if (node->requires_grad) {
      auto* self = node.get();
      auto* fp = full.node_.get();
      auto* vp = vec.node_.get();
      node->backward = [self, fp, vp, c, hw, is_mul] {
        const S* dy = self->grad.data();
        if (fp->requires_grad) {
          fp->ensure_grad();
          for (int ci = 0; ci < c; ++ci) {
            const S t = vp->value.v[ci];
            const S* dyr = dy + ci * hw;
            S* dfr = fp->grad.data() + ci * hw;
            if (is_mul)
              for (std::int64_t i = 0; i < hw; ++i) dfr[i] += dyr[i] * t;
            else
              for (std::int64_t i = 0; i < hw; ++i) dfr[i] += dyr[i];
          }
        }
        if (vp->requires_grad) {
          vp->ensure_grad();
          for (int ci = 0; ci < c; ++ci) {
            const S* dyr = dy + ci * hw;
            double acc = 0;
            if (is_mul) {
              const S* fr = fp->value.v.data() + ci * hw;
              for (std::int64_t i = 0; i < hw; ++i) acc += double(dyr[i]) * fr[i];
            } else {
              for (std::int64_t i = 0; i < hw; ++i) acc += dyr[i];
            }
            vp->grad[ci] += S(acc);
          }
        }
      };
    }
    return wrap(node);
  }

  Tensor<S> reduce(const Tensor<S>& x, const std::vector<int>& axes, bool mean) {
    const char* name = mean ? "reduce_mean" : "reduce_sum";
    const int rank = static_cast<int>(x.shape().size());
    if (axes.empty()) throw DomainError(std::string(name) + ": empty reduction axis set");
    std::set<int> ax(axes.begin(), axes.end());
    for (int a : ax)
      if (a < 0 || a >= rank)
        throw ShapeError(std::string(name) + ": axis " + std::to_string(a) + " out of range for rank " +
                         std::to_string(rank));
    Shape out_shape;
    std::int64_t count = 1;
    for (int d = 0; d < rank; ++d) {
      if (ax.count(d))
        count *= x.shape()[d];
      else
        out_shape.push_back(x.shape()[d]);
    }
    if (count == 0) throw DomainError(std::string(name) + ": empty reduction extent");

    // Map each input linear index to its output linear index once; reused by
    // both forward and backward.
    const std::int64_t n_in = x.numel();
    auto out_of = std::make_shared<std::vector<std::int64_t>>(n_in);
    {
      std::vector<std::int64_t> in_stride(rank, 1), out_stride;
      for (int d = rank - 2; d >= 0; --d) in_stride[d] = in_stride[d + 1] * x.shape()[d + 1];
      std::int64_t os = 1;
      std::vector<std::int64_t> ostrides(rank, 0);
      for (int d = rank - 1; d >= 0; --d) {
        if (!ax.count(d)) {
          ostrides[d] = os;
          os *= x.shape()[d];
        }
      }
      for (std::int64_t i = 0; i < n_in; ++i) {
        std::int64_t rem = i, oi = 0;
        for (int d = 0; d < rank; ++d) {
          const std::int64_t coord = rem / in_stride[d];
          rem %= in_stride[d];
          oi += coord * ostrides[d];
        }
        (*out_of)[i] = oi;
      }
    }
    auto node = new_node(TensorData<S>(out_shape), {x});  // rank-0 result has one element
    auto& yv = node->value.v;
    const auto& xv = x.values();
    std::vector<double> acc(yv.size(), 0.0);
    for (std::int64_t i = 0; i < n_in; ++i) acc[(*out_of)[i]] += xv[i];
    const double scale = mean ? 1.0 / double(count) : 1.0;
    for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = S(acc[i] * scale);
    if (node->requires_grad) {
      auto* self = node.get();
      auto* xp = x.node_.get();
      const S gscale = S(scale);
      node->backward = [self, xp, out_of, gscale, n_in] {
        xp->ensure_grad();
        for (std::int64_t i = 0; i < n_in; ++i) xp->grad[i] += self->grad[(*out_of)[i]] * gscale;
      };
    }
    return wrap(node);
  }

  // ----- conv kernels -----------------------------------------------------

  // Copies [C,H,W] planes into [C,H+2,W+2] buffers with a zero border, which
  // lets the 3x3 stride-1 kernels run branch-free.
  static std::vector<S> pad_planes_1(const S* src, int c, int h, int w) {
    const int ph = h + 2, pw = w + 2;
    std::vector<S> out(std::size_t(c) * ph * pw, S{0});
    for (int ci = 0; ci < c; ++ci)
      for (int r = 0; r < h; ++r) {
        const S* s = src + (std::int64_t(ci) * h + r) * w;
        S* d = out.data() + (std::int64_t(ci) * ph + r + 1) * pw + 1;
        for (int col = 0; col < w; ++col) d[col] = s[col];
      }
    return out;
  }

  static void conv2d_forward(const TensorData<S>& x, const TensorData<S>& w, const TensorData<S>* bias,
                             TensorData<S>& y, int stride) {
    const int cin = x.shape[0], h = x.shape[1], iw = x.shape[2];
    const int cout = w.shape[0], k = w.shape[2], p = (k - 1) / 2;
    const int oh = y.shape[1], ow = y.shape[2];
    const std::int64_t ihw = std::int64_t(h) * iw, ohw = std::int64_t(oh) * ow;
    const S* xv = x.data();
    const S* wv = w.data();
    if (k == 3 && stride == 1) {
      // One fused pass per (co,ci) plane: 9 multiply-accumulates per output
      // element against the zero-padded input.
      const int pw = iw + 2;
      const std::vector<S> xpad = pad_planes_1(xv, cin, h, iw);
      parallel_for(cout, [&](std::int64_t co0, std::int64_t co1) {
        for (std::int64_t co = co0; co < co1; ++co) {
          S* yp = y.data() + co * ohw;
          const S b = bias ? bias->v[co] : S{0};
          for (std::int64_t i = 0; i < ohw; ++i) yp[i] = b;
          for (int ci = 0; ci < cin; ++ci) {
            const S* wk = wv + (co * cin + ci) * 9;
            const S w00 = wk[0], w01 = wk[1], w02 = wk[2], w10 = wk[3], w11 = wk[4], w12 = wk[5], w20 = wk[6],
                    w21 = wk[7], w22 = wk[8];
            const S* base = xpad.data() + std::int64_t(ci) * (h + 2) * pw;
            for (int oy = 0; oy < oh; ++oy) {
              const S* r0 = base + std::int64_t(oy) * pw;
              const S* r1 = r0 + pw;
              const S* r2 = r1 + pw;
              S* yr = yp + std::int64_t(oy) * ow;
              for (int ox = 0; ox < ow; ++ox) {
                yr[ox] += w00 * r0[ox] + w01 * r0[ox + 1] + w02 * r0[ox + 2] + w10 * r1[ox] + w11 * r1[ox + 1] +
                          w12 * r1[ox + 2] + w20 * r2[ox] + w21 * r2[ox + 1] + w22 * r2[ox + 2];
              }
            }
          }
        }
      });
      return;
    }
    parallel_for(cout, [&](std::int64_t co0, std::int64_t co1) {
      for (std::int64_t co = co0; co < co1; ++co) {
        S* yp = y.data() + co * ohw;
        const S b = bias ? bias->v[co] : S{0};
        for (std::int64_t i = 0; i < ohw; ++i) yp[i] = b;
        for (int ci = 0; ci < cin; ++ci) {
          const S* xp = xv + ci * ihw;
          for (int kh = 0; kh < k; ++kh) {
            const int olo = std::max(0, detail::ceil_div(p - kh, stride));
            const int ohi = std::min(oh - 1, detail::floor_div(h - 1 - kh + p, stride));
            for (int kw = 0; kw < k; ++kw) {
              const S wgt = wv[((co * cin + ci) * k + kh) * k + kw];
              const int wlo = std::max(0, detail::ceil_div(p - kw, stride));
              const int whi = std::min(ow - 1, detail::floor_div(iw - 1 - kw + p, stride));
              const int xoff = kw - p;
              for (int oy = olo; oy <= ohi; ++oy) {
                const S* xr = xp + std::int64_t(oy * stride + kh - p) * iw + xoff;
                S* yr = yp + std::int64_t(oy) * ow;
                if (stride == 1) {
                  for (int ox = wlo; ox <= whi; ++ox) yr[ox] += wgt * xr[ox];
                } else {
                  for (int ox = wlo; ox <= whi; ++ox) yr[ox] += wgt * xr[2 * ox];
                }
              }
            }
          }
        }
      }
    });
  }

  static void conv2d_backward(detail::Node<S>& self, detail::Node<S>& xn, detail::Node<S>& wn,
                              detail::Node<S>* bn, int stride) {
    const TensorData<S>& x = xn.value;
    const TensorData<S>& w = wn.value;
    const int cin = x.shape[0], h = x.shape[1], iw = x.shape[2];
    const int cout = w.shape[0], k = w.shape[2], p = (k - 1) / 2;
    const int oh = self.value.shape[1], ow = self.value.shape[2];
    const std::int64_t ihw = std::int64_t(h) * iw, ohw = std::int64_t(oh) * ow;
    const S* dy = self.grad.data();
    const S* wv = w.data();
    const S* xv = x.data();

    if (k == 3 && stride == 1) {
      conv2d_backward_3x3s1(self, xn, wn, bn);
      return;
    }

    if (xn.requires_grad) {
      xn.ensure_grad();
      S* dx = xn.grad.data();
      parallel_for(cin, [&](std::int64_t ci0, std::int64_t ci1) {
        for (std::int64_t ci = ci0; ci < ci1; ++ci) {
          S* dxp = dx + ci * ihw;
          for (int co = 0; co < cout; ++co) {
            const S* dyp = dy + std::int64_t(co) * ohw;
            for (int kh = 0; kh < k; ++kh) {
              const int olo = std::max(0, detail::ceil_div(p - kh, stride));
              const int ohi = std::min(oh - 1, detail::floor_div(h - 1 - kh + p, stride));
              for (int kw = 0; kw < k; ++kw) {
                const S wgt = wv[((std::int64_t(co) * cin + ci) * k + kh) * k + kw];
                const int wlo = std::max(0, detail::ceil_div(p - kw, stride));
                const int whi = std::min(ow - 1, detail::floor_div(iw - 1 - kw + p, stride));
                const int xoff = kw - p;
                for (int oy = olo; oy <= ohi; ++oy) {
                  S* dxr = dxp + std::int64_t(oy * stride + kh - p) * iw + xoff;
                  const S* dyr = dyp + std::int64_t(oy) * ow;
                  if (stride == 1) {
                    for (int ox = wlo; ox <= whi; ++ox) dxr[ox] += wgt * dyr[ox];
                  } else {
                    for (int ox = wlo; ox <= whi; ++ox) dxr[2 * ox] += wgt * dyr[ox];
                  }
                }
              }
            }
          }
        }
      });
    }

    if (wn.requires_grad) {
      wn.ensure_grad();
      S* dw = wn.grad.data();
      parallel_for(cout, [&](std::int64_t co0, std::int64_t co1) {
        for (std::int64_t co = co0; co < co1; ++co) {
          const S* dyp = dy + co * ohw;
          for (int ci = 0; ci < cin; ++ci) {
            const S* xp = xv + std::int64_t(ci) * ihw;
            for (int kh = 0; kh < k; ++kh) {
              const int olo = std::max(0, detail::ceil_div(p - kh, stride));
              const int ohi = std::min(oh - 1, detail::floor_div(h - 1 - kh + p, stride));
              for (int kw = 0; kw < k; ++kw) {
                const int wlo = std::max(0, detail::ceil_div(p - kw, stride));
                const int whi = std::min(ow - 1, detail::floor_div(iw - 1 - kw + p, stride));
                const int xoff = kw - p;
                S acc{0};
                for (int oy = olo; oy <= ohi; ++oy) {
                  const S* dyr = dyp + std::int64_t(oy) * ow;
                  const S* xr = xp + std::int64_t(oy * stride + kh - p) * iw + xoff;
                  if (stride == 1) {
                    for (int ox = wlo; ox <= whi; ++ox) acc += dyr[ox] * xr[ox];
                  } else {
                    for (int ox = wlo; ox <= whi; ++ox) acc += dyr[ox] * xr[2 * ox];
                  }
                }
                dw[((co * cin + ci) * k + kh) * k + kw] += acc;
              }
            }
          }
        }
      });
    }

    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (int co = 0; co < cout; ++co) {
        const S* dyp = dy + std::int64_t(co) * ohw;
        double acc = 0;
        for (std::int64_t i = 0; i < ohw; ++i) acc += dyp[i];
        bn->grad[co] += S(acc);
      }
    }
  }

  // Fused 3x3 stride-1 backward: the input gradient is a full correlation of
  // the padded upstream gradient with the flipped kernel, and each weight
  // gradient is one of nine shifted dot products against the padded input;
  // both run as a single pass per channel pair.
  static void conv2d_backward_3x3s1(detail::Node<S>& self, detail::Node<S>& xn, detail::Node<S>& wn,
                                    detail::Node<S>* bn) {
    const TensorData<S>& x = xn.value;
    const TensorData<S>& w = wn.value;
    const int cin = x.shape[0], h = x.shape[1], iw = x.shape[2];
    const int cout = w.shape[0];
    const std::int64_t ihw = std::int64_t(h) * iw, ohw = ihw;
    const S* dy = self.grad.data();
    const S* wv = w.data();
    const int pw = iw + 2;

    if (xn.requires_grad) {
      xn.ensure_grad();
      S* dx = xn.grad.data();
      const std::vector<S> dypad = pad_planes_1(dy, cout, h, iw);
      parallel_for(cin, [&](std::int64_t ci0, std::int64_t ci1) {
        for (std::int64_t ci = ci0; ci < ci1; ++ci) {
          S* dxp = dx + ci * ihw;
          for (int co = 0; co < cout; ++co) {
            const S* wk = wv + (std::int64_t(co) * cin + ci) * 9;
            // flipped kernel: weight (kh,kw) pairs with padded row 2-kh
            const S w00 = wk[8], w01 = wk[7], w02 = wk[6], w10 = wk[5], w11 = wk[4], w12 = wk[3], w20 = wk[2],
                    w21 = wk[1], w22 = wk[0];
            const S* base = dypad.data() + std::int64_t(co) * (h + 2) * pw;
            for (int iy = 0; iy < h; ++iy) {
              const S* r0 = base + std::int64_t(iy) * pw;
              const S* r1 = r0 + pw;
              const S* r2 = r1 + pw;
              S* dxr = dxp + std::int64_t(iy) * iw;
              for (int ix = 0; ix < iw; ++ix) {
                dxr[ix] += w00 * r0[ix] + w01 * r0[ix + 1] + w02 * r0[ix + 2] + w10 * r1[ix] + w11 * r1[ix + 1] +
                           w12 * r1[ix + 2] + w20 * r2[ix] + w21 * r2[ix + 1] + w22 * r2[ix + 2];
              }
            }
          }
        }
      });
    }

    if (wn.requires_grad) {
      wn.ensure_grad();
      S* dw = wn.grad.data();
      const std::vector<S> xpad = pad_planes_1(x.data(), cin, h, iw);
      parallel_for(cout, [&](std::int64_t co0, std::int64_t co1) {
        for (std::int64_t co = co0; co < co1; ++co) {
          const S* dyp = dy + co * ohw;
          for (int ci = 0; ci < cin; ++ci) {
            const S* base = xpad.data() + std::int64_t(ci) * (h + 2) * pw;
            S a00{0}, a01{0}, a02{0}, a10{0}, a11{0}, a12{0}, a20{0}, a21{0}, a22{0};
            for (int oy = 0; oy < h; ++oy) {
              const S* r0 = base + std::int64_t(oy) * pw;
              const S* r1 = r0 + pw;
              const S* r2 = r1 + pw;
              const S* dyr = dyp + std::int64_t(oy) * iw;
              for (int ox = 0; ox < iw; ++ox) {
                const S g = dyr[ox];
                a00 += g * r0[ox];
                a01 += g * r0[ox + 1];
                a02 += g * r0[ox + 2];
                a10 += g * r1[ox];
                a11 += g * r1[ox + 1];
                a12 += g * r1[ox + 2];
                a20 += g * r2[ox];
                a21 += g * r2[ox + 1];
                a22 += g * r2[ox + 2];
              }
            }
            S* wk = dw + (co * cin + ci) * 9;
            wk[0] += a00;
            wk[1] += a01;
            wk[2] += a02;
            wk[3] += a10;
            wk[4] += a11;
            wk[5] += a12;
            wk[6] += a20;
            wk[7] += a21;
            wk[8] += a22;
          }
        }
      });
    }

    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (int co = 0; co < cout; ++co) {
        const S* dyp = dy + std::int64_t(co) * ohw;
        double acc = 0;
        for (std::int64_t i = 0; i < ohw; ++i) acc += dyp[i];
        bn->grad[co] += S(acc);
      }
    }
  }

  std::vector<std::shared_ptr<detail::Node<S>>> tape_;
  bool record_ = true;
  bool backward_done_ = false;
};

}  // namespace freenet
