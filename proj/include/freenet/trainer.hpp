#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "freenet/freenet.hpp"
#include "freenet/gs2.hpp"

namespace freenet {

struct OptimizerConfig {
  double base_lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int max_iter = 1000;
  double power = 0.9;  // poly decay exponent
};

// lr(t) = base_lr * (1 - t/max_iter)^power
inline double poly_lr(const OptimizerConfig& cfg, int iter) {
  if (cfg.max_iter < 1) throw ConfigError("poly_lr: max_iter must be >= 1");
  if (iter < 0 || iter > cfg.max_iter)
    throw DomainError("poly_lr: iteration " + std::to_string(iter) + " outside schedule of " +
                      std::to_string(cfg.max_iter));
  return cfg.base_lr * std::pow(1.0 - double(iter) / double(cfg.max_iter), cfg.power);
}

// Momentum buffers, one per parameter, zero until the first step.
template <class S>
struct SgdState {
  std::vector<std::vector<S>> velocity;

  static SgdState create(const std::vector<Param<S>>& params) {
    SgdState st;
    st.velocity.reserve(params.size());
    for (const auto& p : params) st.velocity.emplace_back(p.tensor.values().size(), S{0});
    return st;
  }
};

// One SGD update with momentum, poly learning rate, and L2 weight decay on
// flagged (conv/dense weight) parameters:
//   g' = g + wd * w ;  v = momentum * v + g' ;  w -= lr * v
// Gradients are consumed: every parameter's grad buffer is zeroed afterwards.
template <class S>
void sgd_step(std::vector<Param<S>>& params, SgdState<S>& state, const OptimizerConfig& cfg, int iter) {
  if (state.velocity.size() != params.size())
    throw UsageError("sgd_step: optimizer state does not match parameter list");
  const S lr = S(poly_lr(cfg, iter));
  const S mom = S(cfg.momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& w = p.tensor.values();
    auto& v = state.velocity[i];
    const S wd = p.weight_decay ? S(cfg.weight_decay) : S{0};
    if (p.tensor.has_grad()) {
      auto& g = p.tensor.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mom * v[j] + (g[j] + wd * w[j]);
        w[j] -= lr * v[j];
      }
      p.tensor.zero_grad();
    } else {
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mom * v[j] + wd * w[j];
        w[j] -= lr * v[j];
      }
    }
  }
}

struct TrainOptions {
  int alpha = 20;
  std::uint64_t seed = 1;
  OptimizerConfig optimizer;
};

struct IterationRecord {
  int iter = 0;
  double loss = 0;
  double lr = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<IterationRecord> iterations;
  int epochs = 0;
  double final_loss() const { return iterations.empty() ? 0.0 : iterations.back().loss; }
};

// Whole-image training: every iteration runs one full forward on the (padded)
// cube, evaluates the masked loss on the current stratified batch, and takes
// one SGD step.  Batches come from the epoch schedule; when an epoch is
// exhausted the positions are reshuffled under the same seed and the next
// epoch begins (momentum carries across the boundary).  A non-finite loss
// aborts with a NumericError naming the iteration.
//
// `labels` is the full-resolution raster; `cube` may have any H,W (it is
// padded internally).  Writes "iter loss lr seconds" per iteration to `log`
// when given.
template <class S>
TrainReport train(FreeNetModel<S>& model, const TensorData<S>& cube, const std::vector<std::uint16_t>& labels,
                  const LabeledPositions& train_positions, const TrainOptions& opts, std::ostream* log = nullptr) {
  if (cube.rank() != 3) throw ShapeError("train: cube must be [C,H,W]");
  const int lh = cube.shape[1], lw = cube.shape[2];
  if (labels.size() != static_cast<std::size_t>(std::int64_t(lh) * lw))
    throw ShapeError("train: label raster does not match cube dims");
  if (!cube.all_finite()) throw NumericError("train: input cube contains non-finite values");
  if (train_positions.total() == 0) throw DomainError("train: no training positions");

  Tensor<S> input = Tensor<S>::from_data(pad_spatial_to_multiple(cube, FreeNetConfig::kStrideMultiple));
  auto labels_ptr = std::make_shared<const std::vector<std::uint16_t>>(labels);
  auto& params = model.parameters();
  SgdState<S> state = SgdState<S>::create(params);

  TrainReport report;
  SampleSchedule schedule = build_schedule(train_positions, opts.alpha, opts.seed);
  std::size_t cursor = 0;
  Graph<S> g;
  std::vector<Position> batch_positions;
  for (int iter = 0; iter < opts.optimizer.max_iter; ++iter) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cursor >= schedule.batches.size()) {
      schedule = reshuffle_epoch(train_positions, schedule, ++report.epochs);
      cursor = 0;
    }
    const auto& batch = schedule.batches[cursor++];
    batch_positions.clear();
    for (const auto& e : batch) batch_positions.push_back(e.pos);

    g.clear();
    Tensor<S> logits = model.forward(g, input);
    Tensor<S> loss = g.masked_cross_entropy(logits, labels_ptr, lh, lw, batch_positions);
    const double loss_val = static_cast<double>(loss.item());
    if (!std::isfinite(loss_val))
      throw NumericError("train: loss diverged (non-finite) at iteration " + std::to_string(iter));
    g.backward(loss);
    sgd_step(params, state, opts.optimizer, iter);

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.iterations.push_back({iter, loss_val, poly_lr(opts.optimizer, iter), secs});
    if (log) (*log) << iter << ' ' << loss_val << ' ' << poly_lr(opts.optimizer, iter) << ' ' << secs << '\n';
  }
  return report;
}

}  // namespace freenet
