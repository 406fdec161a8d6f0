#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "freenet/autodiff.hpp"
#include "freenet/rng.hpp"

namespace freenet {

// Training positions grouped by class (ids 1..num_classes).
struct LabeledPositions {
  int num_classes = 0;
  std::vector<std::vector<Position>> per_class;  // index 0 holds class 1

  static LabeledPositions from_raster(const std::vector<std::uint16_t>& labels, int h, int w, int num_classes,
                                      const std::vector<std::uint8_t>* mask = nullptr) {
    if (static_cast<std::int64_t>(labels.size()) != std::int64_t(h) * w)
      throw ShapeError("LabeledPositions: raster size does not match " + std::to_string(h) + "x" + std::to_string(w));
    if (mask && mask->size() != labels.size())
      throw ShapeError("LabeledPositions: mask size does not match raster");
    LabeledPositions lp;
    lp.num_classes = num_classes;
    lp.per_class.resize(num_classes);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const std::size_t i = std::size_t(r) * w + c;
        if (mask && !(*mask)[i]) continue;
        const int label = labels[i];
        if (label == 0) continue;
        if (label > num_classes)
          throw ContractError("LabeledPositions: label " + std::to_string(label) + " at (" + std::to_string(r) + "," +
                              std::to_string(c) + ") exceeds " + std::to_string(num_classes) + " classes");
        lp.per_class[label - 1].push_back({r, c});
      }
    return lp;
  }

  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& v : per_class) n += static_cast<std::int64_t>(v.size());
    return n;
  }
};

// Global stochastic stratified mini-batches.  Every epoch, each class's
// positions are shuffled and cut into alpha-sized chunks (the last chunk
// holds the remainder); batch b is the concatenation of every class's b-th
// chunk.  One epoch therefore visits every position exactly once, each batch
// holds at most alpha positions per class, and the batch count is
// max over classes of ceil(count / alpha).
struct SampleSchedule {
  struct Entry {
    std::uint16_t cls = 0;  // 1-based class the position was stratified under
    Position pos;
  };
  using Batch = std::vector<Entry>;

  std::vector<Batch> batches;
  int alpha = 0;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::vector<int> skipped_classes;  // 1-based ids of classes with no positions

  const std::vector<Batch>& iterate() const { return batches; }

  // One line per position: "batch_index class row col".
  void dump(std::ostream& os) const {
    for (std::size_t b = 0; b < batches.size(); ++b)
      for (const auto& e : batches[b])
        os << b << ' ' << e.cls << ' ' << e.pos.r << ' ' << e.pos.c << '\n';
  }
};

inline SampleSchedule build_schedule_epoch(const LabeledPositions& positions, int alpha, std::uint64_t seed,
                                           int epoch) {
  if (alpha < 1) throw ConfigError("build_schedule: alpha must be >= 1, got " + std::to_string(alpha));
  if (epoch < 0) throw ConfigError("build_schedule: epoch must be >= 0");
  if (positions.num_classes < 1) throw ConfigError("build_schedule: no classes");

  SampleSchedule sched;
  sched.alpha = alpha;
  sched.seed = seed;
  sched.epoch = epoch;

  std::size_t num_batches = 0;
  std::vector<std::vector<Position>> shuffled(positions.per_class.size());
  for (std::size_t k = 0; k < positions.per_class.size(); ++k) {
    if (positions.per_class[k].empty()) {
      sched.skipped_classes.push_back(static_cast<int>(k) + 1);
      continue;
    }
    shuffled[k] = positions.per_class[k];
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(k + 1));
    rng.shuffle(shuffled[k]);
    const std::size_t chunks = (shuffled[k].size() + alpha - 1) / alpha;
    num_batches = std::max(num_batches, chunks);
  }
  if (num_batches == 0) throw DomainError("build_schedule: every class is empty");

  sched.batches.resize(num_batches);
  for (std::size_t k = 0; k < shuffled.size(); ++k) {
    const auto& pool = shuffled[k];
    for (std::size_t start = 0, b = 0; start < pool.size(); start += alpha, ++b) {
      const std::size_t stop = std::min(pool.size(), start + alpha);
      for (std::size_t i = start; i < stop; ++i)
        sched.batches[b].push_back({static_cast<std::uint16_t>(k + 1), pool[i]});
    }
  }
  return sched;
}

inline SampleSchedule build_schedule(const LabeledPositions& positions, int alpha, std::uint64_t seed) {
  return build_schedule_epoch(positions, alpha, seed, 0);
}

// Fresh shuffle for a new epoch under the same seed; epoch e always yields
// the same batches for the same inputs.
inline SampleSchedule reshuffle_epoch(const LabeledPositions& positions, const SampleSchedule& previous, int epoch) {
  return build_schedule_epoch(positions, previous.alpha, previous.seed, epoch);
}

}  // namespace freenet
