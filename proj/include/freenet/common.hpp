#pragma once

#include <atomic>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace freenet {

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// catch one type and print the message.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  using Error::Error;
};
// Value outside the mathematical domain of an operation (e.g. iteration past
// the end of a learning-rate schedule, empty reduction).
struct DomainError : Error {
  using Error::Error;
};
// API misuse: calling backward twice, backward on a non-scalar, mixing graphs.
struct UsageError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
// Caller handed data that violates a documented precondition (bad label id,
// out-of-range position).
struct ContractError : Error {
  using Error::Error;
};
// Malformed file on disk.
struct FormatError : Error {
  using Error::Error;
};
// Non-finite values detected where finite math is required.
struct NumericError : Error {
  using Error::Error;
};
// Spatial dims not usable by the network as-is.
struct DimensionError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& s, const char* what) {
  for (int d : s) {
    if (d <= 0) throw ShapeError(std::string(what) + ": non-positive extent in " + shape_str(s));
  }
}

// ----- threading --------------------------------------------------------
//
// A single global thread count, set once by the CLI (--threads) before any
// heavy work.  Work is split into contiguous index ranges and each range is
// owned by exactly one worker, so results are bitwise identical for any
// thread count.

namespace detail {
inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

inline void set_num_threads(int n) {
  if (n < 1) throw ConfigError("set_num_threads: thread count must be >= 1");
  detail::thread_count_slot().store(n);
}

inline int num_threads() { return detail::thread_count_slot().load(); }

// Calls fn(begin, end) on disjoint contiguous ranges covering [0, n).
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  const int workers = num_threads();
  if (workers <= 1 || n < 2) {
    if (n > 0) fn(std::int64_t{0}, n);
    return;
  }
  const int used = static_cast<int>(std::min<std::int64_t>(workers, n));
  std::vector<std::thread> pool;
  pool.reserve(used - 1);
  const std::int64_t chunk = (n + used - 1) / used;
  for (int t = 1; t < used; ++t) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(std::int64_t{0}, std::min<std::int64_t>(n, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace freenet
