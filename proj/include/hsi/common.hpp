#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hsi {

/// Bad user input (missing file, malformed header, out-of-range setting).
/// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Failure during an otherwise valid run (non-finite gradient, I/O error
/// mid-write). The CLI maps this to exit code 2.
class RuntimeError : public std::runtime_error {
public:
  explicit RuntimeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A partition failed its sampling-principle audit. The CLI maps this to
/// exit code 3.
class AuditError : public std::runtime_error {
public:
  explicit AuditError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Global worker-thread count for element-parallel loops. Results are
/// bit-identical for any value: loops partition disjoint output ranges and
/// never reduce across threads.
void set_num_threads(int n);
int num_threads();

/// Runs fn(i) for i in [0, n). Serial when num_threads() == 1.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
  const int threads = num_threads();
  if (threads <= 1 || n < 2) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = static_cast<int>(std::min<int64_t>(threads, n));
  const int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const int64_t lo = w * chunk;
    const int64_t hi = std::min<int64_t>(lo + chunk, n);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

}  // namespace hsi
