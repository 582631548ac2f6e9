#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace parabart {

namespace detail {
inline std::size_t& thread_cap() {
  static std::size_t cap = [] {
    const char* env = std::getenv("PARABART_THREADS");
    if (env == nullptr) return std::size_t{1};
    try {
      long v = std::stol(env);
      return v < 1 ? std::size_t{1} : static_cast<std::size_t>(v);
    } catch (...) {
      return std::size_t{1};
    }
  }();
  return cap;
}
}  // namespace detail

/// Intra-op thread cap. Read from PARABART_THREADS on first use, default 1.
inline std::size_t num_threads() { return detail::thread_cap(); }
inline void set_num_threads(std::size_t n) { detail::thread_cap() = std::max<std::size_t>(1, n); }

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one thread
/// and fn must only write state owned by index i, so results do not depend
/// on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
  std::size_t threads = std::min(num_threads(), n);
  if (threads <= 1 || n * work_per_item < (1u << 15)) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(n, chunk); ++i) fn(i);
  for (auto& th : pool) th.join();
}

}  // namespace parabart
