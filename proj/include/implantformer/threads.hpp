#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace implantformer {

// Worker-thread cap: IMPLANTFORMER_THREADS if set, hardware concurrency
// otherwise. Results never depend on the thread count: work is split into
// disjoint index ranges and every range is processed in serial order.
inline int thread_count() {
  static const int n = [] {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("IMPLANTFORMER_THREADS")) {
      const int cap = std::atoi(env);
      if (cap >= 1) hw = std::min(hw, cap);
    }
    return hw;
  }();
  return n;
}

namespace detail {
inline thread_local bool inside_parallel_region = false;
}

// Runs fn(begin, end) over a partition of [0, n). Nested calls run inline.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  const int workers = detail::inside_parallel_region ? 1 : thread_count();
  if (workers == 1 || n == 1) {
    fn(0, n);
    return;
  }
  const int used = static_cast<int>(std::min<int64_t>(workers, n));
  const int64_t chunk = (n + used - 1) / used;
  std::vector<std::thread> pool;
  pool.reserve(used);
  for (int t = 0; t < used; ++t) {
    const int64_t lo = t * chunk;
    const int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      detail::inside_parallel_region = true;
      fn(lo, hi);
      detail::inside_parallel_region = false;
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace implantformer
