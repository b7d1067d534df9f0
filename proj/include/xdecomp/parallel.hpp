#pragma once

// Minimal deterministic data parallelism. Work is split into contiguous
// index ranges, one per worker; every call site writes disjoint outputs, so
// results are bit-identical for any thread count.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace xdecomp {

namespace detail {
inline std::atomic<int> g_max_threads{1};
}

// Global worker cap. 1 by default; the CLI raises it via --threads.
inline int max_threads() { return detail::g_max_threads.load(); }
inline void set_max_threads(int n) {
  detail::g_max_threads.store(std::max(1, n));
}

// Invokes fn(begin, end) over a partition of [0, n). Ranges are contiguous
// and in index order; with max_threads()==1 this is a plain function call.
inline void parallel_for(std::int64_t n,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  const int workers = int(std::min<std::int64_t>(max_threads(), n));
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(workers));
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
    if (lo >= hi) break;
    pool.emplace_back(fn, lo, hi);
  }
  for (auto& t : pool) t.join();
}

}  // namespace xdecomp
