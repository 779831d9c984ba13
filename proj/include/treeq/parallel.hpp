#pragma once

// Deterministic parallelism helpers. The contract throughout the library:
// every work item derives its own random stream from (seed, item index) and
// writes into its own slot, then reductions run sequentially in item order.
// Results are therefore identical for every worker count, including 1.

#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace treeq {

// Worker resolution order: explicit argument, then TREEQ_WORKERS, then
// hardware concurrency.
inline int resolve_workers(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("TREEQ_WORKERS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? int(hw) : 1;
}

// Runs fn(i) for i in [0, count) across workers with dynamic scheduling.
// fn must only write to per-item storage.
template <class Fn>
inline void parallel_items(long count, int workers, Fn&& fn) {
  if (count <= 0) return;
  long w = resolve_workers(workers);
  if (w > count) w = count;
  if (w <= 1) {
    for (long i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<long> next{0};
  std::vector<std::thread> pool;
  pool.reserve(size_t(w));
  for (long t = 0; t < w; ++t)
    pool.emplace_back([&] {
      for (;;) {
        long i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= count) return;
        fn(i);
      }
    });
  for (auto& th : pool) th.join();
}

// Compensated summation for the sequential reductions.
struct Kahan {
  double sum = 0.0;
  double c = 0.0;
  void add(double x) {
    double y = x - c;
    double t = sum + y;
    c = (t - sum) - y;
    sum = t;
  }
};

}  // namespace treeq
