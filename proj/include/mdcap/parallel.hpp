#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace mdcap {

// Worker count: MDCAP_THREADS if set, else the hardware count.
inline int worker_count() {
  if (const char* env = std::getenv("MDCAP_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

// Runs fn(i) for i in [0, n) across workers. Each index's work must be
// independent and write only to its own slot, so results do not depend on the
// worker count. Exceptions are rethrown on the calling thread.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mdcap
