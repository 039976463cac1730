#pragma once

// Bounded fan-out over independent work items. Each worker runs its items
// single-threaded (OpenMP kernels limited to one thread), so results do not
// depend on the worker count.

#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

#include "compostruct/kernels.hpp"

namespace compostruct {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. If any call throws, the
/// exception of the lowest failing index is rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    kernels::omp::set_threads(1);
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t width = jobs < n ? jobs : n;
  for (std::size_t t = 0; t < width; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace compostruct
