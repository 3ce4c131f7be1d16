#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace knnx {

struct ParallelFailure {
  std::size_t index = 0;
  std::exception_ptr error;
  explicit operator bool() const noexcept { return error != nullptr; }
};

// Runs fn(i) for i in [0, n) on up to `workers` threads. Jobs are claimed in
// index order. After the first failure no new job starts; the reported
// failure is the one with the lowest index among those that ran.
template <class Fn>
ParallelFailure parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex mu;
  ParallelFailure failure;
  auto worker = [&] {
    for (;;) {
      if (stop.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure.error || i < failure.index) {
          failure.index = i;
          failure.error = std::current_exception();
        }
        stop.store(true);
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    worker();
    return failure;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  pool.clear();  // joins
  return failure;
}

}  // namespace knnx
