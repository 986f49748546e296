// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace protonmt {

/// Fixed-size worker pool for data-parallel loops. Work items are independent
/// (one slot per item, no shared mutable state), so results do not depend on
/// the thread count or scheduling; reductions are performed by the caller in
/// item order. This is what makes `--threads N` bit-reproducible.
class ThreadPool {
 public:
  explicit ThreadPool(int threads) {
    int n = threads < 1 ? 1 : threads;
    for (int i = 0; i < n - 1; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  int threads() const { return static_cast<int>(workers_.size()) + 1; }

  /// Runs fn(i) for i in [0, n). Blocks until all items are done. The calling
  /// thread participates, so a 1-thread pool runs everything inline.
  void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    if (workers_.empty() || n == 1) {
      for (size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::atomic<size_t> next{0};
    std::atomic<size_t> done{0};
    {
      std::unique_lock<std::mutex> lock(mu_);
      job_ = [&](void) {
        for (;;) {
          size_t i = next.fetch_add(1);
          if (i >= n) break;
          fn(i);
          done.fetch_add(1);
        }
      };
      generation_++;
    }
    cv_.notify_all();
    // Caller works too.
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= n) break;
      fn(i);
      done.fetch_add(1);
    }
    while (done.load() < n) std::this_thread::yield();
    std::unique_lock<std::mutex> lock(mu_);
    job_ = nullptr;
  }

 private:
  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      std::function<void()> job;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return stop_ || (job_ && generation_ != seen); });
        if (stop_) return;
        seen = generation_;
        job = job_;
      }
      if (job) job();
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::function<void()> job_;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace protonmt
