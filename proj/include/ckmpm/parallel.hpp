#pragma once

#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ckmpm {

// Persistent worker pool with static range partitioning: [0, n) is cut into
// one contiguous chunk per participating worker, so the chunk assignment is a
// pure function of (n, thread_count) and never depends on scheduling. Worker
// index 0 is the calling thread.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  ~ThreadPool() { shutdown(); }

  int thread_count() const { return total_; }

  // Total worker count including the calling thread. Not safe to call while a
  // for_range is in flight; intended for one-time setup.
  void set_thread_count(int n) {
    if (n < 1) n = 1;
    shutdown();
    total_ = n;
    stop_ = false;
    for (int i = 1; i < n; ++i)
      threads_.emplace_back([this, i] { worker_main(i); });
  }

  // f(begin, end, worker_index) over disjoint chunks covering [0, n).
  template <typename F>
  void for_range(std::size_t n, F&& f) {
    if (n == 0) return;
    int W = total_;
    if (static_cast<std::size_t>(W) > n) W = static_cast<int>(n);
    if (W <= 1) {
      f(std::size_t(0), n, 0);
      return;
    }
    {
      std::unique_lock lk(m_);
      job_ = [&f, n, W](int w) {
        std::size_t b = n * static_cast<std::size_t>(w) / W;
        std::size_t e = n * static_cast<std::size_t>(w + 1) / W;
        if (b < e) f(b, e, w);
      };
      job_workers_ = W - 1;
      pending_ = W - 1;
      ++generation_;
    }
    cv_.notify_all();
    std::exception_ptr caller_ex;
    try {
      std::size_t e0 = n / static_cast<std::size_t>(W);
      if (e0 > 0) f(std::size_t(0), e0, 0);
    } catch (...) {
      caller_ex = std::current_exception();
    }
    {
      std::unique_lock lk(m_);
      done_cv_.wait(lk, [&] { return pending_ == 0; });
      job_ = nullptr;
    }
    if (worker_ex_) {
      std::exception_ptr e = worker_ex_;
      worker_ex_ = nullptr;
      std::rethrow_exception(e);
    }
    if (caller_ex) std::rethrow_exception(caller_ex);
  }

 private:
  ThreadPool() = default;

  void shutdown() {
    {
      std::lock_guard lk(m_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
    threads_.clear();
    total_ = 1;
  }

  void worker_main(int idx) {
    std::uint64_t seen = 0;
    for (;;) {
      std::function<void(int)> job;
      {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        if (idx > job_workers_) continue;  // not part of this job's split
        job = job_;
      }
      try {
        job(idx);
      } catch (...) {
        std::lock_guard lk(m_);
        if (!worker_ex_) worker_ex_ = std::current_exception();
      }
      {
        std::lock_guard lk(m_);
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  std::function<void(int)> job_;
  std::uint64_t generation_ = 0;
  int job_workers_ = 0;
  int pending_ = 0;
  int total_ = 1;
  bool stop_ = false;
  std::exception_ptr worker_ex_;
};

template <typename F>
inline void parallel_for(std::size_t n, F&& f) {
  ThreadPool::instance().for_range(n, std::forward<F>(f));
}

}  // namespace ckmpm
