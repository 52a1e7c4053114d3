#ifndef OPTCLEAR_PARALLEL_HPP
#define OPTCLEAR_PARALLEL_HPP

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace optclear {

/// Worker count: OPTCLEAR_THREADS caps the hardware concurrency.
inline std::size_t default_thread_count() {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("OPTCLEAR_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
    } catch (const std::exception&) {
    }
  }
  return n;
}

/// Runs fn(i) for i in [0, count). Each index is handled exactly once, so
/// callers writing into slot i get results independent of scheduling.
template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex guard;
  std::vector<std::jthread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < count; i += threads) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(guard);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace optclear

#endif  // OPTCLEAR_PARALLEL_HPP
