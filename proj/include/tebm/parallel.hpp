#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace tebm {

inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{1};
  return n;
}

/// Worker count for internal loops; 0 selects hardware concurrency.
inline void set_num_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  thread_setting() = n;
}
inline int num_threads() { return thread_setting().load(); }

/// Runs body(begin, end) over a static partition of [0, count). Each index is
/// handled by exactly one worker, so results do not depend on the thread count
/// as long as body writes only to index-owned outputs.
template <typename Body>
void parallel_for(std::size_t count, Body&& body, std::size_t min_chunk = 64) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()),
                                                    std::max<std::size_t>(1, count / std::max<std::size_t>(1, min_chunk)));
  if (workers <= 1) {
    body(std::size_t{0}, count);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(count, b + chunk);
    if (b < e) pool.emplace_back([&body, b, e] { body(b, e); });
  }
  body(std::size_t{0}, std::min(count, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace tebm
