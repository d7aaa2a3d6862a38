#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace attnlab {

inline unsigned default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

/**
 * Runs fn(chunk, begin, end) over [0, n) split into fixed chunks.
 *
 * Chunk boundaries depend only on n and chunk_size, never on the worker
 * count, so callers that reduce per-chunk partial results in chunk order get
 * identical answers for any number of workers.
 */
template <class Fn>
void for_each_chunk(std::size_t n, std::size_t chunk_size, unsigned workers, Fn&& fn) {
  if (n == 0) return;
  chunk_size = std::max<std::size_t>(1, chunk_size);
  const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n_chunks)));

  if (workers == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c)
      fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= n_chunks) return;
      try {
        fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n_chunks);
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace attnlab
