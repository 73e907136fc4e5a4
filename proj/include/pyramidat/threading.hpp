#pragma once

#include <thread>
#include <vector>

namespace pyramidat {

/// Process [0, total) in fixed chunks of `chunk` items. Chunk boundaries are
/// independent of the thread count; chunk c is handled by worker (c % threads),
/// and each worker visits its chunks in increasing order. Results that are
/// reduced per worker in slot order are therefore reproducible for a fixed
/// thread count, and exactly sequential when threads == 1.
template <class Fn>
void run_chunked(int total, int chunk, int threads, Fn&& fn) {
    if (total <= 0) return;
    const int n_chunks = (total + chunk - 1) / chunk;
    if (threads <= 1 || n_chunks <= 1) {
        for (int c = 0; c < n_chunks; ++c) {
            const int begin = c * chunk;
            const int end = std::min(total, begin + chunk);
            fn(c, begin, end, 0);
        }
        return;
    }
    const int n_workers = std::min(threads, n_chunks);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int t = 0; t < n_workers; ++t) {
        pool.emplace_back([=, &fn]() {
            for (int c = t; c < n_chunks; c += n_workers) {
                const int begin = c * chunk;
                const int end = std::min(total, begin + chunk);
                fn(c, begin, end, t);
            }
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace pyramidat
