#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "sda/error.hpp"

// Parallel map over an index range. Work items must be independent; callers
// get determinism by writing results into pre-allocated per-index slots and
// deriving any randomness from the index, never from thread identity.
//
// Thread count: SDA_LAB_THREADS if set (>=1), else hardware concurrency.

namespace sda {

inline int max_threads() {
    if (const char* env = std::getenv("SDA_LAB_THREADS")) {
        try {
            int v = std::stoi(env);
            if (v >= 1) return v;
        } catch (...) {
        }
        throw ValueError("SDA_LAB_THREADS must be a positive integer");
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

template <class Fn>
void parallel_for(int64_t n, Fn&& fn, int threads = 0) {
    if (n <= 0) return;
    if (threads <= 0) threads = max_threads();
    threads = static_cast<int>(std::min<int64_t>(threads, n));
    if (threads == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                int64_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lk(err_mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace sda
