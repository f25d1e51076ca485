#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace phlab {

inline int default_workers() {
    if (const char* env = std::getenv("PHLAB_WORKERS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

// Runs fn(i) for i in [0, n) on `workers` threads and collects the results
// in index order, so the reduction downstream is deterministic no matter
// how the work interleaves.
template <typename R>
std::vector<R> parallel_map(int n, int workers, const std::function<R(int)>& fn) {
    std::vector<R> out(static_cast<size_t>(n));
    if (n == 0) return out;
    if (workers <= 1 || n == 1) {
        for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fn(i);
        return out;
    }
    std::atomic<int> next{0};
    auto body = [&]() {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= n) break;
            out[static_cast<size_t>(i)] = fn(i);
        }
    };
    std::vector<std::thread> pool;
    int nt = std::min(workers, n);
    pool.reserve(static_cast<size_t>(nt));
    for (int t = 0; t < nt; ++t) pool.emplace_back(body);
    for (auto& th : pool) th.join();
    return out;
}

}  // namespace phlab
