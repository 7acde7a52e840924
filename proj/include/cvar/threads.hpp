#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace cvar {

// Worker cap: CONTROLVAR_THREADS env overrides the flag, which defaults to
// the logical core count.
inline int resolve_threads(int flag_value = 0) {
    if (const char* env = std::getenv("CONTROLVAR_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    if (flag_value > 0) return flag_value;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

// Static contiguous split; each index writes only its own outputs, so the
// result does not depend on scheduling.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    const int chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int begin = t * chunk, end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn]() {
            for (int i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace cvar
