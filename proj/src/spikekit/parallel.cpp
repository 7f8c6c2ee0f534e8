#include "spikekit/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace spikekit {

int thread_count() {
    static const int n = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw <= 0) hw = 1;
        if (const char* env = std::getenv("SPIKEKIT_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1) hw = std::min(hw, cap);
        }
        return hw;
    }();
    return n;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    const int workers = thread_count();
    // Small jobs are cheaper to run inline than to fan out.
    if (workers == 1 || n < 4096) {
        fn(0, n);
        return;
    }
    const int64_t chunks = std::min<int64_t>(workers, n);
    const int64_t step = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(chunks));
    for (int64_t c = 0; c < chunks; ++c) {
        const int64_t lo = c * step;
        const int64_t hi = std::min(n, lo + step);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace spikekit
