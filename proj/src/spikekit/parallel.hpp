#pragma once

#include <cstdint>
#include <functional>

namespace spikekit {

// Number of worker threads used by the kernels. Defaults to the hardware
// count and is capped by the SPIKEKIT_THREADS environment variable.
int thread_count();

// Runs fn(begin, end) over disjoint chunks of [0, n). Chunking is by result
// index only, so output is identical for any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace spikekit
