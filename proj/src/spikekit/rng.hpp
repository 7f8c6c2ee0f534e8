#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace spikekit {

// Seeded RNG wrapper; every stochastic choice in the toolkit flows from one
// of these so a (config, seed) pair replays exactly.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        std::uniform_int_distribution<int64_t> d(lo, hi);
        return d(gen_);
    }

    float uniform(float lo = 0.0f, float hi = 1.0f) {
        std::uniform_real_distribution<float> d(lo, hi);
        return d(gen_);
    }

    float normal(float mean = 0.0f, float stddev = 1.0f) {
        std::normal_distribution<float> d(mean, stddev);
        return d(gen_);
    }

    // Normal draw resampled until within two standard deviations.
    float trunc_normal(float mean, float stddev) {
        for (;;) {
            float z = normal(0.0f, 1.0f);
            if (std::fabs(z) <= 2.0f) return mean + stddev * z;
        }
    }

    float bernoulli(float p) { return uniform() < p ? 1.0f : 0.0f; }

    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), int64_t{0});
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = uniform_int(0, i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        return idx;
    }

    // Derives an independent stream, e.g. per dataset epoch or sweep row.
    Rng fork(uint64_t salt) { return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ULL)); }

private:
    std::mt19937_64 gen_;
};

}  // namespace spikekit
