#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spikekit/error.hpp"
#include "spikekit/rng.hpp"
#include "spikekit/tape.hpp"

namespace spikekit {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
void check_same_shape(const Shape& a, const Shape& b, const char* what);

// Float tensor. When `node != kNoNode` the tensor is a value on `tape` and
// participates in reverse-mode differentiation; gradients live on the tape,
// and Parameter copies them out after backward (see layers.hpp).
struct DenseTensor {
    Shape shape;
    std::vector<float> data;
    Tape* tape = nullptr;
    NodeId node = kNoNode;

    DenseTensor() = default;
    DenseTensor(Shape s, std::vector<float> d);

    static DenseTensor zeros(const Shape& s);
    static DenseTensor full(const Shape& s, float v);
    static DenseTensor randn(const Shape& s, Rng& rng, float stddev = 1.0f);
    static DenseTensor rand_uniform(const Shape& s, Rng& rng, float lo, float hi);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    float& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    bool tracked() const { return tape != nullptr && node != kNoNode; }
    void detach() { tape = nullptr; node = kNoNode; }

    bool all_finite() const;
    bool is_binary() const;       // every element exactly 0 or 1
    bool is_nonneg_integer() const;
};

// Binary {0,1} tensor, bit-packed in 64-bit words along the last axis.
// Each row (all leading axes flattened) starts at a word boundary and tail
// bits are zero, which keeps them neutral under AND. Carries the same
// tape/node identity as the float view of the same value.
struct SpikeTensor {
    Shape shape;
    std::vector<uint64_t> words;
    Tape* tape = nullptr;
    NodeId node = kNoNode;

    SpikeTensor() = default;

    static SpikeTensor zeros(const Shape& s);
    // Validates the input is exactly {0,1} and packs it.
    static SpikeTensor pack(const DenseTensor& x);
    static SpikeTensor bernoulli(const Shape& s, Rng& rng, float p);

    DenseTensor unpack() const;   // float view, same tape/node

    int64_t numel() const { return spikekit::numel(shape); }
    int64_t rows() const;                 // product of leading axes
    int64_t row_len() const;              // last axis extent
    int64_t words_per_row() const { return (row_len() + 63) / 64; }
    const uint64_t* row(int64_t r) const { return words.data() + r * words_per_row(); }
    uint64_t* row(int64_t r) { return words.data() + r * words_per_row(); }

    int get(int64_t r, int64_t c) const {
        return static_cast<int>((row(r)[c >> 6] >> (c & 63)) & 1u);
    }
    void set(int64_t r, int64_t c, int v);

    int64_t count_ones() const;
    double firing_rate() const;   // fraction of ones, in [0,1]
    bool tracked() const { return tape != nullptr && node != kNoNode; }
};

// Integer accumulator tensor for spike matmul results; 32-bit signed is
// ample at desk scale (N·d well below 2^31).
struct AccumTensor {
    Shape shape;
    std::vector<int32_t> data;

    AccumTensor() = default;
    static AccumTensor zeros(const Shape& s);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int32_t& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    int32_t at(int64_t i) const { return data[static_cast<size_t>(i)]; }

    DenseTensor to_dense() const;  // exact: desk-scale counts fit float32
};

}  // namespace spikekit
