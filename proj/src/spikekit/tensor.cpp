#include "spikekit/tensor.hpp"

#include <bit>
#include <cmath>
#include <sstream>

namespace spikekit {

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e < 0) throw ShapeError("negative extent in " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void check_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b)
        throw ShapeError(std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
}

DenseTensor::DenseTensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (spikekit::numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
}

DenseTensor DenseTensor::zeros(const Shape& s) {
    DenseTensor t;
    t.shape = s;
    t.data.assign(static_cast<size_t>(spikekit::numel(s)), 0.0f);
    return t;
}

DenseTensor DenseTensor::full(const Shape& s, float v) {
    DenseTensor t = zeros(s);
    for (float& x : t.data) x = v;
    return t;
}

DenseTensor DenseTensor::randn(const Shape& s, Rng& rng, float stddev) {
    DenseTensor t = zeros(s);
    for (float& x : t.data) x = rng.normal(0.0f, stddev);
    return t;
}

DenseTensor DenseTensor::rand_uniform(const Shape& s, Rng& rng, float lo, float hi) {
    DenseTensor t = zeros(s);
    for (float& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

bool DenseTensor::all_finite() const {
    for (float x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

bool DenseTensor::is_binary() const {
    for (float x : data)
        if (x != 0.0f && x != 1.0f) return false;
    return true;
}

bool DenseTensor::is_nonneg_integer() const {
    for (float x : data)
        if (x < 0.0f || x != std::floor(x)) return false;
    return true;
}

SpikeTensor SpikeTensor::zeros(const Shape& s) {
    SpikeTensor t;
    t.shape = s;
    if (s.empty()) throw ShapeError("spike tensor needs at least one axis");
    t.words.assign(static_cast<size_t>(t.rows() * t.words_per_row()), 0);
    return t;
}

SpikeTensor SpikeTensor::pack(const DenseTensor& x) {
    SpikeTensor t = zeros(x.shape);
    const int64_t n = t.row_len();
    const int64_t wpr = t.words_per_row();
    for (int64_t r = 0; r < t.rows(); ++r) {
        uint64_t* w = t.words.data() + r * wpr;
        const float* src = x.data.data() + r * n;
        for (int64_t c = 0; c < n; ++c) {
            const float v = src[c];
            if (v == 1.0f)
                w[c >> 6] |= (uint64_t{1} << (c & 63));
            else if (v != 0.0f)
                throw UsageError("pack: value " + std::to_string(v) + " is not binary");
        }
    }
    t.tape = x.tape;
    t.node = x.node;
    return t;
}

SpikeTensor SpikeTensor::bernoulli(const Shape& s, Rng& rng, float p) {
    SpikeTensor t = zeros(s);
    const int64_t n = t.row_len();
    for (int64_t r = 0; r < t.rows(); ++r)
        for (int64_t c = 0; c < n; ++c)
            if (rng.uniform() < p) t.row(r)[c >> 6] |= (uint64_t{1} << (c & 63));
    return t;
}

DenseTensor SpikeTensor::unpack() const {
    DenseTensor x = DenseTensor::zeros(shape);
    const int64_t n = row_len();
    for (int64_t r = 0; r < rows(); ++r) {
        float* dst = x.data.data() + r * n;
        const uint64_t* w = row(r);
        for (int64_t c = 0; c < n; ++c)
            dst[c] = static_cast<float>((w[c >> 6] >> (c & 63)) & 1u);
    }
    x.tape = tape;
    x.node = node;
    return x;
}

int64_t SpikeTensor::rows() const {
    int64_t r = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
    return r;
}

int64_t SpikeTensor::row_len() const {
    return shape.empty() ? 0 : shape.back();
}

void SpikeTensor::set(int64_t r, int64_t c, int v) {
    uint64_t mask = uint64_t{1} << (c & 63);
    if (v)
        row(r)[c >> 6] |= mask;
    else
        row(r)[c >> 6] &= ~mask;
}

int64_t SpikeTensor::count_ones() const {
    int64_t n = 0;
    for (uint64_t w : words) n += std::popcount(w);
    return n;
}

double SpikeTensor::firing_rate() const {
    const int64_t total = numel();
    return total == 0 ? 0.0 : static_cast<double>(count_ones()) / static_cast<double>(total);
}

AccumTensor AccumTensor::zeros(const Shape& s) {
    AccumTensor t;
    t.shape = s;
    t.data.assign(static_cast<size_t>(spikekit::numel(s)), 0);
    return t;
}

DenseTensor AccumTensor::to_dense() const {
    DenseTensor x = DenseTensor::zeros(shape);
    for (size_t i = 0; i < data.size(); ++i) x.data[i] = static_cast<float>(data[i]);
    return x;
}

}  // namespace spikekit
