#include "spikekit/spike_ops.hpp"

#include <bit>

namespace spikekit {

namespace {

void check_2d(const SpikeTensor& t, const char* what) {
    if (t.shape.size() != 2) throw ShapeError(std::string(what) + ": expected 2D, got " + shape_str(t.shape));
}

void check_inner(int64_t ak, int64_t bk, const char* what) {
    if (ak != bk)
        throw ShapeError(std::string(what) + ": inner extents disagree (" + std::to_string(ak) +
                         " vs " + std::to_string(bk) + ")");
}

}  // namespace

AccumTensor matmul_spike_nt(const SpikeTensor& a, const SpikeTensor& bt) {
    check_2d(a, "matmul_spike_nt/a");
    check_2d(bt, "matmul_spike_nt/bt");
    check_inner(a.shape[1], bt.shape[1], "matmul_spike_nt");
    const int64_t m = a.shape[0], n = bt.shape[0];
    const int64_t wpr = a.words_per_row();
    AccumTensor out = AccumTensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const uint64_t* ra = a.row(i);
        int32_t* dst = out.data.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const uint64_t* rb = bt.row(j);
            int64_t acc = 0;
            for (int64_t w = 0; w < wpr; ++w) acc += std::popcount(ra[w] & rb[w]);
            dst[j] = static_cast<int32_t>(acc);
        }
    }
    return out;
}

AccumTensor matmul_spike(const SpikeTensor& a, const SpikeTensor& b) {
    check_2d(a, "matmul_spike/a");
    check_2d(b, "matmul_spike/b");
    check_inner(a.shape[1], b.shape[0], "matmul_spike");
    return matmul_spike_nt(a, transpose_spike(b));
}

AccumTensor matmul_accum_spike(const AccumTensor& a, const SpikeTensor& b) {
    if (a.shape.size() != 2) throw ShapeError("matmul_accum_spike/a: expected 2D");
    check_2d(b, "matmul_accum_spike/b");
    check_inner(a.shape[1], b.shape[0], "matmul_accum_spike");
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    AccumTensor out = AccumTensor::zeros({m, n});
    // Walk the spike operand once; each firing b[kk][j] contributes the
    // column a[:,kk] into out[:,j] by plain addition.
    for (int64_t kk = 0; kk < k; ++kk) {
        const uint64_t* rb = b.row(kk);
        for (int64_t j = 0; j < n; ++j) {
            if (!((rb[j >> 6] >> (j & 63)) & 1u)) continue;
            for (int64_t i = 0; i < m; ++i) out.data[i * n + j] += a.data[i * k + kk];
        }
    }
    return out;
}

AccumTensor matmul_spike_accum(const SpikeTensor& a, const AccumTensor& b) {
    check_2d(a, "matmul_spike_accum/a");
    if (b.shape.size() != 2) throw ShapeError("matmul_spike_accum/b: expected 2D");
    check_inner(a.shape[1], b.shape[0], "matmul_spike_accum");
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    AccumTensor out = AccumTensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const uint64_t* ra = a.row(i);
        int32_t* dst = out.data.data() + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            if (!((ra[kk >> 6] >> (kk & 63)) & 1u)) continue;
            const int32_t* rb = b.data.data() + kk * n;
            for (int64_t j = 0; j < n; ++j) dst[j] += rb[j];
        }
    }
    return out;
}

SpikeTensor transpose_spike(const SpikeTensor& a) {
    check_2d(a, "transpose_spike");
    SpikeTensor t = SpikeTensor::zeros({a.shape[1], a.shape[0]});
    for (int64_t i = 0; i < a.shape[0]; ++i)
        for (int64_t j = 0; j < a.shape[1]; ++j)
            if (a.get(i, j)) t.set(j, i, 1);
    return t;
}

SpikeTensor iand_spike(const SpikeTensor& r, const SpikeTensor& s) {
    check_same_shape(r.shape, s.shape, "iand_spike");
    SpikeTensor out = SpikeTensor::zeros(r.shape);
    // r's tail bits are zero, so ANDing keeps the tail invariant intact.
    for (size_t w = 0; w < out.words.size(); ++w) out.words[w] = r.words[w] & ~s.words[w];
    return out;
}

SpikeTensor upsample_nearest(const SpikeTensor& m, int factor) {
    if (factor != 2 && factor != 4 && factor != 8)
        throw UsageError("upsample_nearest: factor must be 2, 4 or 8");
    if (m.shape.size() < 2) throw ShapeError("upsample_nearest: need at least 2 axes");
    const int64_t h = m.shape[m.shape.size() - 2];
    const int64_t w = m.shape.back();
    int64_t planes = 1;
    for (size_t i = 0; i + 2 < m.shape.size(); ++i) planes *= m.shape[i];

    Shape out_shape = m.shape;
    out_shape[out_shape.size() - 2] = h * factor;
    out_shape.back() = w * factor;
    SpikeTensor out = SpikeTensor::zeros(out_shape);

    for (int64_t p = 0; p < planes; ++p)
        for (int64_t y = 0; y < h * factor; ++y) {
            const int64_t src_row = p * h + y / factor;
            const int64_t dst_row = p * h * factor + y;
            for (int64_t x = 0; x < w * factor; ++x)
                if (m.get(src_row, x / factor)) out.set(dst_row, x, 1);
        }
    return out;
}

int64_t sop_count(const SpikeTensor& gate, int64_t fanout) {
    return gate.count_ones() * fanout;
}

}  // namespace spikekit
