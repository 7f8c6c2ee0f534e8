#include "spikekit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "spikekit/parallel.hpp"

namespace spikekit {

namespace {

constexpr double kPi = 3.14159265358979323846;

DenseTensor tracked(DenseTensor out, Tape* t, std::vector<NodeId> parents, Tape::BackwardFn fn) {
    if (t != nullptr) {
        out.tape = t;
        out.node = t->record(out.numel(), std::move(parents), std::move(fn));
    }
    return out;
}

void axpy(int64_t n, float a, const float* x, float* y) {
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

Tape* tape_of(const DenseTensor& a) { return a.tracked() ? a.tape : nullptr; }

Tape* tape_of(const DenseTensor& a, const DenseTensor& b) {
    Tape* ta = tape_of(a);
    Tape* tb = tape_of(b);
    if (ta && tb && ta != tb) throw UsageError("operands recorded on different tapes");
    return ta ? ta : tb;
}

void gemm_nn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            float* ci = c + i * n;
            const float* ai = a + i * k;
            for (int64_t kk = 0; kk < k; ++kk) axpy(n, ai[kk], b + kk * n, ci);
        }
    });
}

void gemm_nt(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const float* ai = a + i * k;
            float* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const float* bj = b + j * k;
                float acc = 0.0f;
                for (int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
                ci[j] += acc;
            }
        }
    });
}

void gemm_tn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            float* ci = c + i * n;
            for (int64_t kk = 0; kk < k; ++kk) axpy(n, a[kk * m + i], b + kk * n, ci);
        }
    });
}

// ---------------------------------------------------------------- layout --

DenseTensor reshape(const DenseTensor& x, const Shape& new_shape) {
    if (numel(new_shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape) + " -> " + shape_str(new_shape) +
                         " changes element count");
    DenseTensor out = x;  // same data order, same tape value
    out.shape = new_shape;
    return out;
}

DenseTensor transpose2d(const DenseTensor& x) {
    if (x.shape.size() != 2) throw ShapeError("transpose2d: expected 2D");
    const int64_t m = x.shape[0], n = x.shape[1];
    DenseTensor out = DenseTensor::zeros({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data[j * m + i] = x.data[i * n + j];
    return tracked(std::move(out), tape_of(x), {x.node},
                   [m, n, px = x.node](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const auto& g = tp.grad(self);
                       auto& gx = tp.grad_accum(px);
                       for (int64_t i = 0; i < m; ++i)
                           for (int64_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
                   });
}

DenseTensor split_heads(const DenseTensor& x, int64_t heads) {
    if (x.shape.size() < 2) throw ShapeError("split_heads: need at least 2 axes");
    const int64_t d_model = x.shape.back();
    const int64_t n = x.shape[x.shape.size() - 2];
    if (d_model % heads != 0) throw ShapeError("split_heads: dim not divisible by head count");
    const int64_t g = x.numel() / (n * d_model);
    const int64_t d = d_model / heads;
    DenseTensor out = DenseTensor::zeros({g * heads, n, d});
    for (int64_t gi = 0; gi < g; ++gi)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < n; ++i)
                std::memcpy(out.data.data() + ((gi * heads + h) * n + i) * d,
                            x.data.data() + (gi * n + i) * d_model + h * d,
                            static_cast<size_t>(d) * sizeof(float));
    return tracked(std::move(out), tape_of(x), {x.node},
                   [g, heads, n, d, d_model, px = x.node](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const auto& gr = tp.grad(self);
                       auto& gx = tp.grad_accum(px);
                       for (int64_t gi = 0; gi < g; ++gi)
                           for (int64_t h = 0; h < heads; ++h)
                               for (int64_t i = 0; i < n; ++i)
                                   for (int64_t c = 0; c < d; ++c)
                                       gx[(gi * n + i) * d_model + h * d + c] +=
                                           gr[((gi * heads + h) * n + i) * d + c];
                   });
}

DenseTensor merge_heads(const DenseTensor& x, int64_t heads) {
    if (x.shape.size() != 3) throw ShapeError("merge_heads: expected [G*H, N, d]");
    const int64_t gh = x.shape[0], n = x.shape[1], d = x.shape[2];
    if (gh % heads != 0) throw ShapeError("merge_heads: leading extent not divisible by heads");
    const int64_t g = gh / heads, d_model = d * heads;
    DenseTensor out = DenseTensor::zeros({g, n, d_model});
    for (int64_t gi = 0; gi < g; ++gi)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < n; ++i)
                std::memcpy(out.data.data() + (gi * n + i) * d_model + h * d,
                            x.data.data() + ((gi * heads + h) * n + i) * d,
                            static_cast<size_t>(d) * sizeof(float));
    return tracked(std::move(out), tape_of(x), {x.node},
                   [g, heads, n, d, d_model, px = x.node](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const auto& gr = tp.grad(self);
                       auto& gx = tp.grad_accum(px);
                       for (int64_t gi = 0; gi < g; ++gi)
                           for (int64_t h = 0; h < heads; ++h)
                               for (int64_t i = 0; i < n; ++i)
                                   for (int64_t c = 0; c < d; ++c)
                                       gx[((gi * heads + h) * n + i) * d + c] +=
                                           gr[(gi * n + i) * d_model + h * d + c];
                   });
}

DenseTensor gather_tokens(const DenseTensor& x, int64_t groups, int64_t n, int64_t d,
                          const std::vector<int64_t>& idx) {
    if (x.numel() != groups * n * d) throw ShapeError("gather_tokens: view mismatch");
    for (int64_t i : idx)
        if (i < 0 || i >= n) throw UsageError("gather_tokens: index out of range");
    const int64_t nv = static_cast<int64_t>(idx.size());
    DenseTensor out = DenseTensor::zeros({groups, nv, d});
    for (int64_t g = 0; g < groups; ++g)
        for (int64_t i = 0; i < nv; ++i)
            std::memcpy(out.data.data() + (g * nv + i) * d, x.data.data() + (g * n + idx[i]) * d,
                        static_cast<size_t>(d) * sizeof(float));
    return tracked(std::move(out), tape_of(x), {x.node},
                   [groups, n, d, idx, px = x.node](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const auto& g = tp.grad(self);
                       auto& gx = tp.grad_accum(px);
                       const int64_t nv = static_cast<int64_t>(idx.size());
                       for (int64_t gi = 0; gi < groups; ++gi)
                           for (int64_t i = 0; i < nv; ++i)
                               for (int64_t c = 0; c < d; ++c)
                                   gx[(gi * n + idx[i]) * d + c] += g[(gi * nv + i) * d + c];
                   });
}

// ----------------------------------------------------------- elementwise --

DenseTensor add(const DenseTensor& a, const DenseTensor& b) {
    check_same_shape(a.shape, b.shape, "add");
    DenseTensor out = a;
    out.detach();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return tracked(std::move(out), tape_of(a, b), {a.node, b.node},
                   [pa = a.node, pb = b.node](Tape& tp, NodeId self) {
                       const auto& g = tp.grad(self);
                       if (pa >= 0) {
                           auto& ga = tp.grad_accum(pa);
                           for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                       if (pb >= 0) {
                           auto& gb = tp.grad_accum(pb);
                           for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                       }
                   });
}

DenseTensor mul(const DenseTensor& a, const DenseTensor& b) {
    check_same_shape(a.shape, b.shape, "mul");
    DenseTensor out = a;
    out.detach();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return tracked(std::move(out), tape_of(a, b), {a.node, b.node},
                   [pa = a.node, pb = b.node, da = a.data, db = b.data](Tape& tp, NodeId self) {
                       const auto& g = tp.grad(self);
                       if (pa >= 0) {
                           auto& ga = tp.grad_accum(pa);
                           for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * db[i];
                       }
                       if (pb >= 0) {
                           auto& gb = tp.grad_accum(pb);
                           for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * da[i];
                       }
                   });
}

DenseTensor iand(const DenseTensor& r, const DenseTensor& s) {
    check_same_shape(r.shape, s.shape, "iand");
    DenseTensor out = DenseTensor::zeros(r.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = r.data[i] * (1.0f - s.data[i]);
    return tracked(std::move(out), tape_of(r, s), {r.node, s.node},
                   [pr = r.node, ps = s.node, dr = r.data, ds = s.data](Tape& tp, NodeId self) {
                       const auto& g = tp.grad(self);
                       if (pr >= 0) {
                           auto& gr = tp.grad_accum(pr);
                           for (size_t i = 0; i < g.size(); ++i) gr[i] += g[i] * (1.0f - ds[i]);
                       }
                       if (ps >= 0) {
                           auto& gs = tp.grad_accum(ps);
                           for (size_t i = 0; i < g.size(); ++i) gs[i] -= g[i] * dr[i];
                       }
                   });
}

DenseTensor scale(const DenseTensor& x, float c) {
    DenseTensor out = x;
    out.detach();
    for (float& v : out.data) v *= c;
    return tracked(std::move(out), tape_of(x), {x.node}, [px = x.node, c](Tape& tp, NodeId self) {
        if (px < 0) return;
        const auto& g = tp.grad(self);
        auto& gx = tp.grad_accum(px);
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    });
}

DenseTensor scale_by_param(const DenseTensor& x, const DenseTensor& s) {
    if (s.numel() != 1) throw ShapeError("scale_by_param: scale must be a single element");
    const float c = s.data[0];
    DenseTensor out = x;
    out.detach();
    for (float& v : out.data) v *= c;
    return tracked(std::move(out), tape_of(x, s), {x.node, s.node},
                   [px = x.node, ps = s.node, c, dx = x.data](Tape& tp, NodeId self) {
                       const auto& g = tp.grad(self);
                       if (px >= 0) {
                           auto& gx = tp.grad_accum(px);
                           for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
                       }
                       if (ps >= 0) {
                           double acc = 0.0;
                           for (size_t i = 0; i < g.size(); ++i) acc += double(g[i]) * dx[i];
                           tp.grad_accum(ps)[0] += static_cast<float>(acc);
                       }
                   });
}

DenseTensor add_rows(const DenseTensor& x, const DenseTensor& r) {
    const int64_t rl = r.numel();
    if (rl == 0 || x.numel() % rl != 0) throw ShapeError("add_rows: row length does not divide input");
    const int64_t g = x.numel() / rl;
    DenseTensor out = x;
    out.detach();
    for (int64_t gi = 0; gi < g; ++gi)
        for (int64_t j = 0; j < rl; ++j) out.data[gi * rl + j] += r.data[j];
    return tracked(std::move(out), tape_of(x, r), {x.node, r.node},
                   [px = x.node, pr = r.node, g, rl](Tape& tp, NodeId self) {
                       const auto& gr = tp.grad(self);
                       if (px >= 0) {
                           auto& gx = tp.grad_accum(px);
                           for (size_t i = 0; i < gr.size(); ++i) gx[i] += gr[i];
                       }
                       if (pr >= 0) {
                           auto& grow = tp.grad_accum(pr);
                           for (int64_t gi = 0; gi < g; ++gi)
                               for (int64_t j = 0; j < rl; ++j) grow[j] += gr[gi * rl + j];
                       }
                   });
}

namespace {

template <typename F, typename DF>
DenseTensor unary_op(const DenseTensor& x, F f, DF df) {
    DenseTensor out = DenseTensor::zeros(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) out.data[i] = f(x.data[i]);
    return tracked(std::move(out), tape_of(x), {x.node},
                   [px = x.node, dx = x.data, df](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const auto& g = tp.grad(self);
                       auto& gx = tp.grad_accum(px);
                       for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(dx[i]);
                   });
}

}  // namespace

DenseTensor relu(const DenseTensor& x) {
    return unary_op(
        x, [](float v) { return v > 0.0f ? v : 0.0f; },
        [](float v) { return v > 0.0f ? 1.0f : 0.0f; });
}

DenseTensor leaky_relu(const DenseTensor& x, float slope) {
    return unary_op(
        x, [slope](float v) { return v > 0.0f ? v : slope * v; },
        [slope](float v) { return v > 0.0f ? 1.0f : slope; });
}

DenseTensor gelu(const DenseTensor& x) {
    return unary_op(
        x, [](float v) { return 0.5f * v * (1.0f + std::erf(v * 0.70710678f)); },
        [](float v) {
            const float cdf = 0.5f * (1.0f + std::erf(v * 0.70710678f));
            const float pdf = 0.39894228f * std::exp(-0.5f * v * v);
            return cdf + v * pdf;
        });
}

float surrogate_arctan_grad(float x, float alpha) {
    const float u = static_cast<float>(kPi / 2.0) * alpha * x;
    return alpha / (2.0f * (1.0f + u * u));
}

DenseTensor sigmoid_arctan(const DenseTensor& x, float alpha) {
    return unary_op(
        x,
        [alpha](float v) {
            return 0.5f + static_cast<float>(std::atan(kPi / 2.0 * alpha * v) / kPi);
        },
        [alpha](float v) { return surrogate_arctan_grad(v, alpha); });
}

// ------------------------------------------------------------ contraction --

DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2) throw ShapeError("matmul: expected 2D operands");
    if (a.shape[1] != b.shape[0])
        throw ShapeError("matmul: inner extents disagree: " + shape_str(a.shape) + " x " +
                         shape_str(b.shape));
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    DenseTensor out = DenseTensor::zeros({m, n});
    gemm_nn(m, n, k, a.data.data(), b.data.data(), out.data.data());
    return tracked(std::move(out), tape_of(a, b), {a.node, b.node},
                   [pa = a.node, pb = b.node, da = a.data, db = b.data, m, n, k](Tape& tp,
                                                                                 NodeId self) {
                       const auto& g = tp.grad(self);
                       if (pa >= 0) gemm_nt(m, k, n, g.data(), db.data(), tp.grad_accum(pa).data());
                       if (pb >= 0) gemm_tn(k, n, m, da.data(), g.data(), tp.grad_accum(pb).data());
                   });
}

namespace {

void check_bmm(const DenseTensor& a, const DenseTensor& b, bool nt, const char* what) {
    if (a.shape.size() != 3 || b.shape.size() != 3)
        throw ShapeError(std::string(what) + ": expected 3D operands");
    if (a.shape[0] != b.shape[0]) throw ShapeError(std::string(what) + ": group extents disagree");
    const int64_t ak = a.shape[2];
    const int64_t bk = nt ? b.shape[2] : b.shape[1];
    if (ak != bk) throw ShapeError(std::string(what) + ": inner extents disagree");
}

}  // namespace

DenseTensor bmm(const DenseTensor& a, const DenseTensor& b) {
    check_bmm(a, b, false, "bmm");
    const int64_t g = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2];
    DenseTensor out = DenseTensor::zeros({g, m, n});
    for (int64_t gi = 0; gi < g; ++gi)
        gemm_nn(m, n, k, a.data.data() + gi * m * k, b.data.data() + gi * k * n,
                out.data.data() + gi * m * n);
    return tracked(std::move(out), tape_of(a, b), {a.node, b.node},
                   [pa = a.node, pb = b.node, da = a.data, db = b.data, g, m, n, k](Tape& tp,
                                                                                    NodeId self) {
                       const auto& gr = tp.grad(self);
                       for (int64_t gi = 0; gi < g; ++gi) {
                           const float* gg = gr.data() + gi * m * n;
                           if (pa >= 0)
                               gemm_nt(m, k, n, gg, db.data() + gi * k * n,
                                       tp.grad_accum(pa).data() + gi * m * k);
                           if (pb >= 0)
                               gemm_tn(k, n, m, da.data() + gi * m * k, gg,
                                       tp.grad_accum(pb).data() + gi * k * n);
                       }
                   });
}

DenseTensor bmm_nt(const DenseTensor& a, const DenseTensor& b) {
    check_bmm(a, b, true, "bmm_nt");
    const int64_t g = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[1];
    DenseTensor out = DenseTensor::zeros({g, m, n});
    for (int64_t gi = 0; gi < g; ++gi)
        gemm_nt(m, n, k, a.data.data() + gi * m * k, b.data.data() + gi * n * k,
                out.data.data() + gi * m * n);
    return tracked(std::move(out), tape_of(a, b), {a.node, b.node},
                   [pa = a.node, pb = b.node, da = a.data, db = b.data, g, m, n, k](Tape& tp,
                                                                                    NodeId self) {
                       const auto& gr = tp.grad(self);
                       for (int64_t gi = 0; gi < g; ++gi) {
                           const float* gg = gr.data() + gi * m * n;
                           if (pa >= 0)
                               gemm_nn(m, k, n, gg, db.data() + gi * n * k,
                                       tp.grad_accum(pa).data() + gi * m * k);
                           if (pb >= 0)
                               gemm_tn(n, k, m, da.data() + gi * m * k, gg,
                                       tp.grad_accum(pb).data() + gi * n * k);
                       }
                   });
}

// -------------------------------------------------------------- conv/pool --

namespace {

struct ConvDims {
    int64_t batch, cin, h, w, cout, kh, kw, oh, ow;
    int stride, pad;
};

ConvDims conv_dims(const DenseTensor& x, const DenseTensor& w, int stride, int pad) {
    if (x.shape.size() != 4 || w.shape.size() != 4)
        throw ShapeError("conv2d: expected x[B,C,H,W], w[O,C,kh,kw]");
    if (x.shape[1] != w.shape[1])
        throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape) + " vs " + shape_str(w.shape));
    if (stride < 1) throw UsageError("conv2d: stride must be positive");
    ConvDims d;
    d.batch = x.shape[0]; d.cin = x.shape[1]; d.h = x.shape[2]; d.w = x.shape[3];
    d.cout = w.shape[0];  d.kh = w.shape[2];  d.kw = w.shape[3];
    d.stride = stride;    d.pad = pad;
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw || d.oh <= 0 || d.ow <= 0)
        throw ShapeError("conv2d: non-positive output extent");
    return d;
}

// col: [cin*kh*kw, oh*ow] for one image.
void im2col(const float* x, const ConvDims& d, float* col) {
    const int64_t ohw = d.oh * d.ow;
    for (int64_t c = 0; c < d.cin; ++c)
        for (int64_t ki = 0; ki < d.kh; ++ki)
            for (int64_t kj = 0; kj < d.kw; ++kj) {
                float* dst = col + ((c * d.kh + ki) * d.kw + kj) * ohw;
                for (int64_t oy = 0; oy < d.oh; ++oy) {
                    const int64_t iy = oy * d.stride - d.pad + ki;
                    for (int64_t ox = 0; ox < d.ow; ++ox) {
                        const int64_t ix = ox * d.stride - d.pad + kj;
                        dst[oy * d.ow + ox] =
                            (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                                ? x[(c * d.h + iy) * d.w + ix]
                                : 0.0f;
                    }
                }
            }
}

void col2im_accum(const float* col, const ConvDims& d, float* gx) {
    const int64_t ohw = d.oh * d.ow;
    for (int64_t c = 0; c < d.cin; ++c)
        for (int64_t ki = 0; ki < d.kh; ++ki)
            for (int64_t kj = 0; kj < d.kw; ++kj) {
                const float* src = col + ((c * d.kh + ki) * d.kw + kj) * ohw;
                for (int64_t oy = 0; oy < d.oh; ++oy) {
                    const int64_t iy = oy * d.stride - d.pad + ki;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int64_t ox = 0; ox < d.ow; ++ox) {
                        const int64_t ix = ox * d.stride - d.pad + kj;
                        if (ix < 0 || ix >= d.w) continue;
                        gx[(c * d.h + iy) * d.w + ix] += src[oy * d.ow + ox];
                    }
                }
            }
}

}  // namespace

DenseTensor conv2d(const DenseTensor& x, const DenseTensor& w, const DenseTensor* bias, int stride,
                   int padding) {
    const ConvDims d = conv_dims(x, w, stride, padding);
    if (bias && bias->numel() != d.cout) throw ShapeError("conv2d: bias extent mismatch");
    const int64_t ckk = d.cin * d.kh * d.kw, ohw = d.oh * d.ow;
    DenseTensor out = DenseTensor::zeros({d.batch, d.cout, d.oh, d.ow});
    std::vector<float> col(static_cast<size_t>(ckk * ohw));
    for (int64_t b = 0; b < d.batch; ++b) {
        im2col(x.data.data() + b * d.cin * d.h * d.w, d, col.data());
        float* y = out.data.data() + b * d.cout * ohw;
        gemm_nn(d.cout, ohw, ckk, w.data.data(), col.data(), y);
        if (bias)
            for (int64_t o = 0; o < d.cout; ++o)
                for (int64_t i = 0; i < ohw; ++i) y[o * ohw + i] += bias->data[static_cast<size_t>(o)];
    }

    Tape* t = tape_of(x, w);
    if (bias) t = tape_of(x, *bias) ? tape_of(*bias) ? (t ? t : bias->tape) : t : t;
    std::vector<NodeId> parents{x.node, w.node, bias ? bias->node : kNoNode};
    return tracked(std::move(out), t, parents,
                   [d, ckk, ohw, px = x.node, pw = w.node, pb = bias ? bias->node : kNoNode,
                    dx = x.data, dw = w.data](Tape& tp, NodeId self) {
                       const auto& g = tp.grad(self);
                       std::vector<float> col(static_cast<size_t>(ckk * ohw));
                       std::vector<float> gcol;
                       for (int64_t b = 0; b < d.batch; ++b) {
                           const float* gy = g.data() + b * d.cout * ohw;
                           if (pw >= 0 || px >= 0)
                               im2col(dx.data() + b * d.cin * d.h * d.w, d, col.data());
                           if (pw >= 0)
                               gemm_nt(d.cout, ckk, ohw, gy, col.data(), tp.grad_accum(pw).data());
                           if (px >= 0) {
                               gcol.assign(static_cast<size_t>(ckk * ohw), 0.0f);
                               gemm_tn(ckk, ohw, d.cout, dw.data(), gy, gcol.data());
                               col2im_accum(gcol.data(), d,
                                            tp.grad_accum(px).data() + b * d.cin * d.h * d.w);
                           }
                           if (pb >= 0) {
                               auto& gb = tp.grad_accum(pb);
                               for (int64_t o = 0; o < d.cout; ++o) {
                                   float acc = 0.0f;
                                   for (int64_t i = 0; i < ohw; ++i) acc += gy[o * ohw + i];
                                   gb[static_cast<size_t>(o)] += acc;
                               }
                           }
                       }
                   });
}

DenseTensor maxpool2d(const DenseTensor& x, int k, int stride) {
    if (x.shape.size() != 4) throw ShapeError("maxpool2d: expected [B,C,H,W]");
    if (k < 1 || stride < 1) throw UsageError("maxpool2d: window and stride must be positive");
    const int64_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    if (h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0)
        throw ShapeError("maxpool2d: extents " + shape_str(x.shape) + " incompatible with k=" +
                         std::to_string(k) + " stride=" + std::to_string(stride));
    const int64_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    DenseTensor out = DenseTensor::zeros({b, c, oh, ow});
    std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
    for (int64_t bc = 0; bc < b * c; ++bc) {
        const float* src = x.data.data() + bc * h * w;
        float* dst = out.data.data() + bc * oh * ow;
        int64_t* am = argmax.data() + bc * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                float best = -std::numeric_limits<float>::infinity();
                int64_t best_at = 0;
                for (int64_t ki = 0; ki < k; ++ki)
                    for (int64_t kj = 0; kj < k; ++kj) {
                        const int64_t at = (oy * stride + ki) * w + ox * stride + kj;
                        if (src[at] > best) { best = src[at]; best_at = at; }
                    }
                dst[oy * ow + ox] = best;
                am[oy * ow + ox] = best_at;
            }
    }
    return tracked(std::move(out), tape_of(x), {x.node},
                   [px = x.node, argmax = std::move(argmax), bc = b * c, hw = h * w,
                    ohw = oh * ow](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const auto& g = tp.grad(self);
                       auto& gx = tp.grad_accum(px);
                       for (int64_t p = 0; p < bc; ++p)
                           for (int64_t i = 0; i < ohw; ++i)
                               gx[p * hw + argmax[p * ohw + i]] += g[p * ohw + i];
                   });
}

// -------------------------------------------------------------------- BN --

DenseTensor batchnorm(const DenseTensor& x, int64_t outer, int64_t channels, int64_t inner,
                      const DenseTensor& gamma, const DenseTensor& beta, BatchNormState& state,
                      bool training, const std::vector<uint8_t>* valid) {
    if (x.numel() != outer * channels * inner) throw ShapeError("batchnorm: view mismatch");
    if (gamma.numel() != channels || beta.numel() != channels ||
        state.running_mean.numel() != channels)
        throw ShapeError("batchnorm: channel extent mismatch");
    if (valid && static_cast<int64_t>(valid->size()) != outer * inner)
        throw ShapeError("batchnorm: validity mask must cover [outer, inner]");

    std::vector<float> mean(static_cast<size_t>(channels)), inv_std(static_cast<size_t>(channels));
    int64_t m = outer * inner;
    if (valid) {
        m = 0;
        for (uint8_t v : *valid) m += v ? 1 : 0;
        if (m == 0) throw UsageError("batchnorm: no valid positions");
    }

    if (training) {
        for (int64_t c = 0; c < channels; ++c) {
            double sum = 0.0, sq = 0.0;
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    if (valid && !(*valid)[static_cast<size_t>(o * inner + i)]) continue;
                    const double v = x.data[(o * channels + c) * inner + i];
                    sum += v;
                    sq += v * v;
                }
            const double mu = sum / static_cast<double>(m);
            const double var = std::max(0.0, sq / static_cast<double>(m) - mu * mu);
            mean[static_cast<size_t>(c)] = static_cast<float>(mu);
            inv_std[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + state.eps));
            state.running_mean.data[static_cast<size_t>(c)] =
                (1.0f - state.momentum) * state.running_mean.data[static_cast<size_t>(c)] +
                state.momentum * static_cast<float>(mu);
            state.running_var.data[static_cast<size_t>(c)] =
                (1.0f - state.momentum) * state.running_var.data[static_cast<size_t>(c)] +
                state.momentum * static_cast<float>(var);
        }
    } else {
        for (int64_t c = 0; c < channels; ++c) {
            mean[static_cast<size_t>(c)] = state.running_mean.data[static_cast<size_t>(c)];
            inv_std[static_cast<size_t>(c)] = 1.0f / std::sqrt(
                state.running_var.data[static_cast<size_t>(c)] + state.eps);
        }
    }

    DenseTensor out = DenseTensor::zeros(x.shape);
    std::vector<float> xhat(static_cast<size_t>(x.numel()));
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t c = 0; c < channels; ++c)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t at = (o * channels + c) * inner + i;
                if (valid && !(*valid)[static_cast<size_t>(o * inner + i)]) {
                    xhat[static_cast<size_t>(at)] = 0.0f;
                    out.data[static_cast<size_t>(at)] = 0.0f;
                    continue;
                }
                const float xh = (x.data[static_cast<size_t>(at)] - mean[static_cast<size_t>(c)]) *
                                 inv_std[static_cast<size_t>(c)];
                xhat[static_cast<size_t>(at)] = xh;
                out.data[static_cast<size_t>(at)] =
                    gamma.data[static_cast<size_t>(c)] * xh + beta.data[static_cast<size_t>(c)];
            }

    std::vector<uint8_t> valid_copy = valid ? *valid : std::vector<uint8_t>();
    return tracked(
        std::move(out), tape_of(tape_of(x, gamma) ? x : gamma, beta) ? tape_of(x, gamma) ? x : beta : x,
        {x.node, gamma.node, beta.node},
        [px = x.node, pg = gamma.node, pb = beta.node, xhat = std::move(xhat),
         inv_std = std::move(inv_std), gw = gamma.data, outer, channels, inner, m, training,
         valid_copy = std::move(valid_copy)](Tape& tp, NodeId self) {
            const auto& g = tp.grad(self);
            const bool has_mask = !valid_copy.empty();
            for (int64_t c = 0; c < channels; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < inner; ++i) {
                        if (has_mask && !valid_copy[static_cast<size_t>(o * inner + i)]) continue;
                        const int64_t at = (o * channels + c) * inner + i;
                        sum_dy += g[static_cast<size_t>(at)];
                        sum_dy_xhat += double(g[static_cast<size_t>(at)]) * xhat[static_cast<size_t>(at)];
                    }
                if (pg >= 0) tp.grad_accum(pg)[static_cast<size_t>(c)] += static_cast<float>(sum_dy_xhat);
                if (pb >= 0) tp.grad_accum(pb)[static_cast<size_t>(c)] += static_cast<float>(sum_dy);
                if (px >= 0) {
                    auto& gx = tp.grad_accum(px);
                    const float k1 = gw[static_cast<size_t>(c)] * inv_std[static_cast<size_t>(c)];
                    const float mean_dy = static_cast<float>(sum_dy / static_cast<double>(m));
                    const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(m));
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t i = 0; i < inner; ++i) {
                            if (has_mask && !valid_copy[static_cast<size_t>(o * inner + i)]) continue;
                            const int64_t at = (o * channels + c) * inner + i;
                            const float dy = g[static_cast<size_t>(at)];
                            gx[static_cast<size_t>(at)] +=
                                training ? k1 * (dy - mean_dy - xhat[static_cast<size_t>(at)] * mean_dy_xhat)
                                         : k1 * dy;
                        }
                }
            }
        });
}

// ---------------------------------------------------- softmax / layernorm --

DenseTensor softmax_rows(const DenseTensor& x) {
    if (x.shape.empty()) throw ShapeError("softmax_rows: scalar input");
    const int64_t cols = x.shape.back();
    const int64_t rows = x.numel() / cols;
    DenseTensor out = DenseTensor::zeros(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const float* src = x.data.data() + r * cols;
        float* dst = out.data.data() + r * cols;
        float mx = src[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < cols; ++j) { dst[j] = std::exp(src[j] - mx); sum += dst[j]; }
        const float inv = static_cast<float>(1.0 / sum);
        for (int64_t j = 0; j < cols; ++j) dst[j] *= inv;
    }
    return tracked(std::move(out), tape_of(x), {x.node},
                   [px = x.node, y = out.data, rows, cols](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const auto& g = tp.grad(self);
                       auto& gx = tp.grad_accum(px);
                       for (int64_t r = 0; r < rows; ++r) {
                           double dot = 0.0;
                           for (int64_t j = 0; j < cols; ++j)
                               dot += double(g[r * cols + j]) * y[r * cols + j];
                           for (int64_t j = 0; j < cols; ++j)
                               gx[r * cols + j] += y[r * cols + j] *
                                                   (g[r * cols + j] - static_cast<float>(dot));
                       }
                   });
}

DenseTensor layernorm(const DenseTensor& x, const DenseTensor& gamma, const DenseTensor& beta,
                      float eps) {
    if (x.shape.empty()) throw ShapeError("layernorm: scalar input");
    const int64_t cols = x.shape.back();
    const int64_t rows = x.numel() / cols;
    if (gamma.numel() != cols || beta.numel() != cols)
        throw ShapeError("layernorm: affine extent mismatch");
    DenseTensor out = DenseTensor::zeros(x.shape);
    std::vector<float> xhat(static_cast<size_t>(x.numel())), inv_std(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* src = x.data.data() + r * cols;
        double sum = 0.0, sq = 0.0;
        for (int64_t j = 0; j < cols; ++j) { sum += src[j]; sq += double(src[j]) * src[j]; }
        const double mu = sum / cols;
        const double var = std::max(0.0, sq / cols - mu * mu);
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_std[static_cast<size_t>(r)] = is;
        for (int64_t j = 0; j < cols; ++j) {
            const float xh = (src[j] - static_cast<float>(mu)) * is;
            xhat[static_cast<size_t>(r * cols + j)] = xh;
            out.data[static_cast<size_t>(r * cols + j)] =
                gamma.data[static_cast<size_t>(j)] * xh + beta.data[static_cast<size_t>(j)];
        }
    }
    return tracked(
        std::move(out), tape_of(tape_of(x, gamma) ? x : gamma, beta) ? x.tape ? x.tape : gamma.tape ? gamma.tape : beta.tape : nullptr,
        {x.node, gamma.node, beta.node},
        [px = x.node, pg = gamma.node, pb = beta.node, xhat = std::move(xhat),
         inv_std = std::move(inv_std), gw = gamma.data, rows, cols](Tape& tp, NodeId self) {
            const auto& g = tp.grad(self);
            for (int64_t r = 0; r < rows; ++r) {
                double sum_gy = 0.0, sum_gy_xhat = 0.0;
                for (int64_t j = 0; j < cols; ++j) {
                    const double gyj = double(g[r * cols + j]) * gw[static_cast<size_t>(j)];
                    sum_gy += gyj;
                    sum_gy_xhat += gyj * xhat[static_cast<size_t>(r * cols + j)];
                }
                if (px >= 0) {
                    auto& gx = tp.grad_accum(px);
                    const float mg = static_cast<float>(sum_gy / cols);
                    const float mgx = static_cast<float>(sum_gy_xhat / cols);
                    for (int64_t j = 0; j < cols; ++j) {
                        const float gyj = g[r * cols + j] * gw[static_cast<size_t>(j)];
                        gx[r * cols + j] += inv_std[static_cast<size_t>(r)] *
                                            (gyj - mg - xhat[static_cast<size_t>(r * cols + j)] * mgx);
                    }
                }
            }
            if (pg >= 0 || pb >= 0) {
                for (int64_t j = 0; j < cols; ++j) {
                    double dg = 0.0, db = 0.0;
                    for (int64_t r = 0; r < rows; ++r) {
                        dg += double(g[r * cols + j]) * xhat[static_cast<size_t>(r * cols + j)];
                        db += g[r * cols + j];
                    }
                    if (pg >= 0) tp.grad_accum(pg)[static_cast<size_t>(j)] += static_cast<float>(dg);
                    if (pb >= 0) tp.grad_accum(pb)[static_cast<size_t>(j)] += static_cast<float>(db);
                }
            }
        });
}

// ---------------------------------------------------- reductions / losses --

DenseTensor sum_all(const DenseTensor& x) {
    double acc = 0.0;
    for (float v : x.data) acc += v;
    DenseTensor out({1}, {static_cast<float>(acc)});
    return tracked(std::move(out), tape_of(x), {x.node},
                   [px = x.node, n = x.numel()](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const float g = tp.grad(self)[0];
                       auto& gx = tp.grad_accum(px);
                       for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
                   });
}

DenseTensor mean_tokens(const DenseTensor& x, int64_t t, int64_t b, int64_t n, int64_t d) {
    if (x.numel() != t * b * n * d) throw ShapeError("mean_tokens: view mismatch");
    DenseTensor out = DenseTensor::zeros({b, d});
    const double inv = 1.0 / static_cast<double>(t * n);
    for (int64_t ti = 0; ti < t; ++ti)
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t di = 0; di < d; ++di)
                    out.data[static_cast<size_t>(bi * d + di)] +=
                        static_cast<float>(x.data[static_cast<size_t>((((ti * b) + bi) * n + ni) * d + di)] * inv);
    return tracked(std::move(out), tape_of(x), {x.node},
                   [px = x.node, t, b, n, d, inv](Tape& tp, NodeId self) {
                       if (px < 0) return;
                       const auto& g = tp.grad(self);
                       auto& gx = tp.grad_accum(px);
                       for (int64_t ti = 0; ti < t; ++ti)
                           for (int64_t bi = 0; bi < b; ++bi)
                               for (int64_t ni = 0; ni < n; ++ni)
                                   for (int64_t di = 0; di < d; ++di)
                                       gx[static_cast<size_t>((((ti * b) + bi) * n + ni) * d + di)] +=
                                           static_cast<float>(g[static_cast<size_t>(bi * d + di)] * inv);
                   });
}

DenseTensor cross_entropy(const DenseTensor& logits, const std::vector<int64_t>& labels) {
    if (logits.shape.size() != 2) throw ShapeError("cross_entropy: expected [B, classes]");
    const int64_t b = logits.shape[0], c = logits.shape[1];
    if (static_cast<int64_t>(labels.size()) != b)
        throw ShapeError("cross_entropy: label count mismatch");
    for (int64_t y : labels)
        if (y < 0 || y >= c) throw UsageError("cross_entropy: label out of range");

    std::vector<float> probs(static_cast<size_t>(b * c));
    double loss = 0.0;
    for (int64_t i = 0; i < b; ++i) {
        const float* z = logits.data.data() + i * c;
        float mx = z[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(double(z[j]) - mx);
        const double logz = mx + std::log(sum);
        loss += logz - z[labels[static_cast<size_t>(i)]];
        for (int64_t j = 0; j < c; ++j)
            probs[static_cast<size_t>(i * c + j)] = static_cast<float>(std::exp(double(z[j]) - logz));
    }
    DenseTensor out({1}, {static_cast<float>(loss / b)});
    return tracked(std::move(out), tape_of(logits), {logits.node},
                   [pl = logits.node, probs = std::move(probs), labels, b, c](Tape& tp, NodeId self) {
                       if (pl < 0) return;
                       const float g = tp.grad(self)[0];
                       auto& gx = tp.grad_accum(pl);
                       const float inv_b = 1.0f / static_cast<float>(b);
                       for (int64_t i = 0; i < b; ++i)
                           for (int64_t j = 0; j < c; ++j) {
                               float p = probs[static_cast<size_t>(i * c + j)];
                               if (j == labels[static_cast<size_t>(i)]) p -= 1.0f;
                               gx[static_cast<size_t>(i * c + j)] += g * p * inv_b;
                           }
                   });
}

DenseTensor masked_patch_mse(const DenseTensor& pred, const DenseTensor& target,
                             const std::vector<uint8_t>& visible, int64_t batch, int64_t n,
                             int64_t patch_dim) {
    if (pred.numel() != batch * n * patch_dim || target.numel() != pred.numel())
        throw ShapeError("masked_patch_mse: view mismatch");
    if (static_cast<int64_t>(visible.size()) != batch * n)
        throw ShapeError("masked_patch_mse: visibility mask must cover [batch, tokens]");
    int64_t masked = 0;
    for (uint8_t v : visible) masked += v ? 0 : 1;
    if (masked == 0) throw UsageError("masked_patch_mse: no masked patches");

    const double denom = static_cast<double>(masked) * static_cast<double>(patch_dim);
    double loss = 0.0;
    for (int64_t p = 0; p < batch * n; ++p) {
        if (visible[static_cast<size_t>(p)]) continue;
        const float* a = pred.data.data() + p * patch_dim;
        const float* t = target.data.data() + p * patch_dim;
        for (int64_t j = 0; j < patch_dim; ++j) {
            const double e = double(a[j]) - t[j];
            loss += e * e;
        }
    }
    DenseTensor out({1}, {static_cast<float>(loss / denom)});
    return tracked(std::move(out), tape_of(pred), {pred.node},
                   [pp = pred.node, dp = pred.data, dt = target.data, visible, batch, n, patch_dim,
                    denom](Tape& tp, NodeId self) {
                       if (pp < 0) return;
                       const float g = tp.grad(self)[0];
                       auto& gx = tp.grad_accum(pp);
                       for (int64_t p = 0; p < batch * n; ++p) {
                           if (visible[static_cast<size_t>(p)]) continue;
                           for (int64_t j = 0; j < patch_dim; ++j) {
                               const size_t at = static_cast<size_t>(p * patch_dim + j);
                               gx[at] += static_cast<float>(2.0 * (double(dp[at]) - dt[at]) / denom) * g;
                           }
                       }
                   });
}

void ensure_finite(const DenseTensor& x, const char* what) {
    if (!x.all_finite()) throw NumericError(std::string(what) + ": non-finite values");
}

}  // namespace spikekit
