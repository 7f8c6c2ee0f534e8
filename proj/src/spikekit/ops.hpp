#pragma once

#include <optional>

#include "spikekit/tensor.hpp"

namespace spikekit {

// Dense float primitives. Every op is pure (returns a fresh tensor) and
// records a tape node whenever any tracked input participates, with the
// backward closure capturing whatever forward context it needs. Kernels may
// parallelise over independent output elements only, so results are
// identical for any thread count.

// ---- raw GEMM kernels (no tape; also used inside backward closures) ----
// c[M,N] += a[M,K] . b[K,N]
void gemm_nn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);
// c[M,N] += a[M,K] . b[N,K]^T
void gemm_nt(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);
// c[M,N] += a[K,M]^T . b[K,N]
void gemm_tn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);

// ---- layout ----
DenseTensor reshape(const DenseTensor& x, const Shape& new_shape);  // free; same tape value
DenseTensor transpose2d(const DenseTensor& x);
// [G0.., N, D] -> [G0..*H, N, D/H]: contiguous head chunks of the last axis
// become separate matrices ordered (group, head).
DenseTensor split_heads(const DenseTensor& x, int64_t heads);
DenseTensor merge_heads(const DenseTensor& x, int64_t heads);  // inverse of split_heads
// x viewed as [G, N, D]; picks rows `idx` of each group -> [G, |idx|, D].
DenseTensor gather_tokens(const DenseTensor& x, int64_t groups, int64_t n, int64_t d,
                          const std::vector<int64_t>& idx);

// ---- elementwise / broadcast ----
DenseTensor add(const DenseTensor& a, const DenseTensor& b);
DenseTensor mul(const DenseTensor& a, const DenseTensor& b);
DenseTensor iand(const DenseTensor& r, const DenseTensor& s);  // r.(1-s), binary-preserving join
DenseTensor scale(const DenseTensor& x, float c);
DenseTensor scale_by_param(const DenseTensor& x, const DenseTensor& s);  // s: tracked scalar [1]
// x viewed as [G, R] with row vector r[R] added to every group row.
DenseTensor add_rows(const DenseTensor& x, const DenseTensor& r);
DenseTensor relu(const DenseTensor& x);
DenseTensor leaky_relu(const DenseTensor& x, float slope);
DenseTensor gelu(const DenseTensor& x);
// Smooth spike primitive: 1/2 + atan(pi/2 * alpha * x)/pi; its derivative is
// the arctan surrogate alpha / (2 (1 + (pi/2 alpha x)^2)).
DenseTensor sigmoid_arctan(const DenseTensor& x, float alpha);
float surrogate_arctan_grad(float x, float alpha);

// ---- contractions ----
DenseTensor matmul(const DenseTensor& a, const DenseTensor& b);           // [M,K]x[K,N]
DenseTensor bmm(const DenseTensor& a, const DenseTensor& b);              // [G,M,K]x[G,K,N]
DenseTensor bmm_nt(const DenseTensor& a, const DenseTensor& b);           // [G,M,K]x[G,N,K]

// ---- structured ----
DenseTensor conv2d(const DenseTensor& x, const DenseTensor& w,
                   const DenseTensor* bias, int stride, int padding);
DenseTensor maxpool2d(const DenseTensor& x, int k, int stride);

struct BatchNormState {
    DenseTensor running_mean;  // [C]
    DenseTensor running_var;   // [C]
    float eps = 1e-5f;
    float momentum = 0.1f;
    explicit BatchNormState(int64_t channels = 0)
        : running_mean(DenseTensor::zeros({channels})), running_var(DenseTensor::full({channels}, 1.0f)) {}
};

// x viewed as [outer, C, inner]; gamma/beta are [C]. Training mode uses
// batch statistics and updates the running buffers in place; eval mode uses
// the running buffers. `valid`, when present, flags positions of the
// flattened [outer, inner] grid that contribute to statistics; the rest are
// zeroed on output (sparse batch norm).
DenseTensor batchnorm(const DenseTensor& x, int64_t outer, int64_t channels, int64_t inner,
                      const DenseTensor& gamma, const DenseTensor& beta, BatchNormState& state,
                      bool training, const std::vector<uint8_t>* valid = nullptr);

DenseTensor softmax_rows(const DenseTensor& x);  // softmax over the last axis
DenseTensor layernorm(const DenseTensor& x, const DenseTensor& gamma, const DenseTensor& beta,
                      float eps = 1e-6f);

// ---- reductions / losses ----
DenseTensor sum_all(const DenseTensor& x);                     // -> scalar [1]
DenseTensor mean_tokens(const DenseTensor& x, int64_t t, int64_t b, int64_t n, int64_t d);  // -> [b,d]
DenseTensor cross_entropy(const DenseTensor& logits, const std::vector<int64_t>& labels);
// Mean squared error over masked patches only (visible[p]=1 means patch p is
// excluded from the loss).
DenseTensor masked_patch_mse(const DenseTensor& pred, const DenseTensor& target,
                             const std::vector<uint8_t>& visible, int64_t batch, int64_t n,
                             int64_t patch_dim);

// ---- misc ----
void ensure_finite(const DenseTensor& x, const char* what);
Tape* tape_of(const DenseTensor& a);
Tape* tape_of(const DenseTensor& a, const DenseTensor& b);
Tape* tape_of(const DenseTensor& a, const DenseTensor& b, const DenseTensor& c);

}  // namespace spikekit
