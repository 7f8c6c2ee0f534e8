#pragma once

#include "spikekit/tensor.hpp"

namespace spikekit {

// Bit-packed binary kernels. The spike matmuls run entirely on AND +
// popcount / gated integer adds; no float multiply is executed on these
// paths. All matrix ops below are 2D.
//
// Synaptic-operation accounting follows the event-driven convention: each
// nonzero value of the spike operand triggers one accumulate per output it
// fans out to, so the count equals firing_rate x dense MAC count exactly.

// a:[M,K] x b:[K,N] -> [M,N]; result[i][j] = sum_k a[i][k] AND b[k][j].
AccumTensor matmul_spike(const SpikeTensor& a, const SpikeTensor& b);

// Core kernel form: a:[M,K] x bt:[N,K] -> a . bt^T via AND + popcount.
AccumTensor matmul_spike_nt(const SpikeTensor& a, const SpikeTensor& bt);

// a:[M,K] integer x b:[K,N] spikes -> [M,N]; adds a[i][k] wherever b[k][j]
// fires. Addition-only.
AccumTensor matmul_accum_spike(const AccumTensor& a, const SpikeTensor& b);

// a:[M,K] spikes x b:[K,N] integer -> [M,N]; adds b[k][j] wherever a[i][k]
// fires. Addition-only sibling used by the kv-first evaluation order.
AccumTensor matmul_spike_accum(const SpikeTensor& a, const AccumTensor& b);

SpikeTensor transpose_spike(const SpikeTensor& a);  // 2D

// Elementwise r AND NOT s; keeps binarity under residual joins.
SpikeTensor iand_spike(const SpikeTensor& r, const SpikeTensor& s);

// Nearest-neighbour upsampling of the last two axes by `factor` in {2,4,8};
// each element becomes a factor x factor block.
SpikeTensor upsample_nearest(const SpikeTensor& m, int factor);

// Synaptic operations executed by the kernels above: every nonzero element
// of the gating spike operand fans out to `fanout` accumulates.
int64_t sop_count(const SpikeTensor& gate, int64_t fanout);

}  // namespace spikekit
