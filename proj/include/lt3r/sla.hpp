// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "lt3r/qlinear.hpp"
#include "lt3r/tensor.hpp"

namespace lt3r {

// Per-query keep count for a keep ratio in [0, 1]; floors at 1.
int top_k_count(float keep_ratio, int n);

// Keep-mask selecting the k largest scores per row. Ties break toward the
// lowest column index, so the mask is deterministic.
BoolMask top_k_mask(const Tensor& scores, float keep_ratio);

// Plain scaled-dot-product attention over already-projected Q, K, V.
// No output projection.
Tensor dense_attention_qkv(const Tensor& q, const Tensor& k, const Tensor& v);

// Softmax over the top-k masked affinity scores; masked weights are exactly 0.
Tensor sparse_branch(const Tensor& q, const Tensor& k, const Tensor& v, float keep_ratio);

// Kernelized linear attention with feature map phi = ELU + 1. The
// normalization denominator is floored at 1e-8.
Tensor linear_branch(const Tensor& q, const Tensor& k, const Tensor& v);

// Dense attention heads used by the teacher: three bias-free projections.
struct DenseAttention {
  FakeQuantLinear wq, wk, wv;
};

// Hybrid attention: frozen Q/K/V projections, sparse + linear branches, one
// trainable output projection applied to the linear branch only.
struct SlaParams {
  FakeQuantLinear wq, wk, wv;  // frozen
  FakeQuantLinear wo;          // trainable
  float keep_ratio = 1.0f;
};

Tensor dense_attention(FwdCtx& ctx, const Tensor& x, DenseAttention& attn);
Tensor sla_forward(FwdCtx& ctx, const Tensor& x, SlaParams& params);

enum class AttentionVariant { kDense, kSla };

// Exact FLOP count for one attention module at sequence length n, width d.
// The sparse branch computes full scores before masking, so only softmax and
// the attention-value product shrink with the keep ratio.
long long attention_flops(long long n, long long d, float keep_ratio, AttentionVariant variant);

}  // namespace lt3r
