// SPDX-License-Identifier: Apache-2.0
#include "lt3r/sla.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace lt3r {

int top_k_count(float keep_ratio, int n) {
  if (keep_ratio < 0.0f || keep_ratio > 1.0f) {
    throw std::invalid_argument("keep_ratio must be in [0, 1]");
  }
  // shave the f32 representation error of the ratio so e.g. 0.2 * 10 stays 2
  const double v = static_cast<double>(keep_ratio) * n;
  const int k = static_cast<int>(std::ceil(v * (1.0 - 1e-7)));
  return std::max(1, std::min(k, n));
}

BoolMask top_k_mask(const Tensor& scores, float keep_ratio) {
  if (scores.rank() != 2) throw std::invalid_argument("top_k_mask: scores must be rank-2");
  const int m = scores.rows(), n = scores.cols();
  const int k = top_k_count(keep_ratio, n);

  BoolMask mask(m, n, false);
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    std::iota(idx.begin(), idx.end(), 0);
    // value descending, index ascending on ties
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return scores.at(i, a) > scores.at(i, b);
    });
    for (int j = 0; j < k; ++j) mask.set(i, idx[static_cast<std::size_t>(j)], true);
  }
  return mask;
}

namespace {

Tensor affinity_scores(const Tensor& q, const Tensor& k) {
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(q.cols()));
  return scale(matmul(q, transpose(k)), inv_sqrt_d);
}

}  // namespace

Tensor dense_attention_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() ||
      k.rows() != v.rows()) {
    throw std::invalid_argument("dense_attention_qkv: shape mismatch");
  }
  Tensor s = affinity_scores(q, k);
  return matmul(softmax_rows(s), v);
}

Tensor sparse_branch(const Tensor& q, const Tensor& k, const Tensor& v, float keep_ratio) {
  Tensor s = affinity_scores(q, k);
  // Top-k selection is piecewise constant, so the mask is a constant for
  // gradient purposes and is computed from detached scores.
  BoolMask mask = top_k_mask(s.detached(), keep_ratio);
  return matmul(softmax_rows(s, mask), v);
}

Tensor linear_branch(const Tensor& q, const Tensor& k, const Tensor& v) {
  Tensor phi_q = elu_plus_one(q);
  Tensor phi_k = elu_plus_one(k);
  Tensor kv = matmul(transpose(phi_k), v);  // [d x d] key-value summary
  Tensor z = col_sum(phi_k);                // [d] normalization term
  Tensor num = matmul(phi_q, kv);
  Tensor den = matvec(phi_q, z);
  return div_rowvec(num, den, 1e-8f);
}

Tensor dense_attention(FwdCtx& ctx, const Tensor& x, DenseAttention& attn) {
  Tensor q = fq_forward(attn.wq, ctx, x);
  Tensor k = fq_forward(attn.wk, ctx, x);
  Tensor v = fq_forward(attn.wv, ctx, x);
  return dense_attention_qkv(q, k, v);
}

Tensor sla_forward(FwdCtx& ctx, const Tensor& x, SlaParams& params) {
  Tensor q = fq_forward(params.wq, ctx, x);
  Tensor k = fq_forward(params.wk, ctx, x);
  Tensor v = fq_forward(params.wv, ctx, x);
  Tensor sparse = sparse_branch(q, k, v, params.keep_ratio);
  Tensor lin = fq_forward(params.wo, ctx, linear_branch(q, k, v));
  return add(sparse, lin);
}

long long attention_flops(long long n, long long d, float keep_ratio,
                          AttentionVariant variant) {
  if (n < 1 || d < 1) throw std::invalid_argument("attention_flops: dims must be >= 1");
  const long long scores = 2 * n * n * d;
  if (variant == AttentionVariant::kDense) {
    return scores + 2 * n * n * d + n * n;  // scores + AV + softmax
  }
  const long long k = top_k_count(keep_ratio, static_cast<int>(n));
  const long long sparse_av = 2 * n * k * d;
  const long long masked_softmax = n * k;
  const long long linear = 6 * n * d * d;  // kv summary, z, phiQ*T, phiQ*z
  const long long out_proj = 2 * n * d * d;
  return scores + sparse_av + masked_softmax + linear + out_proj;
}

}  // namespace lt3r
