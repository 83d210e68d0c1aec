// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lt3r/model.hpp"

namespace lt3r {

// Per-layer quantization sensitivity:
//   S = 0.4 * max|W| / 10 + 0.3 * outlier_frac + 0.3 * kurtosis / 10
// with the fraction of entries beyond 3 sigma and Pearson kurtosis (normal
// distribution -> 3) computed with population moments. Degenerate tensors
// (sigma < 1e-12) take outlier_frac = kurtosis = 0.
struct LayerSensitivity {
  std::string name;
  float dyn_range = 0.0f;
  float outlier_frac = 0.0f;
  float kurtosis = 0.0f;
  float score = 0.0f;
};

LayerSensitivity sensitivity_score(const Tensor& w);

// One entry per linear layer, sorted by score descending (name ascending on
// exact ties).
struct SensitivityReport {
  std::vector<LayerSensitivity> layers;
};

SensitivityReport model_report(ToyTransformer& model);

// Closed-form FLOP counts for the full model at sequence length n.
long long linear_layer_flops(long long n, long long d_in, long long d_out, bool bias);
long long model_flops(const ModelConfig& cfg, int seq_len, AttentionVariant variant,
                      float keep_ratio);

// Deterministic efficiency accounting plus wall-clock timing of real
// forwards. FLOP and byte numbers come from closed forms; timing is reported,
// never asserted.
struct EffReport {
  std::string variant;  // "dense" | "sla"
  int seq_len = 0;
  int dim = 0;
  float keep_ratio = 1.0f;
  long long attn_flops_per_layer = 0;
  long long model_flops = 0;
  long long param_bytes_full = 0;
  long long param_bytes_weight_only = 0;  // policy-quantized weights as FP8 + scales
  long long peak_tensor_bytes = 0;
  double wall_mean_ms = 0.0;
  double wall_min_ms = 0.0;
  int repeats = 0;
};

EffReport benchmark(AttentionVariant variant, const ModelConfig& cfg, int seq_len,
                    float keep_ratio, int repeats, int warmup, std::uint64_t seed,
                    const QuantPolicy& policy);

// Parameter bytes for a model whose policy-matched weights are exported to
// FP8 codes + per-row scales; everything else stays f32.
long long weight_only_param_bytes(ToyTransformer& model, const QuantPolicy& policy);
long long full_param_bytes(const ToyTransformer& model);

}  // namespace lt3r
