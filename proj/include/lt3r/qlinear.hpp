// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lt3r/fp8.hpp"
#include "lt3r/tensor.hpp"

namespace lt3r {

// Linear layer with optional FP8 fake quantization. With `enabled == false`
// the forward pass is exactly the plain linear map (same kernel, same
// accumulation order), so flipping quantization off is bit-transparent.
struct FakeQuantLinear {
  ParamGroup W;  // [d_out x d_in]
  ParamGroup b;  // [d_out], unused when has_bias == false
  bool has_bias = true;
  bool enable_act_quant = true;
  bool enabled = false;

  FakeQuantLinear() = default;
  FakeQuantLinear(std::string name, int d_out, int d_in, bool with_bias, Rng& rng,
                  bool trainable);

  int d_out() const { return W.tensor.shape[0]; }
  int d_in() const { return W.tensor.shape[1]; }
  long long param_count() const { return W.numel() + (has_bias ? b.numel() : 0); }
};

// y = Xq * Wq^T + b. Weights quantize per output row, activations per token;
// both straight-through nodes land on the context's tape. Bias stays in
// full precision.
Tensor fq_forward(FakeQuantLinear& layer, FwdCtx& ctx, const Tensor& x);

// Glob with '*' (any run) and '?' (any single char).
bool glob_match(const std::string& pattern, const std::string& name);

// A layer is quantized iff its name matches an include pattern, matches no
// exclude pattern, and its parameter count reaches min_params.
struct QuantPolicy {
  std::vector<std::string> include{"*"};
  std::vector<std::string> exclude{};
  long long min_params = 0;

  bool matches(const std::string& name, long long param_count) const;
};

// Enables fake quantization on every policy-matched layer that was not
// already enabled; returns how many layers were newly converted.
int apply_policy(const std::vector<std::pair<std::string, FakeQuantLinear*>>& layers,
                 const QuantPolicy& policy, bool enable_act_quant = true);

// Deployment form: weights stored as FP8 codes + per-row scales, activations
// full precision. Immutable after construction; the dequantized weight matrix
// is cached once.
struct WeightOnlyLinear {
  fp8::QuantizedTensor wq;
  Tensor bias;
  bool has_bias = false;
  Tensor w_dequant;

  Tensor forward(const Tensor& x) const;
};

WeightOnlyLinear export_weight_only(const FakeQuantLinear& layer);
WeightOnlyLinear weight_only_from_codes(fp8::QuantizedTensor wq, Tensor bias, bool has_bias);

// 1 byte per element plus one f32 scale per output row.
long long weight_only_weight_bytes(int d_out, int d_in);
long long full_precision_weight_bytes(int d_out, int d_in);

}  // namespace lt3r
