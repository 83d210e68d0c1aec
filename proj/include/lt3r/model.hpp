// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "lt3r/sla.hpp"
#include "lt3r/tensor.hpp"

namespace lt3r {

struct ModelConfig {
  int layers = 4;
  int dim = 64;
  int seq_len = 128;
  int d_in = 32;
  int d_out = 32;

  int mlp_hidden() const { return 4 * dim; }
};

struct LayerNormParams {
  ParamGroup gamma, beta;
};

// Snapshot of one attention module's output for one forward pass. Teacher
// passes run without a tape, so their records carry no gradient linkage;
// student records stay tape-linked.
struct HookRecord {
  std::string module;
  Tensor value;
};

// Pre-LN transformer: embed -> L x (attn + MLP residual blocks) -> head.
// Layer names are stable and unique; teacher and student share names for
// corresponding modules.
struct ToyTransformer {
  struct Block {
    LayerNormParams norm1, norm2;
    std::variant<DenseAttention, SlaParams> attn;
    FakeQuantLinear fc1, fc2;
  };

  ModelConfig cfg;
  FakeQuantLinear embed;
  std::vector<Block> blocks;
  FakeQuantLinear head;
  std::vector<std::string> hooked;  // attention modules that record outputs

  Tensor forward(FwdCtx& ctx, const Tensor& x, std::vector<HookRecord>* hooks = nullptr);
  std::vector<Tensor> forward_batch(FwdCtx& ctx, const std::vector<Tensor>& xs);

  std::vector<std::pair<std::string, ParamGroup*>> param_groups();
  std::vector<std::pair<std::string, const ParamGroup*>> param_groups() const;
  std::vector<std::pair<std::string, FakeQuantLinear*>> linear_layers();
  std::vector<std::string> attention_module_names() const;

  long long total_params() const;
  long long trainable_params() const;
  bool uses_sla() const;
};

// Dense-attention transformer with seeded init; every parameter frozen.
ToyTransformer build_teacher(const ModelConfig& cfg, std::uint64_t seed);

// Copies the teacher, swaps each dense attention for SLA with the inherited
// projections frozen and a zero-initialized trainable output projection.
ToyTransformer derive_student(const ToyTransformer& teacher, float keep_ratio);

// Selects which attention modules record outputs on subsequent forwards.
// Throws if the pattern matches nothing.
std::vector<std::string> register_hooks(ToyTransformer& m, const std::string& pattern);

int apply_policy(ToyTransformer& m, const QuantPolicy& policy, bool enable_act_quant = true);

}  // namespace lt3r
