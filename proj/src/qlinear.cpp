// SPDX-License-Identifier: Apache-2.0
#include "lt3r/qlinear.hpp"

#include <cmath>
#include <stdexcept>

namespace lt3r {

FakeQuantLinear::FakeQuantLinear(std::string name, int d_out, int d_in, bool with_bias,
                                 Rng& rng, bool trainable) {
  if (d_out < 1 || d_in < 1) throw std::invalid_argument("FakeQuantLinear: invalid dims");
  W.name = name + ".W";
  W.tensor = rng.normal_tensor({d_out, d_in}, 1.0f / std::sqrt(static_cast<float>(d_in)));
  W.trainable = trainable;
  has_bias = with_bias;
  if (with_bias) {
    b.name = name + ".b";
    b.tensor = Tensor({d_out});
    b.trainable = trainable;
  }
}

Tensor fq_forward(FakeQuantLinear& layer, FwdCtx& ctx, const Tensor& x) {
  Tensor w = ctx.use(layer.W);
  Tensor bias;
  if (layer.has_bias) bias = ctx.use(layer.b);
  const Tensor* bp = layer.has_bias ? &bias : nullptr;

  if (!layer.enabled) return linear(x, w, bp);

  Tensor wq = fp8::fake_quant_ste(w, fp8::ScaleAxis::kPerOutputRow);
  if (layer.enable_act_quant) {
    Tensor xq = fp8::fake_quant_ste(x, fp8::ScaleAxis::kPerToken);
    return linear(xq, wq, bp);
  }
  return linear(x, wq, bp);
}

bool glob_match(const std::string& pattern, const std::string& name) {
  const std::size_t np = pattern.size(), nn = name.size();
  std::size_t p = 0, s = 0;
  std::size_t star = std::string::npos, mark = 0;
  while (s < nn) {
    if (p < np && (pattern[p] == '?' || pattern[p] == name[s])) {
      ++p;
      ++s;
    } else if (p < np && pattern[p] == '*') {
      star = p++;
      mark = s;
    } else if (star != std::string::npos) {
      p = star + 1;
      s = ++mark;
    } else {
      return false;
    }
  }
  while (p < np && pattern[p] == '*') ++p;
  return p == np;
}

bool QuantPolicy::matches(const std::string& name, long long param_count) const {
  if (param_count < min_params) return false;
  bool included = false;
  for (const auto& pat : include) {
    if (glob_match(pat, name)) {
      included = true;
      break;
    }
  }
  if (!included) return false;
  for (const auto& pat : exclude) {
    if (glob_match(pat, name)) return false;
  }
  return true;
}

int apply_policy(const std::vector<std::pair<std::string, FakeQuantLinear*>>& layers,
                 const QuantPolicy& policy, bool enable_act_quant) {
  int converted = 0;
  for (const auto& [name, layer] : layers) {
    if (!policy.matches(name, layer->param_count())) continue;
    if (layer->enabled) continue;
    layer->enabled = true;
    layer->enable_act_quant = enable_act_quant;
    ++converted;
  }
  return converted;
}

Tensor WeightOnlyLinear::forward(const Tensor& x) const {
  return linear(x, w_dequant, has_bias ? &bias : nullptr);
}

WeightOnlyLinear export_weight_only(const FakeQuantLinear& layer) {
  fp8::QuantizedTensor wq = fp8::quantize_scaled(layer.W.tensor, fp8::ScaleAxis::kPerOutputRow);
  Tensor bias = layer.has_bias ? layer.b.tensor : Tensor{};
  return weight_only_from_codes(std::move(wq), std::move(bias), layer.has_bias);
}

WeightOnlyLinear weight_only_from_codes(fp8::QuantizedTensor wq, Tensor bias, bool has_bias) {
  WeightOnlyLinear out;
  out.w_dequant = fp8::dequantize(wq);
  out.wq = std::move(wq);
  out.bias = std::move(bias);
  out.has_bias = has_bias;
  return out;
}

long long weight_only_weight_bytes(int d_out, int d_in) {
  return static_cast<long long>(d_out) * d_in + 4LL * d_out;
}

long long full_precision_weight_bytes(int d_out, int d_in) {
  return 4LL * d_out * d_in;
}

}  // namespace lt3r
