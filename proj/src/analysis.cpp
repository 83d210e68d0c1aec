// SPDX-License-Identifier: Apache-2.0
#include "lt3r/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace lt3r {

LayerSensitivity sensitivity_score(const Tensor& w) {
  if (w.numel() == 0) throw std::invalid_argument("sensitivity_score: empty tensor");
  const double n = static_cast<double>(w.numel());

  double amax = 0.0, mean = 0.0;
  for (float v : w.data) {
    amax = std::max(amax, std::fabs(static_cast<double>(v)));
    mean += v;
  }
  mean /= n;

  double m2 = 0.0, m4 = 0.0;
  for (float v : w.data) {
    const double d = static_cast<double>(v) - mean;
    const double d2 = d * d;
    m2 += d2;
    m4 += d2 * d2;
  }
  m2 /= n;  // population variance
  m4 /= n;
  const double sigma = std::sqrt(m2);

  LayerSensitivity r;
  r.dyn_range = static_cast<float>(amax);
  if (sigma < 1e-12) {
    r.outlier_frac = 0.0f;
    r.kurtosis = 0.0f;
  } else {
    long long outliers = 0;
    const double bound = 3.0 * sigma;
    for (float v : w.data) {
      if (std::fabs(static_cast<double>(v) - mean) > bound) ++outliers;
    }
    r.outlier_frac = static_cast<float>(static_cast<double>(outliers) / n);
    r.kurtosis = static_cast<float>(m4 / (m2 * m2));
  }
  r.score = 0.4f * r.dyn_range / 10.0f + 0.3f * r.outlier_frac + 0.3f * r.kurtosis / 10.0f;
  return r;
}

SensitivityReport model_report(ToyTransformer& model) {
  SensitivityReport report;
  for (auto& [name, layer] : model.linear_layers()) {
    LayerSensitivity s = sensitivity_score(layer->W.tensor);
    s.name = name;
    report.layers.push_back(std::move(s));
  }
  std::sort(report.layers.begin(), report.layers.end(),
            [](const LayerSensitivity& a, const LayerSensitivity& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.name < b.name;
            });
  return report;
}

long long linear_layer_flops(long long n, long long d_in, long long d_out, bool bias) {
  long long f = 2 * n * d_in * d_out;
  if (bias) f += n * d_out;
  return f;
}

namespace {

long long layer_norm_flops(long long n, long long d) { return 8 * n * d; }
long long gelu_flops(long long n, long long d) { return 8 * n * d; }
long long residual_flops(long long n, long long d) { return n * d; }

}  // namespace

long long model_flops(const ModelConfig& cfg, int seq_len, AttentionVariant variant,
                      float keep_ratio) {
  const long long n = seq_len, d = cfg.dim;
  long long total = linear_layer_flops(n, cfg.d_in, d, true);  // embed
  const long long attn = attention_flops(n, d, keep_ratio, variant) +
                         3 * linear_layer_flops(n, d, d, false);  // qkv projections
  for (int l = 0; l < cfg.layers; ++l) {
    total += 2 * layer_norm_flops(n, d);
    total += attn;
    total += linear_layer_flops(n, d, cfg.mlp_hidden(), true);
    total += gelu_flops(n, cfg.mlp_hidden());
    total += linear_layer_flops(n, cfg.mlp_hidden(), d, true);
    total += 2 * residual_flops(n, d);
  }
  total += linear_layer_flops(n, d, cfg.d_out, true);  // head
  return total;
}

long long full_param_bytes(const ToyTransformer& model) {
  long long bytes = 0;
  for (const auto& [name, pg] : model.param_groups()) bytes += 4 * pg->numel();
  return bytes;
}

long long weight_only_param_bytes(ToyTransformer& model, const QuantPolicy& policy) {
  long long bytes = 0;
  std::vector<const ParamGroup*> quantized_weights;
  for (auto& [name, layer] : model.linear_layers()) {
    if (policy.matches(name, layer->param_count())) {
      bytes += weight_only_weight_bytes(layer->d_out(), layer->d_in());
      if (layer->has_bias) bytes += 4 * layer->b.numel();
      quantized_weights.push_back(&layer->W);
      if (layer->has_bias) quantized_weights.push_back(&layer->b);
    }
  }
  for (const auto& [name, pg] : model.param_groups()) {
    if (std::find(quantized_weights.begin(), quantized_weights.end(), pg) ==
        quantized_weights.end()) {
      bytes += 4 * pg->numel();
    }
  }
  return bytes;
}

EffReport benchmark(AttentionVariant variant, const ModelConfig& cfg, int seq_len,
                    float keep_ratio, int repeats, int warmup, std::uint64_t seed,
                    const QuantPolicy& policy) {
  if (repeats < 3) throw std::invalid_argument("benchmark: repeats must be >= 3");
  if (warmup < 1) throw std::invalid_argument("benchmark: warmup must be >= 1");

  ToyTransformer teacher = build_teacher(cfg, seed);
  ToyTransformer model = variant == AttentionVariant::kSla
                             ? derive_student(teacher, keep_ratio)
                             : std::move(teacher);

  EffReport r;
  r.variant = variant == AttentionVariant::kSla ? "sla" : "dense";
  r.seq_len = seq_len;
  r.dim = cfg.dim;
  r.keep_ratio = variant == AttentionVariant::kSla ? keep_ratio : 1.0f;
  r.attn_flops_per_layer = attention_flops(seq_len, cfg.dim, keep_ratio, variant);
  r.model_flops = model_flops(cfg, seq_len, variant, keep_ratio);
  r.param_bytes_full = full_param_bytes(model);
  r.param_bytes_weight_only = weight_only_param_bytes(model, policy);
  r.repeats = repeats;

  Rng rng(seed + 1);
  Tensor x = rng.normal_tensor({seq_len, cfg.d_in});
  FwdCtx ctx;

  for (int i = 0; i < warmup; ++i) model.forward(ctx, x);

  reset_peak_tensor_bytes();
  double total_ms = 0.0;
  double min_ms = 0.0;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(ctx, x);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    total_ms += ms;
    min_ms = (i == 0) ? ms : std::min(min_ms, ms);
  }
  r.wall_mean_ms = total_ms / repeats;
  r.wall_min_ms = min_ms;
  r.peak_tensor_bytes = peak_tensor_bytes();
  return r;
}

}  // namespace lt3r
