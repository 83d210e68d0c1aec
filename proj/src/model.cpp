// SPDX-License-Identifier: Apache-2.0
#include "lt3r/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace lt3r {

namespace {

LayerNormParams make_layer_norm(const std::string& name, int dim) {
  LayerNormParams ln;
  ln.gamma.name = name + ".gamma";
  ln.gamma.tensor = Tensor({dim});
  std::fill(ln.gamma.tensor.data.begin(), ln.gamma.tensor.data.end(), 1.0f);
  ln.beta.name = name + ".beta";
  ln.beta.tensor = Tensor({dim});
  return ln;
}

std::string block_name(std::size_t i) { return "block" + std::to_string(i); }

}  // namespace

Tensor ToyTransformer::forward(FwdCtx& ctx, const Tensor& x, std::vector<HookRecord>* hooks) {
  if (x.rank() != 2 || x.cols() != cfg.d_in) {
    throw std::invalid_argument("forward: input must be [N x d_in]");
  }
  Tensor h = fq_forward(embed, ctx, x);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    Block& blk = blocks[i];
    const std::string attn_name = block_name(i) + ".attn";

    Tensor a_in = layer_norm(h, ctx.use(blk.norm1.gamma), ctx.use(blk.norm1.beta));
    Tensor a = std::visit(
        [&](auto& attn) -> Tensor {
          using T = std::decay_t<decltype(attn)>;
          if constexpr (std::is_same_v<T, DenseAttention>) {
            return dense_attention(ctx, a_in, attn);
          } else {
            return sla_forward(ctx, a_in, attn);
          }
        },
        blk.attn);
    if (hooks != nullptr &&
        std::find(hooked.begin(), hooked.end(), attn_name) != hooked.end()) {
      hooks->push_back(HookRecord{attn_name, a});
    }
    h = add(h, a);

    Tensor m_in = layer_norm(h, ctx.use(blk.norm2.gamma), ctx.use(blk.norm2.beta));
    Tensor m = fq_forward(blk.fc2, ctx, gelu(fq_forward(blk.fc1, ctx, m_in)));
    h = add(h, m);
  }
  return fq_forward(head, ctx, h);
}

std::vector<Tensor> ToyTransformer::forward_batch(FwdCtx& ctx, const std::vector<Tensor>& xs) {
  std::vector<Tensor> out;
  out.reserve(xs.size());
  for (const Tensor& x : xs) out.push_back(forward(ctx, x));
  return out;
}

namespace {

template <class Model, class PG>
std::vector<std::pair<std::string, PG*>> collect_params(Model& m) {
  std::vector<std::pair<std::string, PG*>> out;
  auto push_linear = [&out](auto& layer) {
    out.emplace_back(layer.W.name, &layer.W);
    if (layer.has_bias) out.emplace_back(layer.b.name, &layer.b);
  };
  push_linear(m.embed);
  for (auto& blk : m.blocks) {
    out.emplace_back(blk.norm1.gamma.name, &blk.norm1.gamma);
    out.emplace_back(blk.norm1.beta.name, &blk.norm1.beta);
    std::visit(
        [&](auto& attn) {
          using T = std::decay_t<decltype(attn)>;
          push_linear(attn.wq);
          push_linear(attn.wk);
          push_linear(attn.wv);
          if constexpr (std::is_same_v<T, SlaParams>) push_linear(attn.wo);
        },
        blk.attn);
    out.emplace_back(blk.norm2.gamma.name, &blk.norm2.gamma);
    out.emplace_back(blk.norm2.beta.name, &blk.norm2.beta);
    push_linear(blk.fc1);
    push_linear(blk.fc2);
  }
  push_linear(m.head);
  return out;
}

}  // namespace

std::vector<std::pair<std::string, ParamGroup*>> ToyTransformer::param_groups() {
  return collect_params<ToyTransformer, ParamGroup>(*this);
}

std::vector<std::pair<std::string, const ParamGroup*>> ToyTransformer::param_groups() const {
  return collect_params<const ToyTransformer, const ParamGroup>(*this);
}

std::vector<std::pair<std::string, FakeQuantLinear*>> ToyTransformer::linear_layers() {
  std::vector<std::pair<std::string, FakeQuantLinear*>> out;
  out.emplace_back("embed", &embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string base = block_name(i);
    std::visit(
        [&](auto& attn) {
          using T = std::decay_t<decltype(attn)>;
          out.emplace_back(base + ".attn.wq", &attn.wq);
          out.emplace_back(base + ".attn.wk", &attn.wk);
          out.emplace_back(base + ".attn.wv", &attn.wv);
          if constexpr (std::is_same_v<T, SlaParams>) {
            out.emplace_back(base + ".attn.wo", &attn.wo);
          }
        },
        blocks[i].attn);
    out.emplace_back(base + ".mlp.fc1", &blocks[i].fc1);
    out.emplace_back(base + ".mlp.fc2", &blocks[i].fc2);
  }
  out.emplace_back("head", &head);
  return out;
}

std::vector<std::string> ToyTransformer::attention_module_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) out.push_back(block_name(i) + ".attn");
  return out;
}

long long ToyTransformer::total_params() const {
  long long n = 0;
  for (const auto& [name, pg] : param_groups()) n += pg->numel();
  return n;
}

long long ToyTransformer::trainable_params() const {
  long long n = 0;
  for (const auto& [name, pg] : param_groups()) {
    if (pg->trainable) n += pg->numel();
  }
  return n;
}

bool ToyTransformer::uses_sla() const {
  return !blocks.empty() && std::holds_alternative<SlaParams>(blocks.front().attn);
}

ToyTransformer build_teacher(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.layers < 1) throw std::invalid_argument("build_teacher: layers must be >= 1");
  if (cfg.dim < 2) throw std::invalid_argument("build_teacher: dim must be >= 2");
  if (cfg.d_in < 1 || cfg.d_out < 1) {
    throw std::invalid_argument("build_teacher: d_in/d_out must be >= 1");
  }

  Rng rng(seed);
  ToyTransformer m;
  m.cfg = cfg;
  m.embed = FakeQuantLinear("embed", cfg.dim, cfg.d_in, /*with_bias=*/true, rng,
                            /*trainable=*/false);
  m.blocks.resize(static_cast<std::size_t>(cfg.layers));
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string base = block_name(i);
    ToyTransformer::Block& blk = m.blocks[i];
    blk.norm1 = make_layer_norm(base + ".norm1", cfg.dim);
    DenseAttention attn;
    attn.wq = FakeQuantLinear(base + ".attn.wq", cfg.dim, cfg.dim, false, rng, false);
    attn.wk = FakeQuantLinear(base + ".attn.wk", cfg.dim, cfg.dim, false, rng, false);
    attn.wv = FakeQuantLinear(base + ".attn.wv", cfg.dim, cfg.dim, false, rng, false);
    blk.attn = std::move(attn);
    blk.norm2 = make_layer_norm(base + ".norm2", cfg.dim);
    blk.fc1 = FakeQuantLinear(base + ".mlp.fc1", cfg.mlp_hidden(), cfg.dim, true, rng, false);
    blk.fc2 = FakeQuantLinear(base + ".mlp.fc2", cfg.dim, cfg.mlp_hidden(), true, rng, false);
  }
  m.head = FakeQuantLinear("head", cfg.d_out, cfg.dim, true, rng, false);
  return m;
}

ToyTransformer derive_student(const ToyTransformer& teacher, float keep_ratio) {
  if (keep_ratio < 0.0f || keep_ratio > 1.0f) {
    throw std::invalid_argument("derive_student: keep_ratio must be in [0, 1]");
  }
  ToyTransformer s = teacher;
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    auto* dense = std::get_if<DenseAttention>(&s.blocks[i].attn);
    if (dense == nullptr) {
      throw std::invalid_argument("derive_student: teacher must use dense attention");
    }
    SlaParams p;
    p.wq = std::move(dense->wq);
    p.wk = std::move(dense->wk);
    p.wv = std::move(dense->wv);
    p.wo.W.name = block_name(i) + ".attn.wo.W";
    p.wo.W.tensor = Tensor({teacher.cfg.dim, teacher.cfg.dim});  // zero init
    p.wo.W.trainable = true;
    p.wo.has_bias = false;
    p.keep_ratio = keep_ratio;
    s.blocks[i].attn = std::move(p);
  }
  return s;
}

std::vector<std::string> register_hooks(ToyTransformer& m, const std::string& pattern) {
  std::vector<std::string> matched;
  for (const std::string& name : m.attention_module_names()) {
    if (glob_match(pattern, name)) matched.push_back(name);
  }
  if (matched.empty()) {
    throw std::invalid_argument("register_hooks: pattern '" + pattern +
                                "' matches no attention module");
  }
  m.hooked = matched;
  return matched;
}

int apply_policy(ToyTransformer& m, const QuantPolicy& policy, bool enable_act_quant) {
  auto layers = m.linear_layers();
  return apply_policy(layers, policy, enable_act_quant);
}

}  // namespace lt3r
