// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "lt3r/checkpoint.hpp"
#include "lt3r/qlinear.hpp"
#include "testutil.hpp"

using namespace lt3r;

namespace {

FakeQuantLinear make_layer(Rng& rng, int d_out, int d_in, bool bias = true) {
  FakeQuantLinear l("layer", d_out, d_in, bias, rng, /*trainable=*/true);
  return l;
}

}  // namespace

TEST_CASE("disabled quantization is bitwise identical to the plain linear map") {
  Rng rng(1);
  FakeQuantLinear layer = make_layer(rng, 5, 7);
  Tensor x = rng.uniform_tensor({4, 7}, -2.0f, 2.0f);

  FwdCtx ctx;
  Tensor got = fq_forward(layer, ctx, x);
  Tensor want = linear(x, layer.W.tensor, &layer.b.tensor);
  CHECK(testutil::bitwise_equal(got.data, want.data));
}

TEST_CASE("grid-valued weights and activations pass through exactly") {
  // every row contains 448 so the dynamic scale is exactly 1 and all values
  // sit on the FP8 grid
  Tensor w({2, 4}, {448.0f, 1.0f, -2.0f, 0.5f, 448.0f, -0.25f, 3.0f, 20.0f});
  Tensor x({1, 4}, {448.0f, 0.0625f, -1.75f, 6.0f});
  Rng rng(2);
  FakeQuantLinear layer = make_layer(rng, 2, 4, /*bias=*/false);
  layer.W.tensor = w;
  layer.enabled = true;
  layer.enable_act_quant = true;

  FwdCtx ctx;
  Tensor got = fq_forward(layer, ctx, x);
  Tensor want = linear(x, w, nullptr);
  CHECK(testutil::bitwise_equal(got.data, want.data));
}

TEST_CASE("fake-quant output error is bounded by the quantization residuals") {
  Rng rng(3);
  for (int it = 0; it < 20; ++it) {
    FakeQuantLinear layer = make_layer(rng, 6, 9, /*bias=*/false);
    layer.enabled = true;
    Tensor x = rng.uniform_tensor({5, 9}, -3.0f, 3.0f);

    Tensor wq = fp8::dequantize(fp8::quantize_scaled(layer.W.tensor,
                                                     fp8::ScaleAxis::kPerOutputRow));
    Tensor xq = fp8::dequantize(fp8::quantize_scaled(x, fp8::ScaleAxis::kPerToken));

    FwdCtx ctx;
    Tensor got = fq_forward(layer, ctx, x);
    Tensor plain = linear(x, layer.W.tensor, nullptr);

    // |Xq Wq^T - X W^T| <= |Xq| |Wq - W|^T + |Xq - X| |W|^T elementwise
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 6; ++j) {
        double bound = 0.0;
        for (int k = 0; k < 9; ++k) {
          bound += std::fabs(xq.at(i, k)) * std::fabs(wq.at(j, k) - layer.W.tensor.at(j, k));
          bound += std::fabs(xq.at(i, k) - x.at(i, k)) * std::fabs(layer.W.tensor.at(j, k));
        }
        const double err = std::fabs(static_cast<double>(got.at(i, j)) - plain.at(i, j));
        CHECK(err <= bound * (1.0 + 1e-4) + 1e-6);
      }
    }
  }
}

TEST_CASE("tape backward equals the closed-form linear gradients") {
  Rng rng(4);
  for (int it = 0; it < 30; ++it) {
    FakeQuantLinear layer = make_layer(rng, 4, 6);
    layer.enabled = true;
    layer.enable_act_quant = true;
    Tensor x = rng.uniform_tensor({3, 6}, -2.0f, 2.0f);
    Tensor g_up = rng.uniform_tensor({3, 4}, -2.0f, 2.0f);  // injected upstream gradient

    Tape tape;
    FwdCtx ctx(&tape);
    Tensor xs = tape.leaf(x);
    Tensor y = fq_forward(layer, ctx, xs);
    tape.backward(sum(mul(y, g_up)));

    Tensor wq = fp8::dequantize(fp8::quantize_scaled(layer.W.tensor,
                                                     fp8::ScaleAxis::kPerOutputRow));
    Tensor xq = fp8::dequantize(fp8::quantize_scaled(x, fp8::ScaleAxis::kPerToken));

    // grad_x = G Wq, STE makes it land on x unchanged
    Tensor want_gx = testutil::naive_matmul(g_up, wq);
    CHECK(testutil::bitwise_equal(tape.grad(xs.node), want_gx.data));

    // grad_W = G^T Xq
    Tensor want_gw = testutil::naive_matmul_tn(g_up, xq);
    const FloatBuf* gw = ctx.grad_of(layer.W);
    REQUIRE(gw != nullptr);
    CHECK(testutil::bitwise_equal(*gw, want_gw.data));

    // grad_b = column sums of G
    const FloatBuf* gb = ctx.grad_of(layer.b);
    REQUIRE(gb != nullptr);
    for (int j = 0; j < 4; ++j) {
      float want = 0.0f;
      for (int i = 0; i < 3; ++i) want += g_up.at(i, j);
      CHECK((*gb)[static_cast<std::size_t>(j)] == want);
    }
  }
}

TEST_CASE("disabling activation quantization routes raw x into grad_W") {
  Rng rng(5);
  FakeQuantLinear layer = make_layer(rng, 3, 5);
  layer.enabled = true;
  layer.enable_act_quant = false;
  Tensor x = rng.uniform_tensor({4, 5}, -2.0f, 2.0f);
  Tensor g_up = rng.uniform_tensor({4, 3}, -1.0f, 1.0f);

  Tape tape;
  FwdCtx ctx(&tape);
  Tensor y = fq_forward(layer, ctx, tape.leaf(x));
  tape.backward(sum(mul(y, g_up)));

  Tensor want_gw = testutil::naive_matmul_tn(g_up, x);  // raw activations
  const FloatBuf* gw = ctx.grad_of(layer.W);
  REQUIRE(gw != nullptr);
  CHECK(testutil::bitwise_equal(*gw, want_gw.data));
}

TEST_CASE("quantization disabled gives plain-linear gradients exactly") {
  Rng rng(6);
  FakeQuantLinear layer = make_layer(rng, 4, 4);
  Tensor x = rng.uniform_tensor({2, 4}, -2.0f, 2.0f);
  Tensor g_up = rng.uniform_tensor({2, 4}, -1.0f, 1.0f);

  Tape tape;
  FwdCtx ctx(&tape);
  Tensor y = fq_forward(layer, ctx, tape.leaf(x));
  tape.backward(sum(mul(y, g_up)));

  const FloatBuf* gw = ctx.grad_of(layer.W);
  REQUIRE(gw != nullptr);
  Tensor want_gw = testutil::naive_matmul_tn(g_up, x);
  CHECK(testutil::bitwise_equal(*gw, want_gw.data));
}

TEST_CASE("glob matching") {
  CHECK(glob_match("*", "anything"));
  CHECK(glob_match("*attn*", "block0.attn.wq"));
  CHECK(glob_match("block?.mlp.*", "block3.mlp.fc1"));
  CHECK_FALSE(glob_match("*norm*", "block0.attn.wq"));
  CHECK(glob_match("*norm*", "block2.norm1.gamma"));
  CHECK_FALSE(glob_match("head", "heads"));
}

TEST_CASE("policy matching and application") {
  Rng rng(7);
  FakeQuantLinear a = make_layer(rng, 4, 4);
  FakeQuantLinear b = make_layer(rng, 4, 4);
  FakeQuantLinear norm_ish = make_layer(rng, 4, 4);
  std::vector<std::pair<std::string, FakeQuantLinear*>> layers = {
      {"block0.attn.wq", &a}, {"block0.mlp.fc1", &b}, {"block0.norm_proj", &norm_ish}};

  SUBCASE("include everything, no threshold") {
    QuantPolicy p;  // include *, min 0
    CHECK(apply_policy(layers, p) == 3);
    CHECK(a.enabled);
    CHECK(b.enabled);
    CHECK(norm_ish.enabled);
  }

  SUBCASE("exclude pattern wins over include") {
    QuantPolicy p;
    p.include = {"*"};
    p.exclude = {"*norm*"};
    CHECK(apply_policy(layers, p) == 2);
    CHECK_FALSE(norm_ish.enabled);
  }

  SUBCASE("min-params threshold of 1M exempts every toy layer") {
    QuantPolicy p;
    p.min_params = 1000000;
    CHECK(apply_policy(layers, p) == 0);
    CHECK_FALSE(a.enabled);
  }

  SUBCASE("applying the same policy twice converts nothing new") {
    QuantPolicy p;
    CHECK(apply_policy(layers, p) == 3);
    CHECK(apply_policy(layers, p) == 0);
  }
}

TEST_CASE("weight-only export matches weight-only fake quant exactly") {
  Rng rng(8);
  FakeQuantLinear layer = make_layer(rng, 6, 10);
  layer.enabled = true;
  layer.enable_act_quant = false;  // weight-only fake quant
  Tensor x = rng.uniform_tensor({7, 10}, -2.0f, 2.0f);

  FwdCtx ctx;
  Tensor fq = fq_forward(layer, ctx, x);
  WeightOnlyLinear wol = export_weight_only(layer);
  Tensor deployed = wol.forward(x);
  CHECK(testutil::bitwise_equal(fq.data, deployed.data));
}

TEST_CASE("weight-only byte accounting") {
  CHECK(weight_only_weight_bytes(6, 10) == 6 * 10 + 4 * 6);
  CHECK(full_precision_weight_bytes(6, 10) == 4 * 6 * 10);
  // ~4x weight-memory reduction once d_in dominates the per-row scale
  const double ratio = static_cast<double>(full_precision_weight_bytes(64, 4096)) /
                       static_cast<double>(weight_only_weight_bytes(64, 4096));
  CHECK(ratio > 3.9);
  CHECK(ratio == doctest::Approx(4.0 * 4096 / (4096 + 4)));
}

TEST_CASE("exported codes and scales survive a checkpoint round trip") {
  Rng rng(9);
  FakeQuantLinear layer = make_layer(rng, 5, 8);
  WeightOnlyLinear wol = export_weight_only(layer);

  CheckpointArchive a;
  a.put_fp8("w", wol.wq);
  const auto path = std::filesystem::temp_directory_path() / "lt3r_qlinear_roundtrip.lt3r";
  a.save(path);
  CheckpointArchive b = CheckpointArchive::load(path);
  fp8::QuantizedTensor back = b.get_fp8("w");

  REQUIRE(back.codes.size() == wol.wq.codes.size());
  for (std::size_t i = 0; i < back.codes.size(); ++i) CHECK(back.codes[i] == wol.wq.codes[i]);
  REQUIRE(back.scales.size() == wol.wq.scales.size());
  for (std::size_t i = 0; i < back.scales.size(); ++i) CHECK(back.scales[i] == wol.wq.scales[i]);
  std::filesystem::remove(path);
}
