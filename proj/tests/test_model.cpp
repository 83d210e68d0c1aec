// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <set>

#include "lt3r/model.hpp"
#include "testutil.hpp"

using namespace lt3r;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.dim = 8;
  cfg.seq_len = 6;
  cfg.d_in = 4;
  cfg.d_out = 5;
  return cfg;
}

}  // namespace

TEST_CASE("build_teacher is deterministic per seed") {
  ToyTransformer a = build_teacher(tiny_cfg(), 42);
  ToyTransformer b = build_teacher(tiny_cfg(), 42);
  ToyTransformer c = build_teacher(tiny_cfg(), 43);

  auto pa = a.param_groups(), pb = b.param_groups(), pc = c.param_groups();
  REQUIRE(pa.size() == pb.size());
  bool all_equal_ab = true, all_equal_ac = true;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    all_equal_ab &= testutil::bitwise_equal(pa[i].second->tensor.data, pb[i].second->tensor.data);
    all_equal_ac &= testutil::bitwise_equal(pa[i].second->tensor.data, pc[i].second->tensor.data);
  }
  CHECK(all_equal_ab);
  CHECK_FALSE(all_equal_ac);
}

TEST_CASE("teacher forward obeys the shape contract") {
  ToyTransformer m = build_teacher(tiny_cfg(), 1);
  Rng rng(2);
  FwdCtx ctx;
  Tensor out = m.forward(ctx, rng.normal_tensor({6, 4}));
  CHECK(out.shape == std::vector<int>{6, 5});

  // sequence length is not baked into the weights
  Tensor out2 = m.forward(ctx, rng.normal_tensor({11, 4}));
  CHECK(out2.shape == std::vector<int>{11, 5});

  CHECK_THROWS_AS(m.forward(ctx, rng.normal_tensor({6, 3})), std::invalid_argument);
}

TEST_CASE("invalid dimensions are rejected") {
  ModelConfig cfg = tiny_cfg();
  cfg.layers = 0;
  CHECK_THROWS_AS(build_teacher(cfg, 1), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.dim = 1;
  CHECK_THROWS_AS(build_teacher(cfg, 1), std::invalid_argument);
}

TEST_CASE("teacher parameters are all frozen; names unique and stable") {
  ToyTransformer m = build_teacher(tiny_cfg(), 3);
  std::set<std::string> names;
  for (auto& [name, pg] : m.param_groups()) {
    CHECK_FALSE(pg->trainable);
    CHECK(pg->name == name);
    CHECK(names.insert(name).second);  // unique
  }
  CHECK(m.trainable_params() == 0);
}

TEST_CASE("student at init with full keep ratio reproduces the teacher") {
  ToyTransformer teacher = build_teacher(tiny_cfg(), 7);
  ToyTransformer student = derive_student(teacher, 1.0f);
  Rng rng(8);
  FwdCtx tc, sc;
  for (int i = 0; i < 5; ++i) {
    Tensor x = rng.normal_tensor({6, 4});
    Tensor ty = teacher.forward(tc, x);
    Tensor sy = student.forward(sc, x);
    CHECK(testutil::max_abs_diff(ty, sy) < 1e-5f);
  }
}

TEST_CASE("derive_student: trainable set is exactly the output projections") {
  ModelConfig cfg = tiny_cfg();
  ToyTransformer teacher = build_teacher(cfg, 9);
  ToyTransformer student = derive_student(teacher, 0.25f);

  CHECK(student.uses_sla());
  CHECK(student.trainable_params() ==
        static_cast<long long>(cfg.layers) * cfg.dim * cfg.dim);
  for (auto& [name, pg] : student.param_groups()) {
    if (pg->trainable) {
      CHECK(name.find(".attn.wo.") != std::string::npos);
    }
  }
  // wo starts at exactly zero
  for (auto& blk : student.blocks) {
    const SlaParams& p = std::get<SlaParams>(blk.attn);
    for (float v : p.wo.W.tensor.data) CHECK(v == 0.0f);
    CHECK(p.keep_ratio == 0.25f);
  }
  // trainable fraction is reported through the counts
  const double fraction = static_cast<double>(student.trainable_params()) /
                          static_cast<double>(student.total_params());
  CHECK(fraction > 0.0);
  CHECK(fraction < 1.0);

  CHECK_THROWS_AS(derive_student(teacher, 1.5f), std::invalid_argument);
  CHECK_THROWS_AS(derive_student(student, 0.5f), std::invalid_argument);  // already SLA
}

TEST_CASE("frozen student parameters stay bitwise equal to the teacher under training") {
  ToyTransformer teacher = build_teacher(tiny_cfg(), 10);
  ToyTransformer student = derive_student(teacher, 0.5f);
  Rng rng(11);

  auto teacher_params = teacher.param_groups();
  for (int step = 0; step < 100; ++step) {
    Tape tape;
    FwdCtx ctx(&tape);
    Tensor x = rng.normal_tensor({4, 4});
    Tensor out = student.forward(ctx, x);
    tape.backward(sum(out));
    sgd_step(student.param_groups(), ctx, 0.05f);
  }

  auto student_params = student.param_groups();
  std::size_t checked = 0;
  for (auto& [sname, spg] : student_params) {
    if (spg->trainable) continue;
    for (auto& [tname, tpg] : teacher_params) {
      if (tname == sname) {
        CHECK(testutil::bitwise_equal(spg->tensor.data, tpg->tensor.data));
        ++checked;
        break;
      }
    }
  }
  CHECK(checked == teacher_params.size());  // every teacher param has a frozen twin

  // the trainable projections did move
  bool moved = false;
  for (auto& blk : student.blocks) {
    for (float v : std::get<SlaParams>(blk.attn).wo.W.tensor.data) moved |= (v != 0.0f);
  }
  CHECK(moved);
}

TEST_CASE("register_hooks matches patterns and records per pass") {
  ToyTransformer m = build_teacher(tiny_cfg(), 12);
  auto names = register_hooks(m, "*attn*");
  CHECK(names == std::vector<std::string>{"block0.attn", "block1.attn", "block2.attn"});
  CHECK_THROWS_AS(register_hooks(m, "*nothing*"), std::invalid_argument);

  auto one = register_hooks(m, "block1.attn");
  CHECK(one.size() == 1);

  register_hooks(m, "*attn*");
  Rng rng(13);
  FwdCtx ctx;
  std::vector<HookRecord> records;
  m.forward(ctx, rng.normal_tensor({6, 4}), &records);
  REQUIRE(records.size() == 3);
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].module == "block" + std::to_string(i) + ".attn");
    CHECK(records[i].value.shape == std::vector<int>{6, 8});
    CHECK_FALSE(records[i].value.on_tape());  // tapeless forward leaves no linkage
  }

  // records are per pass, not accumulated
  std::vector<HookRecord> second;
  m.forward(ctx, rng.normal_tensor({6, 4}), &second);
  CHECK(second.size() == 3);
}

TEST_CASE("student hook records stay on the tape, teacher records do not") {
  ToyTransformer teacher = build_teacher(tiny_cfg(), 14);
  ToyTransformer student = derive_student(teacher, 0.5f);
  register_hooks(teacher, "*attn*");
  register_hooks(student, "*attn*");

  Rng rng(15);
  Tensor x = rng.normal_tensor({6, 4});

  FwdCtx tc;
  std::vector<HookRecord> trec;
  teacher.forward(tc, x, &trec);
  for (auto& r : trec) CHECK_FALSE(r.value.on_tape());

  Tape tape;
  FwdCtx sc(&tape);
  std::vector<HookRecord> srec;
  student.forward(sc, x, &srec);
  for (auto& r : srec) CHECK(r.value.on_tape());
}

TEST_CASE("linear layer registry covers attention, mlp, embed and head") {
  ToyTransformer teacher = build_teacher(tiny_cfg(), 16);
  auto layers = teacher.linear_layers();
  // embed + 3 blocks * (wq, wk, wv, fc1, fc2) + head
  CHECK(layers.size() == 1 + 3 * 5 + 1);

  ToyTransformer student = derive_student(teacher, 0.5f);
  auto slayers = student.linear_layers();
  CHECK(slayers.size() == 1 + 3 * 6 + 1);  // + wo per block
}

TEST_CASE("policy application touches only matching layers and is idempotent") {
  ToyTransformer student = derive_student(build_teacher(tiny_cfg(), 17), 0.5f);
  QuantPolicy policy;
  policy.include = {"*attn*", "*mlp*"};
  policy.exclude = {"*norm*"};
  const int converted = apply_policy(student, policy);
  CHECK(converted == 3 * 6);  // qkv + wo + fc1 + fc2 per block
  CHECK(apply_policy(student, policy) == 0);

  for (auto& [name, layer] : student.linear_layers()) {
    if (name == "embed" || name == "head") {
      CHECK_FALSE(layer->enabled);
    } else {
      CHECK(layer->enabled);
    }
  }
}
