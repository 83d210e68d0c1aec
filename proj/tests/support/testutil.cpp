// SPDX-License-Identifier: Apache-2.0
#include "testutil.hpp"

#include <algorithm>

namespace testutil {

using lt3r::BoolMask;
using lt3r::Rng;
using lt3r::Tensor;

namespace {

int dim(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
}

LossFn weighted(std::function<Tensor(std::vector<Tensor>&)> op, Tensor weights) {
  return [op = std::move(op), weights = std::move(weights)](std::vector<Tensor>& in) {
    return lt3r::sum(lt3r::mul(op(in), weights));
  };
}

Tensor rnd(Rng& rng, std::vector<int> shape, float lo = -2.0f, float hi = 2.0f) {
  return rng.uniform_tensor(std::move(shape), lo, hi);
}

// Nonzero tensor bounded away from zero, random sign per element.
Tensor rnd_away_from_zero(Rng& rng, std::vector<int> shape, float lo, float hi) {
  Tensor t = rng.uniform_tensor(std::move(shape), lo, hi);
  for (float& v : t.data) {
    if (rng.next_u64() & 1) v = -v;
  }
  return t;
}

}  // namespace

std::vector<OpCase> differentiable_op_cases() {
  std::vector<OpCase> cases;

  cases.push_back({"matmul", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), k = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, k}), rnd(rng, {k, n})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::matmul(in[0], in[1]); },
                         rnd(rng, {m, n}));
                     return inst;
                   }});

  cases.push_back({"matvec", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n}), rnd(rng, {n})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::matvec(in[0], in[1]); },
                         rnd(rng, {m}));
                     return inst;
                   }});

  cases.push_back({"transpose", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::transpose(in[0]); },
                         rnd(rng, {n, m}));
                     return inst;
                   }});

  auto elementwise_case = [](const std::string& name,
                             Tensor (*op)(const Tensor&, const Tensor&),
                             bool denom_away_from_zero) {
    return OpCase{name, [op, denom_away_from_zero](Rng& rng) {
                    const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                    OpInstance inst;
                    Tensor b = denom_away_from_zero
                                   ? rnd_away_from_zero(rng, {m, n}, 0.7f, 1.5f)
                                   : rnd(rng, {m, n});
                    inst.inputs = {rnd(rng, {m, n}), std::move(b)};
                    inst.f = weighted(
                        [op](std::vector<Tensor>& in) { return op(in[0], in[1]); },
                        rnd(rng, {m, n}));
                    return inst;
                  }};
  };
  cases.push_back(elementwise_case("add", &lt3r::add, false));
  cases.push_back(elementwise_case("sub", &lt3r::sub, false));
  cases.push_back(elementwise_case("mul", &lt3r::mul, false));
  cases.push_back(elementwise_case("div", &lt3r::div, true));

  cases.push_back({"add_rowvec", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n}), rnd(rng, {n})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::add_rowvec(in[0], in[1]); },
                         rnd(rng, {m, n}));
                     return inst;
                   }});

  cases.push_back({"div_rowvec", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n}),
                                    rng.uniform_tensor({m}, 0.7f, 2.0f)};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) {
                           return lt3r::div_rowvec(in[0], in[1], 1e-8f);
                         },
                         rnd(rng, {m, n}));
                     return inst;
                   }});

  cases.push_back({"scale", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::scale(in[0], 0.37f); },
                         rnd(rng, {m, n}));
                     return inst;
                   }});

  cases.push_back({"softmax_rows", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 2, 6);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n}, -3.0f, 3.0f)};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::softmax_rows(in[0]); },
                         rnd(rng, {m, n}));
                     return inst;
                   }});

  cases.push_back({"softmax_rows_masked", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 2, 6);
                     BoolMask mask(m, n);
                     for (int i = 0; i < m; ++i) {
                       for (int j = 0; j < n; ++j) mask.set(i, j, (rng.next_u64() & 1) != 0);
                       mask.set(i, dim(rng, 0, n - 1), true);  // at least one kept
                     }
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n}, -3.0f, 3.0f)};
                     inst.f = weighted(
                         [mask](std::vector<Tensor>& in) {
                           return lt3r::softmax_rows(in[0], mask);
                         },
                         rnd(rng, {m, n}));
                     return inst;
                   }});

  auto unary_case = [](const std::string& name, Tensor (*op)(const Tensor&)) {
    return OpCase{name, [op](Rng& rng) {
                    const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                    OpInstance inst;
                    inst.inputs = {rnd(rng, {m, n}, -3.0f, 3.0f)};
                    inst.f = weighted(
                        [op](std::vector<Tensor>& in) { return op(in[0]); },
                        rnd(rng, {m, n}));
                    return inst;
                  }};
  };
  cases.push_back(unary_case("elu_plus_one", &lt3r::elu_plus_one));
  cases.push_back(unary_case("gelu", &lt3r::gelu));

  cases.push_back({"layer_norm", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 2, 6);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n}),
                                    rng.uniform_tensor({n}, 0.5f, 1.5f),
                                    rnd(rng, {n}, -0.5f, 0.5f)};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) {
                           return lt3r::layer_norm(in[0], in[1], in[2]);
                         },
                         rnd(rng, {m, n}));
                     return inst;
                   }});

  cases.push_back({"row_sum", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::row_sum(in[0]); },
                         rnd(rng, {m}));
                     return inst;
                   }});

  cases.push_back({"row_max", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     // keep row entries separated so the max is stable under
                     // the finite-difference step
                     Tensor x({m, n});
                     for (;;) {
                       x = rnd(rng, {m, n});
                       bool ok = true;
                       for (int i = 0; i < m && ok; ++i) {
                         for (int j = 0; j < n && ok; ++j) {
                           for (int j2 = j + 1; j2 < n; ++j2) {
                             if (std::fabs(x.at(i, j) - x.at(i, j2)) < 0.05f) {
                               ok = false;
                               break;
                             }
                           }
                         }
                       }
                       if (ok) break;
                     }
                     OpInstance inst;
                     inst.inputs = {std::move(x)};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::row_max(in[0]); },
                         rnd(rng, {m}));
                     return inst;
                   }});

  cases.push_back({"col_sum", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) { return lt3r::col_sum(in[0]); },
                         rnd(rng, {n}));
                     return inst;
                   }});

  cases.push_back({"sum", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n})};
                     inst.f = [](std::vector<Tensor>& in) {
                       return lt3r::scale(lt3r::sum(in[0]), 0.7f);
                     };
                     return inst;
                   }});

  cases.push_back({"mean", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n})};
                     inst.f = [](std::vector<Tensor>& in) {
                       return lt3r::scale(lt3r::mean(in[0]), 1.3f);
                     };
                     return inst;
                   }});

  cases.push_back({"mse", [](Rng& rng) {
                     const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {m, n}), rnd(rng, {m, n})};
                     inst.f = [](std::vector<Tensor>& in) { return lt3r::mse(in[0], in[1]); };
                     return inst;
                   }});

  cases.push_back({"linear", [](Rng& rng) {
                     const int n = dim(rng, 1, 5), k = dim(rng, 1, 5), m = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {n, k}), rnd(rng, {m, k}), rnd(rng, {m})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) {
                           return lt3r::linear(in[0], in[1], &in[2]);
                         },
                         rnd(rng, {n, m}));
                     return inst;
                   }});

  cases.push_back({"linear_nobias", [](Rng& rng) {
                     const int n = dim(rng, 1, 5), k = dim(rng, 1, 5), m = dim(rng, 1, 5);
                     OpInstance inst;
                     inst.inputs = {rnd(rng, {n, k}), rnd(rng, {m, k})};
                     inst.f = weighted(
                         [](std::vector<Tensor>& in) {
                           return lt3r::linear(in[0], in[1], nullptr);
                         },
                         rnd(rng, {n, m}));
                     return inst;
                   }});

  return cases;
}

SweepResult gradcheck_sweep(int instances, std::uint64_t seed, double tol, bool* all_ok) {
  SweepResult worst;
  bool ok = true;
  for (const OpCase& c : differentiable_op_cases()) {
    Rng rng(seed);
    for (int i = 0; i < instances; ++i) {
      OpInstance inst = c.make(rng);
      GradCheck g = gradcheck(inst.f, inst.inputs);
      if (g.max_rel_err > worst.max_rel_err) {
        worst.max_rel_err = g.max_rel_err;
        worst.op = c.name;
      }
      if (g.max_rel_err > tol) ok = false;
    }
  }
  if (all_ok != nullptr) *all_ok = ok;
  return worst;
}

}  // namespace testutil
