// SPDX-License-Identifier: Apache-2.0
#include "lt3r/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

namespace lt3r {

// ---------------------------------------------------------------------------
// allocation tracking
// ---------------------------------------------------------------------------

namespace {
std::atomic<long long> g_live_bytes{0};
std::atomic<long long> g_peak_bytes{0};
}  // namespace

namespace detail {

void track_alloc(long long bytes) {
  long long live = g_live_bytes.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  long long peak = g_peak_bytes.load(std::memory_order_relaxed);
  while (live > peak &&
         !g_peak_bytes.compare_exchange_weak(peak, live, std::memory_order_relaxed)) {
  }
}

void track_free(long long bytes) { g_live_bytes.fetch_sub(bytes, std::memory_order_relaxed); }

}  // namespace detail

long long live_tensor_bytes() { return g_live_bytes.load(std::memory_order_relaxed); }
long long peak_tensor_bytes() { return g_peak_bytes.load(std::memory_order_relaxed); }
void reset_peak_tensor_bytes() {
  g_peak_bytes.store(g_live_bytes.load(std::memory_order_relaxed), std::memory_order_relaxed);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

namespace {

long long shape_numel(const std::vector<int>& shape) {
  long long n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor dims must be non-negative");
    n *= d;
  }
  return n;
}

[[noreturn]] void shape_error(const char* op) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

void require(bool cond, const char* op) {
  if (!cond) shape_error(op);
}

void check_finite(const FloatBuf& v, const char* op) {
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string(op) + ": produced non-finite values");
    }
  }
}

Tape* joint_tape(const Tensor& a, const Tensor& b) {
  if (a.on_tape() && b.on_tape() && a.tape != b.tape) {
    throw std::invalid_argument("operands belong to different tapes");
  }
  if (a.on_tape()) return a.tape;
  if (b.on_tape()) return b.tape;
  return nullptr;
}

// C[MxN] = A[MxK] * B[KxN]; per element the accumulation order is k ascending,
// which keeps results bit-identical to a naive triple loop.
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = a[static_cast<std::size_t>(i) * k + p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[MxN] = A[MxK] * B[NxK]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[static_cast<std::size_t>(i) * n + j] = acc;
    }
  }
}

// C[KxN] = A[MxK]^T * B[MxN]
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
  std::fill(c, c + static_cast<std::size_t>(k) * n, 0.0f);
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    const float* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      float* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
}

Tensor::Tensor(std::vector<int> s, std::initializer_list<float> values) : shape(std::move(s)) {
  if (shape_numel(shape) != static_cast<long long>(values.size())) {
    throw std::invalid_argument("tensor init: shape/data size mismatch");
  }
  data.assign(values.begin(), values.end());
}

Tensor::Tensor(std::vector<int> s, FloatBuf values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != static_cast<long long>(data.size())) {
    throw std::invalid_argument("tensor init: shape/data size mismatch");
  }
}

Tensor::Tensor(std::vector<int> s, const std::vector<float>& values) : shape(std::move(s)) {
  if (shape_numel(shape) != static_cast<long long>(values.size())) {
    throw std::invalid_argument("tensor init: shape/data size mismatch");
  }
  data.assign(values.begin(), values.end());
}

long long Tensor::numel() const { return static_cast<long long>(data.size()); }

int Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("rows(): tensor is not rank-2");
  return shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("cols(): tensor is not rank-2");
  return shape[1];
}

float Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item(): tensor is not a scalar");
  return data[0];
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape = shape;
  t.data = data;
  return t;
}

int BoolMask::row_count(int r) const {
  int n = 0;
  for (int c = 0; c < cols; ++c) n += keep[static_cast<std::size_t>(r) * cols + c];
  return n;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value) {
  if (value.on_tape()) throw std::invalid_argument("leaf(): tensor is already on a tape");
  check_finite(value.data, "leaf");
  Tensor t = value;
  t.tape = this;
  t.node = add_node("leaf", {}, value.numel(), nullptr);
  return t;
}

int Tape::add_node(const char* op, std::vector<int> parents, long long numel, BackFn back) {
  parents.erase(std::remove_if(parents.begin(), parents.end(), [](int p) { return p < 0; }),
                parents.end());
  nodes_.push_back(Node{op, std::move(parents), numel, std::move(back), FloatBuf{}});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accum_grad(int node, const float* values, long long n) {
  Node& nd = nodes_[static_cast<std::size_t>(node)];
  if (nd.grad.empty()) nd.grad.assign(static_cast<std::size_t>(nd.numel), 0.0f);
  for (long long i = 0; i < n; ++i) nd.grad[static_cast<std::size_t>(i)] += values[i];
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape != this || loss.node < 0 ||
      loss.node >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("backward(): loss node is not on this tape");
  }
  if (loss.numel() != 1) throw std::invalid_argument("backward(): loss must be scalar");

  // Mark everything reachable from the loss so each node's backward runs at
  // most once and disconnected subgraphs are skipped.
  std::vector<std::uint8_t> reachable(nodes_.size(), 0);
  std::vector<int> stack{loss.node};
  reachable[static_cast<std::size_t>(loss.node)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : nodes_[static_cast<std::size_t>(id)].parents) {
      if (!reachable[static_cast<std::size_t>(p)]) {
        reachable[static_cast<std::size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (reachable[i]) {
      nodes_[i].grad.assign(static_cast<std::size_t>(nodes_[i].numel), 0.0f);
    } else {
      nodes_[i].grad.clear();
    }
  }
  nodes_[static_cast<std::size_t>(loss.node)].grad[0] = 1.0f;

  for (int i = loss.node; i >= 0; --i) {
    const Node& nd = nodes_[static_cast<std::size_t>(i)];
    if (reachable[static_cast<std::size_t>(i)] && nd.back) nd.back(*this, i);
  }
}

const FloatBuf& Tape::grad(int node) const {
  if (node < 0 || node >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("grad(): node not on tape");
  }
  return nodes_[static_cast<std::size_t>(node)].grad;
}

void Tape::reset() { nodes_.clear(); }

Tensor FwdCtx::use(const ParamGroup& pg) {
  if (!tape || !pg.trainable) return pg.tensor;
  auto it = staged.find(&pg);
  if (it != staged.end()) return it->second;
  Tensor t = tape->leaf(pg.tensor);
  staged.emplace(&pg, t);
  return t;
}

const FloatBuf* FwdCtx::grad_of(const ParamGroup& pg) const {
  if (!tape) return nullptr;
  auto it = staged.find(&pg);
  if (it == staged.end()) return nullptr;
  const FloatBuf& g = tape->grad(it->second.node);
  return g.empty() ? nullptr : &g;
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

float Rng::uniform() { return static_cast<float>(gen_() >> 40) * 0x1.0p-24f; }

float Rng::normal() {
  double u1 = 1.0 - static_cast<double>(gen_() >> 11) * 0x1.0p-53;  // (0, 1]
  double u2 = static_cast<double>(gen_() >> 11) * 0x1.0p-53;        // [0, 1)
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                            std::cos(2.0 * std::numbers::pi * u2));
}

Tensor Rng::normal_tensor(std::vector<int> shape, float stddev) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = normal() * stddev;
  return t;
}

Tensor Rng::uniform_tensor(std::vector<int> shape, float lo, float hi) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = uniform(lo, hi);
  return t;
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace {

// Finalizes an op result: finite check, then tape registration when needed.
Tensor finish(Tensor out, const char* op, Tape* tape, std::vector<int> parents,
              Tape::BackFn back) {
  check_finite(out.data, op);
  if (!tape) return out;
  out.tape = tape;
  out.node = tape->add_node(op, std::move(parents), out.numel(), std::move(back));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(), "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  gemm_nn(a.data.data(), b.data.data(), out.data.data(), m, k, n);

  Tape* t = joint_tape(a, b);
  if (!t) return finish(std::move(out), "matmul", nullptr, {}, nullptr);
  const int an = a.node, bn = b.node;
  FloatBuf av = a.data, bv = b.data;
  auto back = [an, bn, av = std::move(av), bv = std::move(bv), m, k, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    if (an >= 0) {
      FloatBuf ga(static_cast<std::size_t>(m) * k);
      gemm_nt(g.data(), bv.data(), ga.data(), m, n, k);  // G[MxN] * B[KxN]^T
      tp.accum_grad(an, ga.data(), static_cast<long long>(ga.size()));
    }
    if (bn >= 0) {
      FloatBuf gb(static_cast<std::size_t>(k) * n);
      gemm_tn(av.data(), g.data(), gb.data(), m, k, n);  // A^T * G
      tp.accum_grad(bn, gb.data(), static_cast<long long>(gb.size()));
    }
  };
  return finish(std::move(out), "matmul", t, {a.node, b.node}, std::move(back));
}

Tensor matvec(const Tensor& a, const Tensor& v) {
  require(a.rank() == 2 && v.rank() == 1 && a.cols() == v.shape[0], "matvec");
  const int m = a.rows(), n = a.cols();
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    float acc = 0.0f;
    for (int j = 0; j < n; ++j) acc += a.at(i, j) * v.data[static_cast<std::size_t>(j)];
    out.data[static_cast<std::size_t>(i)] = acc;
  }

  Tape* t = joint_tape(a, v);
  if (!t) return finish(std::move(out), "matvec", nullptr, {}, nullptr);
  const int an = a.node, vn = v.node;
  FloatBuf av = a.data, vv = v.data;
  auto back = [an, vn, av = std::move(av), vv = std::move(vv), m, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    if (an >= 0) {
      FloatBuf ga(static_cast<std::size_t>(m) * n);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<std::size_t>(i) * n + j] = g[static_cast<std::size_t>(i)] * vv[static_cast<std::size_t>(j)];
      tp.accum_grad(an, ga.data(), static_cast<long long>(ga.size()));
    }
    if (vn >= 0) {
      FloatBuf gv(static_cast<std::size_t>(n), 0.0f);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          gv[static_cast<std::size_t>(j)] += av[static_cast<std::size_t>(i) * n + j] * g[static_cast<std::size_t>(i)];
      tp.accum_grad(vn, gv.data(), static_cast<long long>(gv.size()));
    }
  };
  return finish(std::move(out), "matvec", t, {a.node, v.node}, std::move(back));
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose");
  const int m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);

  if (!a.on_tape()) return finish(std::move(out), "transpose", nullptr, {}, nullptr);
  const int an = a.node;
  auto back = [an, m, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);  // [n x m]
    FloatBuf ga(static_cast<std::size_t>(m) * n);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        ga[static_cast<std::size_t>(i) * n + j] = g[static_cast<std::size_t>(j) * m + i];
    tp.accum_grad(an, ga.data(), static_cast<long long>(ga.size()));
  };
  return finish(std::move(out), "transpose", a.tape, {an}, std::move(back));
}

// y = x * W^T (+ bias); x [N x d_in], W [d_out x d_in], bias [d_out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
  require(x.rank() == 2 && w.rank() == 2 && x.cols() == w.cols(), "linear");
  if (bias) require(bias->rank() == 1 && bias->shape[0] == w.rows(), "linear");
  const int n = x.rows(), k = x.cols(), m = w.rows();
  Tensor out({n, m});
  gemm_nt(x.data.data(), w.data.data(), out.data.data(), n, k, m);
  if (bias) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) out.at(i, j) += bias->data[static_cast<std::size_t>(j)];
  }

  Tape* t = joint_tape(x, w);
  if (bias) {
    Tape* tb = joint_tape(*bias, *bias);
    if (t && tb && t != tb) throw std::invalid_argument("operands belong to different tapes");
    if (!t) t = tb;
  }
  if (!t) return finish(std::move(out), "linear", nullptr, {}, nullptr);
  const int xn = x.node, wn = w.node, bn = bias ? bias->node : -1;
  FloatBuf xv = x.data, wv = w.data;
  auto back = [xn, wn, bn, xv = std::move(xv), wv = std::move(wv), n, k, m](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);  // [n x m]
    if (xn >= 0) {
      FloatBuf gx(static_cast<std::size_t>(n) * k);
      gemm_nn(g.data(), wv.data(), gx.data(), n, m, k);  // G * W
      tp.accum_grad(xn, gx.data(), static_cast<long long>(gx.size()));
    }
    if (wn >= 0) {
      FloatBuf gw(static_cast<std::size_t>(m) * k);
      gemm_tn(g.data(), xv.data(), gw.data(), n, m, k);  // G^T * X
      tp.accum_grad(wn, gw.data(), static_cast<long long>(gw.size()));
    }
    if (bn >= 0) {
      FloatBuf gb(static_cast<std::size_t>(m), 0.0f);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * m + j];
      tp.accum_grad(bn, gb.data(), static_cast<long long>(gb.size()));
    }
  };
  return finish(std::move(out), "linear", t, {x.node, w.node, bn}, std::move(back));
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

using BinFwd = float (*)(float, float);

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, BinFwd f,
                          // (ga, gb) contributions given (g, av, bv, out)
                          void (*back_fill)(const FloatBuf& g, const FloatBuf& av,
                                            const FloatBuf& bv, FloatBuf* ga, FloatBuf* gb)) {
  require(a.shape == b.shape, op);
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);

  Tape* t = joint_tape(a, b);
  if (!t) return finish(std::move(out), op, nullptr, {}, nullptr);
  const int an = a.node, bn = b.node;
  FloatBuf av = a.data, bv = b.data;
  auto back = [an, bn, av = std::move(av), bv = std::move(bv), back_fill](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    FloatBuf ga, gb;
    back_fill(g, av, bv, an >= 0 ? &ga : nullptr, bn >= 0 ? &gb : nullptr);
    if (an >= 0) tp.accum_grad(an, ga.data(), static_cast<long long>(ga.size()));
    if (bn >= 0) tp.accum_grad(bn, gb.data(), static_cast<long long>(gb.size()));
  };
  return finish(std::move(out), op, t, {a.node, b.node}, std::move(back));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](float x, float y) { return x + y; },
      [](const FloatBuf& g, const FloatBuf&, const FloatBuf&, FloatBuf* ga, FloatBuf* gb) {
        if (ga) *ga = g;
        if (gb) *gb = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](const FloatBuf& g, const FloatBuf&, const FloatBuf&, FloatBuf* ga, FloatBuf* gb) {
        if (ga) *ga = g;
        if (gb) {
          gb->resize(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] = -g[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](const FloatBuf& g, const FloatBuf& av, const FloatBuf& bv, FloatBuf* ga, FloatBuf* gb) {
        if (ga) {
          ga->resize(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] = g[i] * bv[i];
        }
        if (gb) {
          gb->resize(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] = g[i] * av[i];
        }
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "div", [](float x, float y) { return x / y; },
      [](const FloatBuf& g, const FloatBuf& av, const FloatBuf& bv, FloatBuf* ga, FloatBuf* gb) {
        if (ga) {
          ga->resize(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] = g[i] / bv[i];
        }
        if (gb) {
          gb->resize(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] = -g[i] * av[i] / (bv[i] * bv[i]);
        }
      });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require(a.rank() == 2 && v.rank() == 1 && v.shape[0] == a.cols(), "add_rowvec");
  const int m = a.rows(), n = a.cols();
  Tensor out(a.shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) + v.data[static_cast<std::size_t>(j)];

  Tape* t = joint_tape(a, v);
  if (!t) return finish(std::move(out), "add_rowvec", nullptr, {}, nullptr);
  const int an = a.node, vn = v.node;
  auto back = [an, vn, m, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    if (an >= 0) tp.accum_grad(an, g.data(), static_cast<long long>(g.size()));
    if (vn >= 0) {
      FloatBuf gv(static_cast<std::size_t>(n), 0.0f);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gv[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
      tp.accum_grad(vn, gv.data(), static_cast<long long>(gv.size()));
    }
  };
  return finish(std::move(out), "add_rowvec", t, {a.node, v.node}, std::move(back));
}

Tensor div_rowvec(const Tensor& a, const Tensor& z, float eps) {
  require(a.rank() == 2 && z.rank() == 1 && z.shape[0] == a.rows(), "div_rowvec");
  const int m = a.rows(), n = a.cols();
  Tensor out(a.shape);
  FloatBuf den(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) den[static_cast<std::size_t>(i)] = std::max(z.data[static_cast<std::size_t>(i)], eps);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) / den[static_cast<std::size_t>(i)];

  Tape* t = joint_tape(a, z);
  if (!t) return finish(std::move(out), "div_rowvec", nullptr, {}, nullptr);
  const int an = a.node, zn = z.node;
  FloatBuf av = a.data, zv = z.data;
  auto back = [an, zn, av = std::move(av), zv = std::move(zv), den = std::move(den), eps, m,
               n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    if (an >= 0) {
      FloatBuf ga(static_cast<std::size_t>(m) * n);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<std::size_t>(i) * n + j] = g[static_cast<std::size_t>(i) * n + j] / den[static_cast<std::size_t>(i)];
      tp.accum_grad(an, ga.data(), static_cast<long long>(ga.size()));
    }
    if (zn >= 0) {
      FloatBuf gz(static_cast<std::size_t>(m), 0.0f);
      for (int i = 0; i < m; ++i) {
        if (zv[static_cast<std::size_t>(i)] <= eps) continue;  // clamped rows are flat
        const float d = den[static_cast<std::size_t>(i)];
        float acc = 0.0f;
        for (int j = 0; j < n; ++j)
          acc += g[static_cast<std::size_t>(i) * n + j] * av[static_cast<std::size_t>(i) * n + j];
        gz[static_cast<std::size_t>(i)] = -acc / (d * d);
      }
      tp.accum_grad(zn, gz.data(), static_cast<long long>(gz.size()));
    }
  };
  return finish(std::move(out), "div_rowvec", t, {a.node, z.node}, std::move(back));
}

Tensor scale(const Tensor& a, float c) {
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * c;
  if (!a.on_tape()) return finish(std::move(out), "scale", nullptr, {}, nullptr);
  const int an = a.node;
  auto back = [an, c](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    FloatBuf ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
    tp.accum_grad(an, ga.data(), static_cast<long long>(ga.size()));
  };
  return finish(std::move(out), "scale", a.tape, {an}, std::move(back));
}

// ---------------------------------------------------------------------------
// softmax / activations
// ---------------------------------------------------------------------------

namespace {

Tensor softmax_impl(const Tensor& s, const BoolMask* mask) {
  require(s.rank() == 2, "softmax_rows");
  const int m = s.rows(), n = s.cols();
  if (mask) {
    require(mask->rows == m && mask->cols == n, "softmax_rows");
    for (int i = 0; i < m; ++i) {
      if (mask->row_count(i) == 0) {
        throw std::invalid_argument("softmax_rows: all entries masked in a row");
      }
    }
  }

  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < n; ++j) {
      if (!mask || mask->at(i, j)) mx = std::max(mx, s.at(i, j));
    }
    float z = 0.0f;
    for (int j = 0; j < n; ++j) {
      if (!mask || mask->at(i, j)) {
        const float e = std::exp(s.at(i, j) - mx);
        out.at(i, j) = e;
        z += e;
      } else {
        out.at(i, j) = 0.0f;
      }
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= z;
  }

  if (!s.on_tape()) return finish(std::move(out), "softmax_rows", nullptr, {}, nullptr);
  const int sn = s.node;
  FloatBuf yv = out.data;
  std::vector<std::uint8_t> keep = mask ? mask->keep : std::vector<std::uint8_t>{};
  auto back = [sn, yv = std::move(yv), keep = std::move(keep), m, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    FloatBuf gs(static_cast<std::size_t>(m) * n, 0.0f);
    for (int i = 0; i < m; ++i) {
      float dot = 0.0f;
      for (int j = 0; j < n; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * n + j;
        dot += g[idx] * yv[idx];
      }
      for (int j = 0; j < n; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * n + j;
        if (!keep.empty() && keep[idx] == 0) continue;
        gs[idx] = yv[idx] * (g[idx] - dot);
      }
    }
    tp.accum_grad(sn, gs.data(), static_cast<long long>(gs.size()));
  };
  return finish(std::move(out), "softmax_rows", s.tape, {sn}, std::move(back));
}

}  // namespace

Tensor softmax_rows(const Tensor& s) { return softmax_impl(s, nullptr); }
Tensor softmax_rows(const Tensor& s, const BoolMask& mask) { return softmax_impl(s, &mask); }

Tensor elu_plus_one(const Tensor& x) {
  Tensor out(x.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const float v = x.data[i];
    out.data[i] = v >= 0.0f ? v + 1.0f : std::exp(v);
  }
  if (!x.on_tape()) return finish(std::move(out), "elu_plus_one", nullptr, {}, nullptr);
  const int xn = x.node;
  FloatBuf xv = x.data, yv = out.data;
  auto back = [xn, xv = std::move(xv), yv = std::move(yv)](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    FloatBuf gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      // derivative is 1 above zero and equals the output (= exp(x)) below
      gx[i] = xv[i] >= 0.0f ? g[i] : g[i] * yv[i];
    }
    tp.accum_grad(xn, gx.data(), static_cast<long long>(gx.size()));
  };
  return finish(std::move(out), "elu_plus_one", x.tape, {xn}, std::move(back));
}

Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.7071067811865476f;
  constexpr float kInvSqrt2Pi = 0.3989422804014327f;
  Tensor out(x.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const float v = x.data[i];
    out.data[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  }
  if (!x.on_tape()) return finish(std::move(out), "gelu", nullptr, {}, nullptr);
  const int xn = x.node;
  FloatBuf xv = x.data;
  auto back = [xn, xv = std::move(xv)](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    FloatBuf gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float v = xv[i];
      const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
      const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
      gx[i] = g[i] * (cdf + v * pdf);
    }
    tp.accum_grad(xn, gx.data(), static_cast<long long>(gx.size()));
  };
  return finish(std::move(out), "gelu", x.tape, {xn}, std::move(back));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require(x.rank() == 2 && gamma.rank() == 1 && beta.rank() == 1, "layer_norm");
  require(gamma.shape[0] == x.cols() && beta.shape[0] == x.cols(), "layer_norm");
  const int m = x.rows(), n = x.cols();

  Tensor out({m, n});
  FloatBuf xhat(static_cast<std::size_t>(m) * n);
  FloatBuf inv_std(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    float mu = 0.0f;
    for (int j = 0; j < n; ++j) mu += x.at(i, j);
    mu /= static_cast<float>(n);
    float var = 0.0f;
    for (int j = 0; j < n; ++j) {
      const float d = x.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<float>(n);
    const float is = 1.0f / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      const float h = (x.at(i, j) - mu) * is;
      xhat[static_cast<std::size_t>(i) * n + j] = h;
      out.at(i, j) = h * gamma.data[static_cast<std::size_t>(j)] + beta.data[static_cast<std::size_t>(j)];
    }
  }

  Tape* t = joint_tape(x, gamma);
  if (beta.on_tape()) {
    if (t && beta.tape != t) throw std::invalid_argument("operands belong to different tapes");
    if (!t) t = beta.tape;
  }
  if (!t) return finish(std::move(out), "layer_norm", nullptr, {}, nullptr);
  const int xn = x.node, gn = gamma.node, bn = beta.node;
  FloatBuf gv = gamma.data;
  auto back = [xn, gn, bn, gv = std::move(gv), xhat = std::move(xhat),
               inv_std = std::move(inv_std), m, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    if (gn >= 0) {
      FloatBuf gg(static_cast<std::size_t>(n), 0.0f);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * n + j;
          gg[static_cast<std::size_t>(j)] += g[idx] * xhat[idx];
        }
      tp.accum_grad(gn, gg.data(), static_cast<long long>(gg.size()));
    }
    if (bn >= 0) {
      FloatBuf gb(static_cast<std::size_t>(n), 0.0f);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
      tp.accum_grad(bn, gb.data(), static_cast<long long>(gb.size()));
    }
    if (xn >= 0) {
      FloatBuf gx(static_cast<std::size_t>(m) * n);
      for (int i = 0; i < m; ++i) {
        float sum_gy = 0.0f, sum_gyh = 0.0f;
        for (int j = 0; j < n; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * n + j;
          const float gy = g[idx] * gv[static_cast<std::size_t>(j)];
          sum_gy += gy;
          sum_gyh += gy * xhat[idx];
        }
        const float inv_n = 1.0f / static_cast<float>(n);
        for (int j = 0; j < n; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * n + j;
          const float gy = g[idx] * gv[static_cast<std::size_t>(j)];
          gx[idx] = inv_std[static_cast<std::size_t>(i)] *
                    (gy - inv_n * sum_gy - xhat[idx] * inv_n * sum_gyh);
        }
      }
      tp.accum_grad(xn, gx.data(), static_cast<long long>(gx.size()));
    }
  };
  return finish(std::move(out), "layer_norm", t, {xn, gn, bn}, std::move(back));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor row_sum(const Tensor& x) {
  require(x.rank() == 2, "row_sum");
  const int m = x.rows(), n = x.cols();
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    float acc = 0.0f;
    for (int j = 0; j < n; ++j) acc += x.at(i, j);
    out.data[static_cast<std::size_t>(i)] = acc;
  }
  if (!x.on_tape()) return finish(std::move(out), "row_sum", nullptr, {}, nullptr);
  const int xn = x.node;
  auto back = [xn, m, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    FloatBuf gx(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(i) * n + j] = g[static_cast<std::size_t>(i)];
    tp.accum_grad(xn, gx.data(), static_cast<long long>(gx.size()));
  };
  return finish(std::move(out), "row_sum", x.tape, {xn}, std::move(back));
}

Tensor row_max(const Tensor& x) {
  require(x.rank() == 2, "row_max");
  const int m = x.rows(), n = x.cols();
  require(n >= 1, "row_max");
  Tensor out({m});
  std::vector<int> argmax(static_cast<std::size_t>(m), 0);
  for (int i = 0; i < m; ++i) {
    float best = x.at(i, 0);
    int bj = 0;
    for (int j = 1; j < n; ++j) {
      if (x.at(i, j) > best) {
        best = x.at(i, j);
        bj = j;
      }
    }
    out.data[static_cast<std::size_t>(i)] = best;
    argmax[static_cast<std::size_t>(i)] = bj;
  }
  if (!x.on_tape()) return finish(std::move(out), "row_max", nullptr, {}, nullptr);
  const int xn = x.node;
  auto back = [xn, argmax = std::move(argmax), m, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    FloatBuf gx(static_cast<std::size_t>(m) * n, 0.0f);
    for (int i = 0; i < m; ++i)
      gx[static_cast<std::size_t>(i) * n + argmax[static_cast<std::size_t>(i)]] = g[static_cast<std::size_t>(i)];
    tp.accum_grad(xn, gx.data(), static_cast<long long>(gx.size()));
  };
  return finish(std::move(out), "row_max", x.tape, {xn}, std::move(back));
}

Tensor col_sum(const Tensor& x) {
  require(x.rank() == 2, "col_sum");
  const int m = x.rows(), n = x.cols();
  Tensor out({n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(j)] += x.at(i, j);
  if (!x.on_tape()) return finish(std::move(out), "col_sum", nullptr, {}, nullptr);
  const int xn = x.node;
  auto back = [xn, m, n](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    FloatBuf gx(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(i) * n + j] = g[static_cast<std::size_t>(j)];
    tp.accum_grad(xn, gx.data(), static_cast<long long>(gx.size()));
  };
  return finish(std::move(out), "col_sum", x.tape, {xn}, std::move(back));
}

Tensor sum(const Tensor& x) {
  Tensor out({1});
  float acc = 0.0f;
  for (float v : x.data) acc += v;
  out.data[0] = acc;
  if (!x.on_tape()) return finish(std::move(out), "sum", nullptr, {}, nullptr);
  const int xn = x.node;
  const long long n = x.numel();
  auto back = [xn, n](Tape& tp, int self) {
    const float g0 = tp.grad(self)[0];
    FloatBuf gx(static_cast<std::size_t>(n), g0);
    tp.accum_grad(xn, gx.data(), n);
  };
  return finish(std::move(out), "sum", x.tape, {xn}, std::move(back));
}

Tensor mean(const Tensor& x) {
  require(x.numel() >= 1, "mean");
  Tensor out({1});
  float acc = 0.0f;
  for (float v : x.data) acc += v;
  out.data[0] = acc / static_cast<float>(x.numel());
  if (!x.on_tape()) return finish(std::move(out), "mean", nullptr, {}, nullptr);
  const int xn = x.node;
  const long long n = x.numel();
  auto back = [xn, n](Tape& tp, int self) {
    const float g0 = tp.grad(self)[0] / static_cast<float>(n);
    FloatBuf gx(static_cast<std::size_t>(n), g0);
    tp.accum_grad(xn, gx.data(), n);
  };
  return finish(std::move(out), "mean", x.tape, {xn}, std::move(back));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require(a.shape == b.shape, "mse");
  require(a.numel() >= 1, "mse");
  const long long n = a.numel();
  Tensor out({1});
  float acc = 0.0f;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const float d = a.data[i] - b.data[i];
    acc += d * d;
  }
  out.data[0] = acc / static_cast<float>(n);

  Tape* t = joint_tape(a, b);
  if (!t) return finish(std::move(out), "mse", nullptr, {}, nullptr);
  const int an = a.node, bn = b.node;
  FloatBuf av = a.data, bv = b.data;
  auto back = [an, bn, av = std::move(av), bv = std::move(bv), n](Tape& tp, int self) {
    const float g0 = tp.grad(self)[0];
    const float c = 2.0f * g0 / static_cast<float>(n);
    if (an >= 0) {
      FloatBuf ga(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] = c * (av[i] - bv[i]);
      tp.accum_grad(an, ga.data(), static_cast<long long>(ga.size()));
    }
    if (bn >= 0) {
      FloatBuf gb(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] = -c * (av[i] - bv[i]);
      tp.accum_grad(bn, gb.data(), static_cast<long long>(gb.size()));
    }
  };
  return finish(std::move(out), "mse", t, {a.node, b.node}, std::move(back));
}

Tensor straight_through(const Tensor& x, const Tensor& forward_value) {
  require(x.shape == forward_value.shape, "straight_through");
  if (forward_value.on_tape()) {
    throw std::invalid_argument("straight_through: forward_value must be a plain tensor");
  }
  Tensor out = forward_value;
  if (!x.on_tape()) return finish(std::move(out), "straight_through", nullptr, {}, nullptr);
  const int xn = x.node;
  auto back = [xn](Tape& tp, int self) {
    const FloatBuf& g = tp.grad(self);
    tp.accum_grad(xn, g.data(), static_cast<long long>(g.size()));
  };
  return finish(std::move(out), "straight_through", x.tape, {xn}, std::move(back));
}

void sgd_step(const std::vector<std::pair<std::string, ParamGroup*>>& params,
              const FwdCtx& ctx, float lr) {
  for (const auto& [name, pg] : params) {
    if (!pg->trainable) continue;
    const FloatBuf* g = ctx.grad_of(*pg);
    if (g == nullptr) continue;
    for (std::size_t i = 0; i < pg->tensor.data.size(); ++i) {
      pg->tensor.data[i] -= lr * (*g)[i];
    }
  }
}

}  // namespace lt3r
