// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace lt3r {

// ---------------------------------------------------------------------------
// Allocation tracking. All tensor-sized buffers (values, FP8 codes, gradient
// buffers) go through TrackingAllocator so the benchmark harness can report a
// high-water mark of live tensor bytes.
// ---------------------------------------------------------------------------

long long live_tensor_bytes();
long long peak_tensor_bytes();
void reset_peak_tensor_bytes();

namespace detail {
void track_alloc(long long bytes);
void track_free(long long bytes);
}  // namespace detail

template <class T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) {}
  T* allocate(std::size_t n) {
    detail::track_alloc(static_cast<long long>(n * sizeof(T)));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::track_free(static_cast<long long>(n * sizeof(T)));
    ::operator delete(p);
  }
  template <class U>
  bool operator==(const TrackingAllocator<U>&) const {
    return true;
  }
};

using FloatBuf = std::vector<float, TrackingAllocator<float>>;
using ByteBuf = std::vector<std::uint8_t, TrackingAllocator<std::uint8_t>>;

class Tape;

// ---------------------------------------------------------------------------
// Tensor: dense row-major f32 array. Rank 1 or 2 for all compute ops; rank is
// whatever the shape vector says for storage purposes (checkpoints may carry
// higher ranks). A tensor optionally links to a node on a Tape; plain tensors
// are constants as far as autodiff is concerned.
// ---------------------------------------------------------------------------

struct Tensor {
  std::vector<int> shape;
  FloatBuf data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);  // zero-filled
  Tensor(std::vector<int> s, std::initializer_list<float> values);
  Tensor(std::vector<int> s, FloatBuf values);
  Tensor(std::vector<int> s, const std::vector<float>& values);

  static Tensor scalar(float v) { return Tensor({1}, {v}); }
  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  long long numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const;
  int cols() const;
  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }
  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }
  bool on_tape() const { return tape != nullptr && node >= 0; }
  float item() const;          // value of a one-element tensor
  Tensor detached() const;     // same values, no tape linkage
};

// Row-major boolean keep-mask for masked softmax.
struct BoolMask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> keep;  // 1 = participate, 0 = excluded

  BoolMask() = default;
  BoolMask(int r, int c, bool value = false)
      : rows(r), cols(c), keep(static_cast<std::size_t>(r) * c, value ? 1 : 0) {}
  bool at(int r, int c) const { return keep[static_cast<std::size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { keep[static_cast<std::size_t>(r) * cols + c] = v ? 1 : 0; }
  int row_count(int r) const;
};

// ---------------------------------------------------------------------------
// Tape: reverse-mode autodiff record. Nodes are appended in execution order,
// so parents always precede children; backward is one reverse sweep that
// visits each reachable node exactly once.
// ---------------------------------------------------------------------------

class Tape {
 public:
  using BackFn = std::function<void(Tape&, int self)>;

  // Stages a plain tensor as a differentiable leaf.
  Tensor leaf(const Tensor& value);

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(const Tensor& loss);

  // Gradient buffer of a node after backward(). Empty if the node was not
  // reachable from the loss (gradient is identically zero).
  const FloatBuf& grad(int node) const;

  void accum_grad(int node, const float* values, long long n);
  int add_node(const char* op, std::vector<int> parents, long long numel, BackFn back);
  std::size_t size() const { return nodes_.size(); }
  void reset();

 private:
  struct Node {
    const char* op;
    std::vector<int> parents;
    long long numel;
    BackFn back;
    FloatBuf grad;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// ParamGroup: a named parameter with a trainable flag. Optimizer steps only
// ever touch trainable groups, which is what makes freezing bitwise-stable.
// ---------------------------------------------------------------------------

struct ParamGroup {
  std::string name;
  Tensor tensor;
  bool trainable = false;

  long long numel() const { return tensor.numel(); }
};

// Per-forward context: owns the tape pointer (null = pure inference) and the
// stage-once map so each trainable parameter gets exactly one leaf per tape.
struct FwdCtx {
  Tape* tape = nullptr;
  std::unordered_map<const ParamGroup*, Tensor> staged;

  FwdCtx() = default;
  explicit FwdCtx(Tape* t) : tape(t) {}
  bool training() const { return tape != nullptr; }
  Tensor use(const ParamGroup& pg);
  // Gradient of a staged trainable param; nullptr if it never reached the loss.
  const FloatBuf* grad_of(const ParamGroup& pg) const;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 core with fixed bit-mappings so streams do
// not depend on the standard library's distribution implementations.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  std::uint64_t next_u64() { return gen_(); }
  float uniform();  // [0, 1)
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  float normal();   // standard normal via Box-Muller
  Tensor normal_tensor(std::vector<int> shape, float stddev = 1.0f);
  Tensor uniform_tensor(std::vector<int> shape, float lo, float hi);

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Operations. Every op validates shapes, checks outputs for NaN/Inf (throws
// std::runtime_error) and records itself on the tape when any input is
// tape-linked. Mixing tensors from two different tapes is an error.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);          // [MxK]*[KxN]
Tensor matvec(const Tensor& a, const Tensor& v);          // [MxN]*[N] -> [M]
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor div(const Tensor& a, const Tensor& b);             // elementwise
Tensor add_rowvec(const Tensor& a, const Tensor& v);      // a[MxN] + v[N] per row
// a[MxN] / max(z[M], eps), dividing each row by its own scalar.
Tensor div_rowvec(const Tensor& a, const Tensor& z, float eps = 0.0f);
Tensor scale(const Tensor& a, float c);
Tensor softmax_rows(const Tensor& s);
Tensor softmax_rows(const Tensor& s, const BoolMask& mask);
Tensor elu_plus_one(const Tensor& x);                     // x>=0 ? x+1 : exp(x)
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);
Tensor row_sum(const Tensor& x);   // [MxN] -> [M]
Tensor row_max(const Tensor& x);   // [MxN] -> [M]
Tensor col_sum(const Tensor& x);   // [MxN] -> [N]
Tensor sum(const Tensor& x);       // -> [1]
Tensor mean(const Tensor& x);      // -> [1]
Tensor mse(const Tensor& a, const Tensor& b);             // -> [1]
// y = x * W^T (+ bias), the linear-layer primitive. W is [d_out x d_in].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias);
// Forward takes the given values, backward passes the upstream gradient to x
// unchanged. forward_value must be a plain tensor of x's shape.
Tensor straight_through(const Tensor& x, const Tensor& forward_value);

// p -= lr * grad for every trainable group staged on the context; frozen
// groups and groups that never reached the loss are untouched.
void sgd_step(const std::vector<std::pair<std::string, ParamGroup*>>& params,
              const FwdCtx& ctx, float lr);

}  // namespace lt3r
