#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "avflow/tensor.hpp"

namespace avflow {

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

using GradMap = std::unordered_map<int32_t, Tensor>;

// Dynamic reverse-mode tape. A graph is built per forward pass; nodes are
// appended in topological order, so backward is a single reverse sweep.
// Storage is float32, reductions and matmul inner loops accumulate in
// float64. Broadcasting is limited to a trailing-shape operand repeated over
// leading batch dims.
class Tape {
 public:
  explicit Tape(bool debug = false) : debug_(debug) {}

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& val(Var v) const;
  // Scalar reductions also record their float64 value; used by gradient
  // checks that need sub-float32 resolution.
  double val_scalar(Var v) const;
  size_t size() const { return nodes_.size(); }

  // --- forward ops ---
  Var matmul(Var a, Var b);                     // [n,k] x [k,m]
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, float s);
  Var concat(const std::vector<Var>& parts, int axis);
  Var slice(Var a, int axis, int64_t start, int64_t len);
  Var transpose(Var a);                         // 2-D
  Var softmax(Var a);                           // last axis
  Var layernorm(Var a, float eps = 1e-5f);      // last axis, no affine
  Var gelu(Var a);
  Var sigmoid(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var mean(Var a);                              // scalar
  Var sum(Var a);                               // scalar
  Var l1_loss(Var a, Var b);                    // scalar, mean |a-b|
  Var l2_loss(Var a, Var b);                    // scalar, mean (a-b)^2
  Var embedding(Var table, const std::vector<int64_t>& ids);
  Var rotary(Var x, const std::vector<int64_t>& positions, float base = 10000.0f);

  // Gradients for every requires_grad leaf reachable from loss; unreachable
  // parameters get zeros (and are listed in disconnected() when debug).
  GradMap backward(Var loss);

  const std::vector<std::string>& disconnected() const { return disconnected_; }

 private:
  struct Node;
  using BackwardFn = std::function<void(Tape&, const Node&, const Tensor&)>;

  struct Node {
    Tensor value;
    std::vector<int32_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    bool is_param = false;
  };

  Var push(Tensor value, std::vector<int32_t> inputs, BackwardFn fn, const char* op_name);
  bool needs(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }

  // Accumulation buffer for a node's gradient, allocated on first touch.
  Tensor& grad_buf(int32_t id);
  bool has_grad(int32_t id) const { return grads_[static_cast<size_t>(id)].defined(); }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<int32_t, double> scalar64_;
  std::vector<std::string> disconnected_;
  bool debug_ = false;

  friend struct TapeOps;
};

// Raw float32 GEMM helpers with float64 accumulation. C is [n,m].
void gemm_nn(const float* a, const float* b, float* c, int64_t n, int64_t k, int64_t m,
             bool accumulate);
void gemm_nt(const float* a, const float* b, float* c, int64_t n, int64_t k, int64_t m,
             bool accumulate);  // b is [m,k]
void gemm_tn(const float* a, const float* b, float* c, int64_t n, int64_t k, int64_t m,
             bool accumulate);  // a is [k,n]

}  // namespace avflow
