#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "nnbf/errors.hpp"

namespace nnbf {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Dense row-major float64 tensor. The data buffer is shared; views created
// by reshape alias the buffer of their source. Tensors are treated as
// immutable once they participate in a recorded op; mutable_data() exists
// for leaf initialization and optimizer updates between training steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar_tensor(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return numel_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const { return shape_.at(static_cast<size_t>(axis)); }

  const double* data() const { return data_->data(); }
  double* mutable_data() { return data_->data(); }
  const std::vector<double>& vec() const { return *data_; }
  std::shared_ptr<std::vector<double>> buffer() const { return data_; }

  double scalar() const;
  double at(std::initializer_list<std::int64_t> idx) const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool rg) { requires_grad_ = rg; }
  std::uint64_t id() const { return id_; }

  bool all_finite() const;

  // Internal: wrap an existing buffer under a fresh identity (used by views).
  static Tensor wrap(Shape shape, std::shared_ptr<std::vector<double>> buf,
                     bool requires_grad);

 private:
  Shape shape_;
  std::int64_t numel_ = 0;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  std::uint64_t id_ = 0;
  static std::atomic<std::uint64_t> next_id_;
};

// Reverse-mode tape. One tape per training step, single threaded. Ops record
// themselves in execution order; backward() walks the records in reverse and
// accumulates gradients keyed by tensor identity. A tape is consumed by
// backward() and cannot be reused.
class GradTape {
 public:
  struct Record {
    std::uint64_t out_id;
    std::function<void(GradTape&)> backward;
  };

  // Called by ops. `needs_grad` inputs already marked on the tape or leaves
  // flagged requires_grad make the output grad-tracked.
  bool tracked(const Tensor& t) const {
    return t.requires_grad() || tracked_.count(t.id()) != 0;
  }
  void record(const Tensor& out, std::function<void(GradTape&)> fn);

  // Gradient access during backward (ops) and after backward (callers).
  // Accumulate `g` (same length as the tensor's numel) into the slot of `id`.
  void accumulate(std::uint64_t id, const Shape& shape, const double* g,
                  std::int64_t n);
  const std::vector<double>* grad_ptr(std::uint64_t id) const;

  // After backward: gradient of `t`, zeros if t was not reached.
  Tensor grad(const Tensor& t) const;

  bool consumed() const { return consumed_; }
  size_t size() const { return records_.size(); }

  friend void backward(GradTape& tape, const Tensor& loss);

 private:
  std::vector<Record> records_;
  std::unordered_set<std::uint64_t> tracked_;
  std::unordered_set<std::uint64_t> op_outputs_;
  std::unordered_map<std::uint64_t, std::vector<double>> grads_;
  std::unordered_map<std::uint64_t, Shape> grad_shapes_;
  bool consumed_ = false;
};

// Reverse accumulation from a scalar loss recorded on `tape`.
void backward(GradTape& tape, const Tensor& loss);

// ---- primitive ops ---------------------------------------------------------
// All ops take the tape as first argument; a null tape means plain evaluation
// with no recording (inference mode).

// Equal-rank broadcasting (size-1 axes stretch) for the binary ops.
Tensor add(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor sub(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor mul(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor div(GradTape* tape, const Tensor& a, const Tensor& b);

Tensor add_scalar(GradTape* tape, const Tensor& a, double c);
Tensor mul_scalar(GradTape* tape, const Tensor& a, double c);

Tensor exp(GradTape* tape, const Tensor& a);
Tensor log(GradTape* tape, const Tensor& a);
Tensor log1p(GradTape* tape, const Tensor& a);
Tensor sqrt(GradTape* tape, const Tensor& a);
// max(x, c); gradient passes where x > c
Tensor clamp_min(GradTape* tape, const Tensor& a, double c);
// exact-Phi GELU: x * Phi(x)
Tensor gelu(GradTape* tape, const Tensor& a);

Tensor reshape(GradTape* tape, const Tensor& a, Shape shape);
Tensor permute(GradTape* tape, const Tensor& a, const std::vector<int>& axes);
Tensor slice(GradTape* tape, const Tensor& a, int axis, std::int64_t start,
             std::int64_t len);
Tensor concat(GradTape* tape, const std::vector<Tensor>& parts, int axis);

Tensor sum_all(GradTape* tape, const Tensor& a);
Tensor sum_axis(GradTape* tape, const Tensor& a, int axis, bool keepdim);

Tensor softmax(GradTape* tape, const Tensor& a, int axis);

// [m×p]·[p×q] and batched [B×m×p]·[B×p×q]
Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor bmm(GradTape* tape, const Tensor& a, const Tensor& b);

// x[n×d_in]·w[d_in×d_out] + bias[d_out]
Tensor linear(GradTape* tape, const Tensor& x, const Tensor& w,
              const Tensor& bias);

enum class PadMode { None, Reflect };

// Mirror reflection of edge values, edge element not repeated:
// row [1,2,3] padded by 1 -> [2,1,2,3,2].
Tensor reflect_pad2d(GradTape* tape, const Tensor& x, int pad_h, int pad_w);

// Grouped cross-correlation, stride 1, odd kernels. filters shaped
// (C_out, C_in/groups, kh, kw); bias (C_out) or undefined for none.
// Reflect padding preserves the spatial extents.
Tensor conv2d(GradTape* tape, const Tensor& x, const Tensor& filters,
              const Tensor& bias, int groups, PadMode padding);

// Per-channel standardization over (B, spatial...) with running statistics.
// gamma/beta are trainable (C); running stats live outside the tape.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};
Tensor batch_norm(GradTape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, BatchNormState& state, bool training);

// Per-position standardization over the last axis with trainable scale/shift.
Tensor layer_norm(GradTape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5);

namespace detail {
// Selftest fault-injection hook: when set, gelu's backward rule is perturbed
// so gradient checks must fail. Never set outside the selftest path.
extern std::atomic<bool> gelu_backward_fault;
}  // namespace detail

}  // namespace nnbf
