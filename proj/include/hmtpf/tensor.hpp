#pragma once

// Dense row-major float64 tensors with define-by-run reverse-mode autodiff.
//
// Ops executed while a Tape is active (see TapeScope) and with at least one
// input that requires a gradient are recorded on that tape. Tape order is
// execution order, so it is topological by construction. Outside a tape every
// op is a plain forward computation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hmtpf/errors.hpp"

namespace hmtpf {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "all zeros"
  bool requires_grad = false;
  bool is_leaf = true;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access; meant for leaves (parameters, optimizer updates).
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape[1] + j]; }

  bool requires_grad() const { return impl_->requires_grad; }
  /// Leaves that require grad always carry a (zero-filled) gradient buffer.
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->is_leaf; }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void zero_grad();

  /// Value copy detached from any graph.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

class Tape {
 public:
  // Receives the op's output node; its `grad` holds dLoss/dOutput.
  using BackwardFn = std::function<void(const TensorImpl& out)>;

  struct Op {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  void record(Op op) { ops_.push_back(std::move(op)); }
  std::size_t size() const { return ops_.size(); }
  const std::vector<Op>& ops() const { return ops_; }
  void clear() { ops_.clear(); }

  /// Populates gradients of every requires_grad leaf reachable from `loss`.
  /// Intermediate gradients are reset on entry; leaf gradients accumulate
  /// across calls until zero_grad().
  void backward(const Tensor& loss);

 private:
  std::vector<Op> ops_;
};

/// The tape ops record onto in this thread, or nullptr.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the current thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace autodiff {

/// Wraps a computed value as an op output. When recording and some input
/// requires a gradient, `backward` is stored on the active tape and will be
/// called with the output node once its gradient is known. Custom fused ops are built on this.
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   Tape::BackwardFn backward);

/// Adds `values` into the gradient of `t` if it participates in autodiff.
void accumulate(TensorImpl* t, std::span<const double> values);

inline bool wants_grad(const TensorImpl* t) { return t->requires_grad; }

}  // namespace autodiff

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// C = A·B for A[m×k], B[k×n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Binary ops accept identical shapes, or rank ≤ 2 operands that broadcast
// NumPy-style over rows and/or columns ([m×n] with [n], [1×n], [m×1], scalar).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor abs(const Tensor& a);

enum class ElementwiseOp { kAdd, kSub, kMul, kScale, kGelu, kRelu, kExp };
/// Dispatching form; `b` is ignored for unary ops and `factor` only used by kScale.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor* b = nullptr,
                   double factor = 1.0);

enum class ReduceOp { kMax, kMean, kSum };
/// Reduces one axis away. Max routes its gradient to the first argmax.
Tensor reduce(ReduceOp op, const Tensor& a, std::size_t axis);
Tensor reduce_max(const Tensor& a, std::size_t axis);
Tensor reduce_sum(const Tensor& a, std::size_t axis);
Tensor reduce_mean(const Tensor& a, std::size_t axis);
/// Full reductions to a shape-{} scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Per-column standardization over the row (sequence) axis:
/// (A[:,j] − mean_j) / sqrt(var_j + eps), population variance.
Tensor seq_norm(const Tensor& a, double eps);
/// Row-wise RMS normalization with a learned per-column gain.
Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps);

/// x·W + b with b broadcast over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor concat_cols(const std::vector<Tensor>& parts);
/// Concatenates along axis 0; trailing extents must agree.
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Rows [begin, end) along axis 0, any rank.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
/// out[r] = a[index[r]]; gradient scatter-adds.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
Tensor reshape(const Tensor& a, Shape shape);
/// [c] or [1×c] repeated into [n×c].
Tensor broadcast_rows(const Tensor& v, std::size_t n);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// max over coordinates of |analytic − central FD| / max(|analytic|, |FD|, 1e-12)
/// for scalar-valued f at x. Kinks (relu at 0, max ties) show up as large errors;
/// callers sample away from them.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "tensor#index"
};

/// Same measure over a set of leaf tensors feeding `loss_fn`. With
/// `max_coords_per_tensor` > 0, a seeded random subset of coordinates is probed.
GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                  double eps, std::size_t max_coords_per_tensor = 0,
                                  std::uint64_t seed = 0);

/// Throws NumericError naming `context` if any value is non-finite.
void check_finite(const Tensor& t, const std::string& context);

}  // namespace hmtpf
