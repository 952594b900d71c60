#include "hmtpf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace hmtpf {

namespace {

thread_local Tape* g_active_tape = nullptr;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

[[noreturn]] void dim_error(const std::string& op, const Shape& a, const Shape& b) {
  throw DimensionError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void dim_error(const std::string& op, const std::string& what, const Shape& a) {
  throw DimensionError(op + ": " + what + " (shape " + shape_str(a) + ")");
}

// Rank ≤ 2 view as (rows, cols).
struct Mat2 {
  std::size_t rows, cols;
};

Mat2 as_mat(const Shape& s) {
  switch (s.size()) {
    case 0: return {1, 1};
    case 1: return {1, s[0]};
    case 2: return {s[0], s[1]};
    default: return {1, shape_size(s)};
  }
}

void require_rank2(const std::string& op, const Tensor& a) {
  if (a.rank() != 2) dim_error(op, "expected a matrix", a.shape());
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_size(shape), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) dim_error("dim", "axis " + std::to_string(axis) + " out of range", shape());
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) dim_error("item", "tensor is not a scalar", shape());
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (flag && impl_->is_leaf) impl_->ensure_grad();
  return *this;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), impl_->data); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw AutodiffError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  std::ptrdiff_t last = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(ops_.size()) - 1; i >= 0; --i) {
    if (ops_[i].output.get() == loss.impl()) {
      last = i;
      break;
    }
  }
  if (last < 0) throw AutodiffError("backward: loss was not produced on this tape");

  for (auto& op : ops_) op.output->grad.clear();
  loss.impl()->grad.assign(1, 1.0);
  for (std::ptrdiff_t i = last; i >= 0; --i) {
    auto& op = ops_[i];
    if (op.output->grad.empty()) continue;
    op.backward(*op.output);
  }
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

namespace autodiff {

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   Tape::BackwardFn backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  out.impl()->requires_grad = true;
  out.impl()->is_leaf = false;
  Tape::Op op;
  op.inputs.reserve(inputs.size());
  for (const auto& t : inputs) op.inputs.push_back(t.ptr());
  op.output = out.ptr();
  op.backward = std::move(backward);
  tape->record(std::move(op));
  return out;
}

void accumulate(TensorImpl* t, std::span<const double> values) {
  if (!t->requires_grad) return;
  t->ensure_grad();
  for (std::size_t i = 0; i < values.size(); ++i) t->grad[i] += values[i];
}

}  // namespace autodiff

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    dim_error("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> c(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = pa[i * k + l];
      const double* bl = pb + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return autodiff::make_result({m, n}, std::move(c), {a, b},
                               [ai, bi, m, k, n](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      // dA = dC·Bᵀ
      for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g.data() + i * n;
        for (std::size_t l = 0; l < k; ++l) {
          const double* bl = bi->data.data() + l * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bl[j];
          ai->grad[i * k + l] += acc;
        }
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      // dB = Aᵀ·dC
      for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g.data() + i * n;
        for (std::size_t l = 0; l < k; ++l) {
          const double ail = ai->data[i * k + l];
          double* gb = bi->grad.data() + l * n;
          for (std::size_t j = 0; j < n; ++j) gb[j] += ail * gi[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  TensorImpl* ai = a.impl();
  return autodiff::make_result({n, m}, std::move(out), {a}, [ai, m, n](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ai->grad[i * n + j] += g[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

enum class BinKind { kAdd, kSub, kMul };

Tensor binary(BinKind kind, const Tensor& a, const Tensor& b, const char* name) {
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  if (a.shape() == b.shape()) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    switch (kind) {
      case BinKind::kAdd: for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i]; break;
      case BinKind::kSub: for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i]; break;
      case BinKind::kMul: for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i]; break;
    }
    return autodiff::make_result(a.shape(), std::move(out), {a, b},
                                 [kind, ai, bi, n](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        if (kind == BinKind::kMul) {
          for (std::size_t i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->data[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) ai->grad[i] += g[i];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        switch (kind) {
          case BinKind::kAdd: for (std::size_t i = 0; i < n; ++i) bi->grad[i] += g[i]; break;
          case BinKind::kSub: for (std::size_t i = 0; i < n; ++i) bi->grad[i] -= g[i]; break;
          case BinKind::kMul:
            for (std::size_t i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->data[i];
            break;
        }
      }
    });
  }

  if (a.rank() > 2 || b.rank() > 2) dim_error(name, a.shape(), b.shape());
  const Mat2 ma = as_mat(a.shape());
  const Mat2 mb = as_mat(b.shape());
  auto combine = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    dim_error(name, a.shape(), b.shape());
  };
  const std::size_t rows = combine(ma.rows, mb.rows);
  const std::size_t cols = combine(ma.cols, mb.cols);
  Shape out_shape;
  if (Mat2{rows, cols}.rows == ma.rows && cols == ma.cols && a.rank() == 2) {
    out_shape = a.shape();
  } else {
    out_shape = {rows, cols};
  }
  const std::size_t ars = ma.rows == 1 ? 0 : ma.cols, acs = ma.cols == 1 ? 0 : 1;
  const std::size_t brs = mb.rows == 1 ? 0 : mb.cols, bcs = mb.cols == 1 ? 0 : 1;
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = ai->data[i * ars + j * acs];
      const double y = bi->data[i * brs + j * bcs];
      double r = 0.0;
      switch (kind) {
        case BinKind::kAdd: r = x + y; break;
        case BinKind::kSub: r = x - y; break;
        case BinKind::kMul: r = x * y; break;
      }
      out[i * cols + j] = r;
    }
  }
  return autodiff::make_result(std::move(out_shape), std::move(out), {a, b},
                               [=](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (ai->requires_grad) ai->ensure_grad();
    if (bi->requires_grad) bi->ensure_grad();
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        const double gij = g[i * cols + j];
        const std::size_t ia = i * ars + j * acs;
        const std::size_t ib = i * brs + j * bcs;
        if (ai->requires_grad) {
          ai->grad[ia] += kind == BinKind::kMul ? gij * bi->data[ib] : gij;
        }
        if (bi->requires_grad) {
          switch (kind) {
            case BinKind::kAdd: bi->grad[ib] += gij; break;
            case BinKind::kSub: bi->grad[ib] -= gij; break;
            case BinKind::kMul: bi->grad[ib] += gij * ai->data[ia]; break;
          }
        }
      }
    }
  });
}

// Unary op with derivative expressed through (input, output).
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.data()[i]);
  TensorImpl* ai = a.impl();
  return autodiff::make_result(a.shape(), std::move(out), {a}, [ai, n, deriv](const TensorImpl& res) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += res.grad[i] * deriv(ai->data[i], res.data[i]);
  });
}

double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinKind::kAdd, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinKind::kSub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinKind::kMul, a, b, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor silu(const Tensor& a) {
  return unary(a, [](double x) { return x * sigmoid(x); },
               [](double x, double) {
                 const double s = sigmoid(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Tensor softplus(const Tensor& a) {
  return unary(a,
               [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
               [](double x, double) { return sigmoid(x); });
}

Tensor abs(const Tensor& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor* b, double factor) {
  auto need_b = [&]() -> const Tensor& {
    if (b == nullptr) throw DimensionError("elementwise: binary op requires a second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::kAdd: return add(a, need_b());
    case ElementwiseOp::kSub: return sub(a, need_b());
    case ElementwiseOp::kMul: return mul(a, need_b());
    case ElementwiseOp::kScale: return scale(a, factor);
    case ElementwiseOp::kGelu: return gelu(a);
    case ElementwiseOp::kRelu: return relu(a);
    case ElementwiseOp::kExp: return exp(a);
  }
  throw std::logic_error("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor reduce(ReduceOp op, const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) dim_error("reduce", "axis " + std::to_string(axis) + " out of range", a.shape());
  const Shape& s = a.shape();
  const std::size_t len = s[axis];
  if (len == 0) dim_error("reduce", "cannot reduce an empty axis", s);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);

  std::vector<double> out(outer * inner);
  const double* pa = a.data().data();
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::kMax) argmax.resize(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const double* base = pa + o * len * inner + in;
      double acc = base[0];
      std::size_t best = 0;
      for (std::size_t l = 1; l < len; ++l) {
        const double v = base[l * inner];
        if (op == ReduceOp::kMax) {
          if (v > acc) {  // strict: ties keep the lowest index
            acc = v;
            best = l;
          }
        } else {
          acc += v;
        }
      }
      if (op == ReduceOp::kMean) acc /= static_cast<double>(len);
      out[o * inner + in] = acc;
      if (op == ReduceOp::kMax) argmax[o * inner + in] = best;
    }
  }
  TensorImpl* ai = a.impl();
  return autodiff::make_result(std::move(out_shape), std::move(out), {a},
                               [=, argmax = std::move(argmax)](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const double w = op == ReduceOp::kMean ? 1.0 / static_cast<double>(len) : 1.0;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const double gv = g[o * inner + in];
        double* base = ai->grad.data() + o * len * inner + in;
        if (op == ReduceOp::kMax) {
          base[argmax[o * inner + in] * inner] += gv;
        } else {
          for (std::size_t l = 0; l < len; ++l) base[l * inner] += gv * w;
        }
      }
    }
  });
}

Tensor reduce_max(const Tensor& a, std::size_t axis) { return reduce(ReduceOp::kMax, a, axis); }
Tensor reduce_sum(const Tensor& a, std::size_t axis) { return reduce(ReduceOp::kSum, a, axis); }
Tensor reduce_mean(const Tensor& a, std::size_t axis) { return reduce(ReduceOp::kMean, a, axis); }

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  TensorImpl* ai = a.impl();
  return autodiff::make_result({}, {acc}, {a}, [ai](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (double& v : ai->grad) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) dim_error("mean", "empty tensor", a.shape());
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

Tensor seq_norm(const Tensor& a, double eps) {
  require_rank2("seq_norm", a);
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  if (n == 0) dim_error("seq_norm", "empty sequence", a.shape());
  std::vector<double> out(n * c);
  std::vector<double> inv_std(c);
  const double* pa = a.data().data();
  for (std::size_t j = 0; j < c; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += pa[i * c + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = pa[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[j] = is;
    for (std::size_t i = 0; i < n; ++i) out[i * c + j] = (pa[i * c + j] - mu) * is;
  }
  TensorImpl* ai = a.impl();
  return autodiff::make_result(a.shape(), std::move(out), {a},
                               [ai, n, c, inv_std = std::move(inv_std)](const TensorImpl& res) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const std::vector<double>& g = res.grad;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < c; ++j) {
      double gm = 0.0, gx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        gm += g[i * c + j];
        gx += g[i * c + j] * res.data[i * c + j];
      }
      gm *= inv_n;
      gx *= inv_n;
      for (std::size_t i = 0; i < n; ++i) {
        ai->grad[i * c + j] += inv_std[j] * (g[i * c + j] - gm - res.data[i * c + j] * gx);
      }
    }
  });
}

Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps) {
  require_rank2("rms_norm", a);
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  if (gain.size() != c) dim_error("rms_norm", a.shape(), gain.shape());
  std::vector<double> out(n * c);
  std::vector<double> inv_rms(n);
  const double* pa = a.data().data();
  const double* pg = gain.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < c; ++j) ms += pa[i * c + j] * pa[i * c + j];
    ms /= static_cast<double>(c);
    const double r = 1.0 / std::sqrt(ms + eps);
    inv_rms[i] = r;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = pa[i * c + j] * r * pg[j];
  }
  TensorImpl* ai = a.impl();
  TensorImpl* gi = gain.impl();
  return autodiff::make_result(a.shape(), std::move(out), {a, gain},
                               [ai, gi, n, c, inv_rms = std::move(inv_rms)](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (ai->requires_grad) ai->ensure_grad();
    if (gi->requires_grad) gi->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double r = inv_rms[i];
      const double* x = ai->data.data() + i * c;
      const double* gr = g.data() + i * c;
      if (gi->requires_grad) {
        for (std::size_t j = 0; j < c; ++j) gi->grad[j] += gr[j] * x[j] * r;
      }
      if (ai->requires_grad) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += gr[j] * gi->data[j] * x[j];
        const double k = dot * r * r * r / static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) ai->grad[i * c + j] += gi->data[j] * gr[j] * r - x[j] * k;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0]) {
    dim_error("linear", x.shape(), w.shape());
  }
  if (b.size() != w.shape()[1]) dim_error("linear", w.shape(), b.shape());
  return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts[0].rank() == 2 ? parts[0].shape()[0] : 0;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != n) dim_error("concat_cols", parts[0].shape(), p.shape());
    offsets.push_back(total);
    total += p.shape()[1];
  }
  std::vector<double> out(n * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].shape()[1];
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(parts[k].data().data() + i * w, w, out.data() + i * total + offsets[k]);
  }
  std::vector<TensorImpl*> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return autodiff::make_result({n, total}, std::move(out), parts,
                               [impls, offsets, n, total](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    for (std::size_t k = 0; k < impls.size(); ++k) {
      TensorImpl* t = impls[k];
      if (!t->requires_grad) continue;
      t->ensure_grad();
      const std::size_t w = t->shape[1];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) t->grad[i * w + j] += g[i * total + offsets[k] + j];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      dim_error("concat_rows", parts[0].shape(), p.shape());
    }
    rows += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(rows * shape_size(tail));
  std::vector<TensorImpl*> impls;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    impls.push_back(p.impl());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return autodiff::make_result(std::move(shape), std::move(out), parts,
                               [impls](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    std::size_t off = 0;
    for (TensorImpl* t : impls) {
      const std::size_t sz = t->data.size();
      autodiff::accumulate(t, std::span<const double>(g).subspan(off, sz));
      off += sz;
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.shape()[0]) {
    dim_error("slice_rows", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid",
              a.shape());
  }
  const std::size_t stride = a.shape()[0] ? a.size() / a.shape()[0] : 0;
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<double> out(a.data().begin() + begin * stride, a.data().begin() + end * stride);
  TensorImpl* ai = a.impl();
  const std::size_t off = begin * stride;
  return autodiff::make_result(std::move(shape), std::move(out), {a},
                               [ai, off](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ai->grad[off + i] += g[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2("slice_cols", a);
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  if (begin > end || end > c) {
    dim_error("slice_cols", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid",
              a.shape());
  }
  const std::size_t w = end - begin;
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(a.data().data() + i * c + begin, w, out.data() + i * w);
  TensorImpl* ai = a.impl();
  return autodiff::make_result({n, w}, std::move(out), {a}, [ai, n, c, w, begin](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) ai->grad[i * c + begin + j] += g[i * w + j];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  if (a.rank() == 0) dim_error("gather_rows", "cannot gather from a scalar", a.shape());
  const std::size_t rows = a.shape()[0];
  const std::size_t stride = rows ? a.size() / rows : 0;
  std::vector<double> out(index.size() * stride);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) {
      dim_error("gather_rows", "index " + std::to_string(index[r]) + " out of range", a.shape());
    }
    std::copy_n(a.data().data() + index[r] * stride, stride, out.data() + r * stride);
  }
  Shape shape = a.shape();
  shape[0] = index.size();
  TensorImpl* ai = a.impl();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return autodiff::make_result(std::move(shape), std::move(out), {a},
                               [ai, stride, idx = std::move(idx)](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double* dst = ai->grad.data() + idx[r] * stride;
      const double* src = g.data() + r * stride;
      for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) dim_error("reshape", a.shape(), shape);
  TensorImpl* ai = a.impl();
  return autodiff::make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()),
                               {a}, [ai](const TensorImpl& out) {
    const std::vector<double>& g = out.grad; autodiff::accumulate(ai, g); });
}

Tensor broadcast_rows(const Tensor& v, std::size_t n) {
  const bool row_vec = v.rank() == 1 || (v.rank() == 2 && v.shape()[0] == 1);
  if (!row_vec) dim_error("broadcast_rows", "expected [c] or [1xc]", v.shape());
  const std::size_t c = v.size();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(v.data().data(), c, out.data() + i * c);
  TensorImpl* vi = v.impl();
  return autodiff::make_result({n, c}, std::move(out), {v}, [vi, n, c](const TensorImpl& out) {
    const std::vector<double>& g = out.grad;
    if (!vi->requires_grad) return;
    vi->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) vi->grad[j] += g[i * c + j];
  });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

namespace {

double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-12});
  return std::fabs(analytic - numeric) / denom;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(probe);
    tape.backward(y);
    analytic.assign(probe.grad().begin(), probe.grad().end());
  }
  NoGradScope no_grad;
  double worst = 0.0;
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + eps;
    const double fp = f(probe).item();
    values[i] = orig - eps;
    const double fm = f(probe).item();
    values[i] = orig;
    worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                  double eps, std::size_t max_coords_per_tensor, std::uint64_t seed) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
    for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  }
  NoGradScope no_grad;
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_tensor > 0 && coords.size() > max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_tensor);
    }
    for (std::size_t i : coords) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double fp = loss_fn().item();
      values[i] = orig - eps;
      const double fm = loss_fn().item();
      values[i] = orig;
      const double err = rel_error(analytic[k][i], (fp - fm) / (2.0 * eps));
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = std::to_string(k) + "#" + std::to_string(i);
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

void check_finite(const Tensor& t, const std::string& context) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t.data()[i])) {
      throw NumericError(context + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace hmtpf
