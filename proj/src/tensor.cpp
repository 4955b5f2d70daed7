#include "rpnt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <cblas.h>

#include "rpnt/errors.hpp"

namespace rpnt::ad {

namespace {

thread_local bool g_grad_enabled = true;

using ImplPtr = std::shared_ptr<TensorImpl>;
using Offsets = std::shared_ptr<const std::vector<std::size_t>>;

std::vector<double>& grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

// Creates the output tensor and, when any input requires a gradient and
// recording is on, attaches a node with the given backward function.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<ImplPtr> inputs,
                   std::function<void(const TensorImpl&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool record = g_grad_enabled &&
                std::any_of(inputs.begin(), inputs.end(),
                            [](const ImplPtr& p) { return p->requires_grad; });
  if (record) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t ndim) {
  std::ptrdiff_t n = static_cast<std::ptrdiff_t>(ndim);
  std::ptrdiff_t a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(ndim));
  }
  return static_cast<std::size_t>(a);
}

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// For each linear index of `out`, the linear index into `src` under
// broadcasting. Returns nullptr when the mapping is the identity.
Offsets broadcast_offsets(const Shape& src, const Shape& out) {
  if (src == out) return nullptr;
  std::size_t n = out.size();
  std::vector<std::size_t> strides(n, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < src.size(); ++k) {
    std::size_t i = src.size() - 1 - k;
    std::size_t o = n - 1 - k;
    strides[o] = src[i] == 1 ? 0 : stride;
    stride *= src[i];
  }
  std::size_t total = shape_numel(out);
  auto offsets = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(n, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    (*offsets)[lin] = off;
    for (std::size_t d = n; d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out[d]) break;
      off -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  return offsets;
}

inline std::size_t at_offset(const Offsets& o, std::size_t i) { return o ? (*o)[i] : i; }

// Generic broadcasting binary op. da/db compute the local partials given
// (a, b, out) values; they are multiplied by the upstream gradient.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name);
  Offsets oa = broadcast_offsets(a.shape(), out_shape);
  Offsets ob = broadcast_offsets(b.shape(), out_shape);
  std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[at_offset(oa, i)], bd[at_offset(ob, i)]);
  ImplPtr ai = a.impl();
  ImplPtr bi = b.impl();
  return make_result(std::move(out_shape), std::move(out), name, {ai, bi},
                     [ai, bi, oa, ob, da, db](const TensorImpl& o) {
                       const auto& g = o.grad;
                       std::size_t n = g.size();
                       if (ai->requires_grad) {
                         auto& ga = grad_buffer(*ai);
                         for (std::size_t i = 0; i < n; ++i) {
                           std::size_t ia = at_offset(oa, i);
                           ga[ia] += g[i] * da(ai->data[ia], bi->data[at_offset(ob, i)], o.data[i]);
                         }
                       }
                       if (bi->requires_grad) {
                         auto& gb = grad_buffer(*bi);
                         for (std::size_t i = 0; i < n; ++i) {
                           std::size_t ib = at_offset(ob, i);
                           gb[ib] += g[i] * db(ai->data[at_offset(oa, i)], bi->data[ib], o.data[i]);
                         }
                       }
                     });
}

// Unary op whose derivative is expressed through (x, y).
template <class F, class D>
Tensor unary_op(const char* name, const Tensor& x, F f, D d) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), name, {xi}, [xi, d](const TensorImpl& o) {
    auto& gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * d(xi->data[i], o.data[i]);
  });
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C[m,n] += A[m,k] B[k,n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(m), int(n), int(k), 1.0, A, int(k), B, int(n),
              1.0, C, int(n));
}

// dA[m,k] += G[m,n] B[k,n]^T
void gemm_nt(const double* G, const double* B, double* dA, std::size_t m, std::size_t k,
             std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(m), int(k), int(n), 1.0, G, int(n), B, int(n),
              1.0, dA, int(k));
}

// dB[k,n] += A[m,k]^T G[m,n]
void gemm_tn(const double* A, const double* G, double* dB, std::size_t m, std::size_t k,
             std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(k), int(n), int(m), 1.0, A, int(k), G, int(n),
              1.0, dB, int(n));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size(std::ptrdiff_t axis) const { return shape()[normalize_axis(axis, dim())]; }

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
  std::size_t off = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= s[d]) throw DimensionError("index out of range for " + shape_str(s));
    off = off * s[d] + i;
    ++d;
  }
  return impl_->data[off];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (impl_->node) throw UsageError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_->node; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() { return grad_buffer(*impl_); }

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tape

Tape Tape::from(const Tensor& root) {
  Tape tape;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<ImplPtr, std::size_t>> stack;
  if (root.impl()->node) stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& inputs = impl->node->inputs;
    if (next < inputs.size()) {
      const ImplPtr& child = inputs[next++];
      if (child->node && visited.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(impl);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::backward(const Tensor& root) const {
  auto& g = grad_buffer(*root.impl());
  for (double& v : g) v += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const TensorImpl& t = **it;
    if (t.grad.empty()) continue;
    t.node->backward(t);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw UsageError("backward(): loss does not depend on any parameter");
  Tape::from(loss).backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log of nonpositive value " + std::to_string(v));
  }
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      "softplus", x,
      [](double v) {
        if (v > 40.0) return v;
        return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
      },
      [](double v, double) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      });
}

Tensor masked_fill(const Tensor& x, const Tensor& mask, double value) {
  Shape out_shape = broadcast_shapes(x.shape(), mask.shape(), "masked_fill");
  if (out_shape != x.shape()) {
    throw DimensionError("masked_fill: mask " + shape_str(mask.shape()) +
                         " must broadcast to input " + shape_str(x.shape()));
  }
  Offsets om = broadcast_offsets(mask.shape(), out_shape);
  auto xd = x.data();
  auto md = mask.data();
  std::vector<double> out(xd.size());
  auto keep = std::make_shared<std::vector<std::uint8_t>>(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    bool fill = md[at_offset(om, i)] != 0.0;
    (*keep)[i] = fill ? 0 : 1;
    out[i] = fill ? value : xd[i];
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), "masked_fill", {xi}, [xi, keep](const TensorImpl& o) {
    auto& gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if ((*keep)[i]) gx[i] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  ImplPtr xi = x.impl();
  return make_result(std::move(shape), xi->data, "reshape", {xi}, [xi](const TensorImpl& o) {
    auto& gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  std::size_t n = in.size();
  if (axes.size() != n) throw DimensionError("permute: axes rank mismatch for " + shape_str(in));
  std::vector<bool> seen(n, false);
  Shape out_shape(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (axes[i] >= n || seen[axes[i]]) throw DimensionError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  std::vector<std::size_t> in_strides(n, 1);
  for (std::size_t d = n; d-- > 1;) in_strides[d - 1] = in_strides[d] * in[d];
  std::vector<std::size_t> strides(n);
  for (std::size_t i = 0; i < n; ++i) strides[i] = in_strides[axes[i]];

  std::size_t total = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(n, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    (*src)[lin] = off;
    for (std::size_t d = n; d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out_shape[d]) break;
      off -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  auto xd = x.data();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = xd[(*src)[i]];
  ImplPtr xi = x.impl();
  return make_result(std::move(out_shape), std::move(out), "permute", {xi},
                     [xi, src](const TensorImpl& o) {
                       auto& gx = grad_buffer(*xi);
                       for (std::size_t i = 0; i < o.grad.size(); ++i) gx[(*src)[i]] += o.grad[i];
                     });
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(x.dim());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  if (axis0 >= axes.size() || axis1 >= axes.size()) throw DimensionError("transpose: axis out of range");
  std::swap(axes[axis0], axes[axis1]);
  return permute(x, axes);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  // Neumaier-compensated so that long reductions stay within an ulp or two.
  auto xd = x.data();
  double total = 0.0, carry = 0.0;
  for (double v : xd) {
    double t = total + v;
    carry += std::abs(total) >= std::abs(v) ? (total - t) + v : (v - t) + total;
    total = t;
  }
  total += carry;
  ImplPtr xi = x.impl();
  return make_result({}, {total}, "sum", {xi}, [xi](const TensorImpl& o) {
    auto& gx = grad_buffer(*xi);
    double g = o.grad[0];
    for (double& v : gx) v += g;
  });
}

Tensor sum(const Tensor& x, std::ptrdiff_t axis, bool keepdim) {
  std::size_t ax = normalize_axis(axis, x.dim());
  AxisSplit sp = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  auto xd = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t l = 0; l < sp.len; ++l) {
      const double* src = xd.data() + (o * sp.len + l) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  ImplPtr xi = x.impl();
  return make_result(std::move(out_shape), std::move(out), "sum_axis", {xi},
                     [xi, sp](const TensorImpl& o) {
                       auto& gx = grad_buffer(*xi);
                       for (std::size_t a = 0; a < sp.outer; ++a) {
                         for (std::size_t l = 0; l < sp.len; ++l) {
                           double* dst = gx.data() + (a * sp.len + l) * sp.inner;
                           const double* g = o.grad.data() + a * sp.inner;
                           for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
                         }
                       }
                     });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::ptrdiff_t axis, bool keepdim) {
  std::size_t len = x.size(axis);
  if (len == 0) throw DimensionError("mean over empty axis");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  std::size_t m = as[as.size() - 2], k = as.back();
  std::size_t k2 = bs[bs.size() - 2], n = bs.back();
  if (k != k2) throw mismatch();

  Shape a_batch(as.begin(), as.end() - 2);
  Shape b_batch(bs.begin(), bs.end() - 2);
  ImplPtr ai = a.impl();
  ImplPtr bi = b.impl();

  if (b_batch.empty()) {
    // Weight-style right operand: fold all of a's batch extents into rows.
    std::size_t rows = shape_numel(a_batch) * m;
    std::vector<double> out(rows * n, 0.0);
    gemm_nn(ai->data.data(), bi->data.data(), out.data(), rows, k, n);
    Shape out_shape = a_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    return make_result(std::move(out_shape), std::move(out), "matmul", {ai, bi},
                       [ai, bi, rows, k, n](const TensorImpl& o) {
                         if (ai->requires_grad) {
                           gemm_nt(o.grad.data(), bi->data.data(), grad_buffer(*ai).data(), rows, k, n);
                         }
                         if (bi->requires_grad) {
                           gemm_tn(ai->data.data(), o.grad.data(), grad_buffer(*bi).data(), rows, k, n);
                         }
                       });
  }

  Shape batch;
  try {
    batch = broadcast_shapes(a_batch, b_batch, "matmul");
  } catch (const DimensionError&) {
    throw mismatch();
  }
  std::size_t nb = shape_numel(batch);
  Offsets oa = broadcast_offsets(a_batch, batch);
  Offsets ob = broadcast_offsets(b_batch, batch);
  std::vector<double> out(nb * m * n, 0.0);
  for (std::size_t t = 0; t < nb; ++t) {
    gemm_nn(ai->data.data() + at_offset(oa, t) * m * k, bi->data.data() + at_offset(ob, t) * k * n,
            out.data() + t * m * n, m, k, n);
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  return make_result(std::move(out_shape), std::move(out), "matmul", {ai, bi},
                     [ai, bi, oa, ob, nb, m, k, n](const TensorImpl& o) {
                       for (std::size_t t = 0; t < nb; ++t) {
                         const double* g = o.grad.data() + t * m * n;
                         if (ai->requires_grad) {
                           gemm_nt(g, bi->data.data() + at_offset(ob, t) * k * n,
                                   grad_buffer(*ai).data() + at_offset(oa, t) * m * k, m, k, n);
                         }
                         if (bi->requires_grad) {
                           gemm_tn(ai->data.data() + at_offset(oa, t) * m * k, g,
                                   grad_buffer(*bi).data() + at_offset(ob, t) * k * n, m, k, n);
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x, std::ptrdiff_t axis) {
  std::size_t ax = normalize_axis(axis, x.dim());
  AxisSplit sp = split_at(x.shape(), ax);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t base = o * sp.len * sp.inner + i;
      double mx = kNegInf;
      bool nan = false;
      for (std::size_t l = 0; l < sp.len; ++l) {
        double v = xd[base + l * sp.inner];
        nan = nan || std::isnan(v);
        mx = std::max(mx, v);
      }
      if (nan) {
        // Propagate so callers' finiteness checks can report where it came from.
        for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      if (mx == kNegInf) throw DomainError("softmax over a slice that is entirely -inf");
      double total = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        double v = xd[base + l * sp.inner];
        double e = v == kNegInf ? 0.0 : std::exp(v - mx);
        out[base + l * sp.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= total;
    }
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), "softmax", {xi}, [xi, sp](const TensorImpl& o) {
    auto& gx = grad_buffer(*xi);
    for (std::size_t a = 0; a < sp.outer; ++a) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        std::size_t base = a * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) {
          std::size_t p = base + l * sp.inner;
          dot += o.grad[p] * o.data[p];
        }
        for (std::size_t l = 0; l < sp.len; ++l) {
          std::size_t p = base + l * sp.inner;
          gx[p] += o.data[p] * (o.grad[p] - dot);
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.dim() == 0) throw DimensionError("layernorm needs rank >= 1");
  std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layernorm over an empty axis");
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layernorm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last extent of " +
                         shape_str(x.shape()));
  }
  std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> out(xd.size());
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      double h = (row[j] - mu) * inv;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  ImplPtr xi = x.impl();
  ImplPtr gi = gamma.impl();
  ImplPtr bi = beta.impl();
  return make_result(x.shape(), std::move(out), "layernorm", {xi, gi, bi},
                     [xi, gi, bi, xhat, inv_std, rows, d](const TensorImpl& o) {
                       const auto& g = o.grad;
                       if (gi->requires_grad) {
                         auto& gg = grad_buffer(*gi);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                       }
                       if (bi->requires_grad) {
                         auto& gb = grad_buffer(*bi);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                       }
                       if (xi->requires_grad) {
                         auto& gx = grad_buffer(*xi);
                         double dd = static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             double dh = g[r * d + j] * gi->data[j];
                             s1 += dh;
                             s2 += dh * (*xhat)[r * d + j];
                           }
                           double inv = (*inv_std)[r];
                           for (std::size_t j = 0; j < d; ++j) {
                             double dh = g[r * d + j] * gi->data[j];
                             gx[r * d + j] += inv / dd * (dd * dh - s1 - (*xhat)[r * d + j] * s2);
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t planes = 0, h = 0, w = 0, k1 = 0, k2 = 0;
  std::size_t kernels_per_plane = 0;  // 0: shared kernel; 1: per plane; h: per row
  std::ptrdiff_t row0 = 0, col0 = 0;
  bool lower = false;

  std::size_t kernel_offset(std::size_t p, std::size_t i) const {
    if (kernels_per_plane == 0) return 0;
    if (kernels_per_plane == 1) return p * k1 * k2;
    return (p * h + i) * k1 * k2;
  }
};

// Visits every (output, input, tap) triple that contributes. fn receives
// (out_index, in_index, kernel_index, run_length) for a contiguous run along
// the column axis.
template <class Fn>
void conv_visit(const ConvGeometry& g, Fn fn) {
  auto H = static_cast<std::ptrdiff_t>(g.h);
  auto W = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t p = 0; p < g.planes; ++p) {
    for (std::ptrdiff_t i = 0; i < H; ++i) {
      std::size_t koff = g.kernel_offset(p, static_cast<std::size_t>(i));
      for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(g.k1); ++a) {
        std::ptrdiff_t xi = i + a - g.row0;
        if (xi < 0 || xi >= H) continue;
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(g.k2); ++b) {
          std::ptrdiff_t shift = b - g.col0;  // input column = j + shift
          std::ptrdiff_t jlo = std::max<std::ptrdiff_t>(0, -shift);
          std::ptrdiff_t jhi = std::min<std::ptrdiff_t>(W, W - shift);  // exclusive
          if (g.lower) {
            jhi = std::min(jhi, i + 1);
            jhi = std::min(jhi, xi - shift + 1);
          }
          if (jhi <= jlo) continue;
          std::size_t out_idx = (p * g.h + static_cast<std::size_t>(i)) * g.w + static_cast<std::size_t>(jlo);
          std::size_t in_idx = (p * g.h + static_cast<std::size_t>(xi)) * g.w +
                               static_cast<std::size_t>(jlo + shift);
          std::size_t k_idx = koff + static_cast<std::size_t>(a) * g.k2 + static_cast<std::size_t>(b);
          fn(out_idx, in_idx, k_idx, static_cast<std::size_t>(jhi - jlo));
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_same(const Tensor& x, const Tensor& kernel, ConvOptions options) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() < 2 || ks.size() < 2) {
    throw DimensionError("conv2d_same: need rank >= 2, got " + shape_str(xs) + " and kernel " +
                         shape_str(ks));
  }
  ConvGeometry g;
  g.h = xs[xs.size() - 2];
  g.w = xs.back();
  g.k1 = ks[ks.size() - 2];
  g.k2 = ks.back();
  if (g.k1 % 2 == 0 || g.k2 % 2 == 0) {
    throw ConfigError("conv2d_same: kernel extents must be odd, got " + std::to_string(g.k1) + "x" +
                      std::to_string(g.k2));
  }
  g.planes = g.h * g.w == 0 ? 0 : x.numel() / (g.h * g.w);
  std::size_t kcount = kernel.numel() / (g.k1 * g.k2);
  if (kcount == 1) {
    g.kernels_per_plane = 0;
  } else if (kcount == g.planes) {
    g.kernels_per_plane = 1;
  } else if (kcount == g.planes * g.h) {
    g.kernels_per_plane = g.h;
  } else {
    throw DimensionError("conv2d_same: kernel " + shape_str(ks) + " does not match input " +
                         shape_str(xs));
  }
  g.row0 = options.row_anchor == RowAnchor::kCenter ? static_cast<std::ptrdiff_t>((g.k1 - 1) / 2)
                                                    : static_cast<std::ptrdiff_t>(g.k1 - 1);
  g.col0 = static_cast<std::ptrdiff_t>((g.k2 - 1) / 2);
  g.lower = options.lower_triangle;
  if (g.lower && g.h != g.w) throw DimensionError("conv2d_same: lower_triangle needs square planes");

  auto xd = x.data();
  auto kd = kernel.data();
  std::vector<double> out(x.numel(), 0.0);
  conv_visit(g, [&](std::size_t o, std::size_t in, std::size_t k, std::size_t len) {
    double kv = kd[k];
    const double* src = xd.data() + in;
    double* dst = out.data() + o;
    for (std::size_t j = 0; j < len; ++j) dst[j] += kv * src[j];
  });
  ImplPtr xi = x.impl();
  ImplPtr ki = kernel.impl();
  return make_result(xs, std::move(out), "conv2d_same", {xi, ki}, [xi, ki, g](const TensorImpl& o) {
    const double* gd = o.grad.data();
    double* gx = xi->requires_grad ? grad_buffer(*xi).data() : nullptr;
    double* gk = ki->requires_grad ? grad_buffer(*ki).data() : nullptr;
    const double* xd = xi->data.data();
    const double* kd = ki->data.data();
    conv_visit(g, [&](std::size_t out_idx, std::size_t in_idx, std::size_t k, std::size_t len) {
      const double* gr = gd + out_idx;
      if (gx) {
        double kv = kd[k];
        double* dst = gx + in_idx;
        for (std::size_t j = 0; j < len; ++j) dst[j] += kv * gr[j];
      }
      if (gk) {
        const double* src = xd + in_idx;
        double acc = 0.0;
        for (std::size_t j = 0; j < len; ++j) acc += src[j] * gr[j];
        gk[k] += acc;
      }
    });
  });
}

Tensor rotate_pairs(const Tensor& x, std::span<const double> angles) {
  if (x.dim() == 0 || x.shape().back() % 2 != 0) {
    throw DimensionError("rotate_pairs: last extent must be even, got " + shape_str(x.shape()));
  }
  std::size_t pairs = x.numel() / 2;
  if (angles.size() != pairs) {
    throw DimensionError("rotate_pairs: " + std::to_string(angles.size()) + " angles for " +
                         std::to_string(pairs) + " pairs");
  }
  auto cs = std::make_shared<std::vector<double>>(2 * pairs);
  for (std::size_t p = 0; p < pairs; ++p) {
    (*cs)[2 * p] = std::cos(angles[p]);
    (*cs)[2 * p + 1] = std::sin(angles[p]);
  }
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t p = 0; p < pairs; ++p) {
    double c = (*cs)[2 * p], s = (*cs)[2 * p + 1];
    double x0 = xd[2 * p], x1 = xd[2 * p + 1];
    out[2 * p] = x0 * c - x1 * s;
    out[2 * p + 1] = x0 * s + x1 * c;
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), "rotate_pairs", {xi}, [xi, cs, pairs](const TensorImpl& o) {
    auto& gx = grad_buffer(*xi);
    for (std::size_t p = 0; p < pairs; ++p) {
      double c = (*cs)[2 * p], s = (*cs)[2 * p + 1];
      double g0 = o.grad[2 * p], g1 = o.grad[2 * p + 1];
      gx[2 * p] += g0 * c + g1 * s;
      gx[2 * p + 1] += -g0 * s + g1 * c;
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient verification

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  Tensor y = f(leaf);
  if (y.numel() != 1) throw UsageError("grad_check: f must return a scalar");
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (y.requires_grad()) {
    backward(y);
    if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
  }
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < leaf.numel(); ++i) {
    double orig = leaf.data()[i];
    leaf.mutable_data()[i] = orig + h;
    double fp = f(leaf).item();
    leaf.mutable_data()[i] = orig - h;
    double fm = f(leaf).item();
    leaf.mutable_data()[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * h)));
  }
  return worst;
}

std::vector<ParamGradReport> grad_check_params(
    const std::function<Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor>>& params, double h) {
  for (const auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  backward(loss);
  std::vector<ParamGradReport> reports;
  NoGradGuard no_grad;
  for (const auto& [name, p] : params) {
    Tensor t = p;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    ParamGradReport r;
    r.name = name;
    r.count = t.numel();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double orig = t.data()[i];
      t.mutable_data()[i] = orig + h;
      double fp = loss_fn().item();
      t.mutable_data()[i] = orig - h;
      double fm = loss_fn().item();
      t.mutable_data()[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double err = relative_error(analytic[i], numeric);
      if (err > r.max_rel_error || i == 0) {
        r.max_rel_error = err;
        r.worst_index = i;
        r.analytic = analytic[i];
        r.numeric = numeric;
      }
    }
    reports.push_back(r);
  }
  return reports;
}

}  // namespace rpnt::ad
