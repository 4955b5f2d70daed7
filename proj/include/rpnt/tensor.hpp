#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every operation that consumes a tensor with requires_grad set (and runs
// while gradient recording is enabled) attaches a Node to its output. The
// graph is discarded with the tensors; nothing is cached between passes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rpnt::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad (and out.data when useful) and accumulates into the
  // grads of the inputs that require them.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  // Negative axes count from the end.
  std::size_t size(std::ptrdiff_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no history, no gradient requirement.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Thread-local switch; when disabled no nodes are recorded.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Topologically ordered record of the nodes reachable from a root; inputs
// precede the operations that consume them.
class Tape {
 public:
  static Tape from(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  const std::vector<std::shared_ptr<TensorImpl>>& records() const { return order_; }

  // Seeds d(root)/d(root) = 1 and replays every record once, in reverse.
  void backward(const Tensor& root) const;

 private:
  std::vector<std::shared_ptr<TensorImpl>> order_;
};

// Throws UsageError for non-scalar losses.
void backward(const Tensor& loss);

// ---- elementwise (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // DomainError on nonpositive entries
Tensor sqrt(const Tensor& x);  // DomainError on negative entries
Tensor square(const Tensor& x);
// Exact form x * Phi(x) with Phi the standard normal CDF.
Tensor gelu(const Tensor& x);
// log(1 + e^x), returning x itself above 40.
Tensor softplus(const Tensor& x);
// Replaces entries where mask != 0 (mask broadcast to x) with value; those
// entries receive no gradient. mask never receives a gradient.
Tensor masked_fill(const Tensor& x, const Tensor& mask, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false);

// ---- linear algebra ----
// a[..., m, k] x b[..., k, n] with broadcast batch extents.
Tensor matmul(const Tensor& a, const Tensor& b);

// Max-subtracted softmax. -inf entries map to exactly 0; a slice that is
// entirely -inf raises DomainError.
Tensor softmax(const Tensor& x, std::ptrdiff_t axis);

// Normalizes over the last axis, then applies gamma * xhat + beta.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

enum class RowAnchor {
  kCenter,  // kernel rows cover i - (K1-1)/2 .. i + (K1-1)/2
  kCausal,  // kernel rows cover i - (K1-1) .. i
};

struct ConvOptions {
  RowAnchor row_anchor = RowAnchor::kCenter;
  // Only outputs with column <= row are computed (the rest are 0) and
  // inputs with column > row are treated as 0. Requires square planes.
  bool lower_triangle = false;
};

// Zero-padded "same" cross-correlation (no kernel flip) over the last two
// axes of x[..., H, W]. kernel is [..., K1, K2] with K1 and K2 odd, holding
// either one kernel shared by all planes, one per plane (P = numel / (H*W)),
// or one per plane and output row (P * H kernels).
Tensor conv2d_same(const Tensor& x, const Tensor& kernel, ConvOptions options = {});

// Rotates consecutive pairs (x[2i], x[2i+1]) by angles[i]; angles holds
// numel / 2 values in the same row-major order as the pairs.
Tensor rotate_pairs(const Tensor& x, std::span<const double> angles);

// ---- gradient verification ----
double relative_error(double analytic, double numeric);

// Max over coordinates of relative_error(analytic, central difference).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-5);

struct ParamGradReport {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Perturbs each parameter coordinate in place; loss_fn must rebuild the
// forward pass from the current parameter values and be deterministic.
std::vector<ParamGradReport> grad_check_params(
    const std::function<Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor>>& params, double h = 1e-5);

}  // namespace rpnt::ad
