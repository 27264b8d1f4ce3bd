#pragma once

// Reverse-mode autodiff over dense double tensors.
//
// Every primitive's backward pass is itself built out of primitives, so
// gradients of gradients work to arbitrary order (needed by gradient matching
// and unrolled trajectory matching, which differentiate through a gradient
// computation). Graphs are dynamic: ops record their inputs and a backward
// closure; grad() walks the graph in reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hpd/rng.hpp"

namespace hpd {

using Shape = std::vector<int>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Tensor> inputs;
  // maps (self, grad_of_self) -> grads aligned with inputs (empty Tensor for
  // inputs that need no gradient)
  std::function<std::vector<Tensor>(const Tensor&, const Tensor&)> backward;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<double> v,
                          bool requires_grad = false);
  static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  size_t numel() const { return n_->data.size(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  std::span<const double> data() const { return n_->data; }
  std::span<double> mutable_data() { return n_->data; }
  double item() const;
  double at(size_t i) const { return n_->data[i]; }

  // A leaf tensor sharing nothing with this graph (copies data).
  Tensor detach(bool requires_grad = false) const;
  void set_requires_grad(bool v) { n_->requires_grad = v; }

  Node* node() const { return n_.get(); }

  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<Node> n_;
};

// Scoped control of graph recording. When disabled, ops compute values but
// record no inputs/backward, so results are constants.
struct GradMode {
  static bool enabled();
  explicit GradMode(bool enable);
  ~GradMode();

 private:
  bool prev_;
};

// ---- elementwise (auto-broadcast, numpy rules) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, double c);
Tensor sqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// log(1 + exp(x)), overflow-safe
Tensor softplus(const Tensor& x);

// ---- structure ----
Tensor reshape(const Tensor& x, const Shape& s);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor transpose2d(const Tensor& x);
Tensor broadcast_to(const Tensor& x, const Shape& s);
Tensor slice(const Tensor& x, int axis, int start, int len);
// zero-pad along one axis (inverse of slice)
Tensor pad_axis(const Tensor& x, int axis, int before, int after);
Tensor concat(const std::vector<Tensor>& xs, int axis);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdim);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdim);
// reduce a gradient back to a broadcast source shape (right-aligned)
Tensor reduce_sum_to(const Tensor& g, const Shape& target);
// row-wise max over the last axis, detached constant (for logsumexp shifts)
Tensor row_max_detached(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
// out[n] = A x B[n] for a shared left matrix: A [m,k], B [N,k,l] -> [N,m,l]
Tensor bmm_shared_left(const Tensor& a, const Tensor& b);
// sum_n G[n] x B[n]^T : G [N,m,l], B [N,k,l] -> [m,k]
Tensor bmm_sum_outer(const Tensor& g, const Tensor& b);

// ---- image ops ----
// [N,C,H,W] -> [N, C*kh*kw, OH*OW]
Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad);
// adjoint of im2col; target spatial size (H, W)
Tensor col2im(const Tensor& cols, int C, int H, int W, int kh, int kw,
              int stride, int pad);
// non-overlapping k x k sum pooling, [N,C,H,W] -> [N,C,H/k,W/k]
Tensor sum_pool2d(const Tensor& x, int k);
Tensor avg_pool2d(const Tensor& x, int k);
// nearest-neighbour upsample by integer factor k (adjoint of sum_pool2d)
Tensor upsample_nearest(const Tensor& x, int k);

// Per-sample affine resampling with bilinear interpolation and zero padding.
// theta is row-major [N, 6]: (out coords in [-1,1]) -> src = A*[u,v]^T + t.
// Differentiable w.r.t. x only; theta is a fixed parameter.
Tensor affine_resample(const Tensor& x, const std::vector<double>& theta,
                       int out_h, int out_w);
Tensor affine_resample_adjoint(const Tensor& g,
                               const std::vector<double>& theta, int in_h,
                               int in_w);

// ---- autodiff driver ----
struct GradOptions {
  bool create_graph = false;
  // when unset, `output` must be a scalar and is seeded with 1
  Tensor grad_output;
};

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs,
                         const GradOptions& opt = {});
std::vector<Tensor> grad(const Tensor& output,
                         const std::vector<Tensor>& inputs,
                         const GradOptions& opt = {});

// ---- misc ----
bool all_finite(const Tensor& x);
Tensor ones_like(const Tensor& x);
Tensor zeros_like(const Tensor& x);

}  // namespace hpd
