#include "hpd/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hpd {

namespace {

#if defined(__GLIBC__)
// graph ops allocate MB-sized buffers at high rate; keep them on the heap
// instead of round-tripping through mmap/munmap
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

thread_local bool g_grad_enabled = true;

using MatRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

std::vector<size_t> strides_of(const Shape& s) {
  std::vector<size_t> st(s.size());
  size_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= static_cast<size_t>(s[i]);
  }
  return st;
}

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("tensor: " + msg);
}

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor&, const Tensor&)>;

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs)
      if (t.defined() && t.requires_grad()) needs = true;
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

constexpr size_t kParallelCutoff = 1 << 15;

Tensor unary_map(const char* op, const Tensor& x, double (*f)(double),
                 BackwardFn backward) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  size_t n = out.size();
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (int64_t i = 0; i < int64_t(n); ++i) out[size_t(i)] = f(xd[size_t(i)]);
  return make_op(op, x.shape(), std::move(out), {x}, std::move(backward));
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (size_t i = 0; i < nd; ++i) {
    int da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    int db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    check(da == db || da == 1 || db == 1,
          "broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// binary op on same-shape tensors
Tensor ew_same(const char* op, const Tensor& a, const Tensor& b,
               double (*f)(double, double), BackwardFn backward) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch");
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  size_t n = out.size();
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (int64_t i = 0; i < int64_t(n); ++i)
    out[size_t(i)] = f(ad[size_t(i)], bd[size_t(i)]);
  return make_op(op, a.shape(), std::move(out), {a, b}, std::move(backward));
}

std::pair<Tensor, Tensor> broadcast_pair(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return {a, b};
  Shape s = broadcast_shape(a.shape(), b.shape());
  Tensor ab = a.shape() == s ? a : broadcast_to(a, s);
  Tensor bb = b.shape() == s ? b : broadcast_to(b, s);
  return {ab, bb};
}

}  // namespace

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

bool GradMode::enabled() { return g_grad_enabled; }
GradMode::GradMode(bool enable) : prev_(g_grad_enabled) {
  g_grad_enabled = enable;
}
GradMode::~GradMode() { g_grad_enabled = prev_; }

// ---- constructors ----

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->data.assign(shape_numel(s), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->data.assign(shape_numel(s), v);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> v,
                         bool requires_grad) {
  check(v.size() == shape_numel(s), "from_data: size mismatch");
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->data = std::move(v);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::randn(const Shape& s, Rng& rng, double stddev,
                     bool requires_grad) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal() * stddev;
  return from_data(s, std::move(v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

double Tensor::item() const {
  check(numel() == 1, "item() on non-scalar " + shape_str(shape()));
  return n_->data[0];
}

Tensor Tensor::detach(bool requires_grad) const {
  auto n = std::make_shared<Node>();
  n->shape = n_->shape;
  n->data = n_->data;
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor ones_like(const Tensor& x) { return Tensor::full(x.shape(), 1.0); }
Tensor zeros_like(const Tensor& x) { return Tensor::zeros(x.shape()); }

bool all_finite(const Tensor& x) {
  for (double v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- elementwise ----

Tensor add(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0);
  return ew_same(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{g, g};
      });
}

Tensor sub(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0);
  return ew_same(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{g, neg(g)};
      });
}

Tensor mul(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0);
  return ew_same(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](const Tensor& self, const Tensor& g) {
        const auto& in = self.node()->inputs;
        return std::vector<Tensor>{mul(g, in[1]), mul(g, in[0])};
      });
}

Tensor div(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0);
  return ew_same(
      "div", a, b, [](double x, double y) { return x / y; },
      [](const Tensor& self, const Tensor& g) {
        const auto& in = self.node()->inputs;
        Tensor ga = div(g, in[1]);
        Tensor gb = neg(mul(ga, div(in[0], in[1])));
        return std::vector<Tensor>{ga, gb};
      });
}

Tensor neg(const Tensor& x) {
  return unary_map(
      "neg", x, [](double v) { return -v; },
      [](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{neg(g)};
      });
}

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + c;
  return make_op("add_s", x.shape(), std::move(out), {x},
                 [](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{g};
                 });
}

Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * c;
  return make_op("mul_s", x.shape(), std::move(out), {x},
                 [c](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{mul_scalar(g, c)};
                 });
}

Tensor exp(const Tensor& x) {
  return unary_map(
      "exp", x, [](double v) { return std::exp(v); },
      [](const Tensor& self, const Tensor& g) {
        return std::vector<Tensor>{mul(g, self)};
      });
}

Tensor log(const Tensor& x) {
  return unary_map(
      "log", x, [](double v) { return std::log(v); },
      [](const Tensor& self, const Tensor& g) {
        return std::vector<Tensor>{div(g, self.node()->inputs[0])};
      });
}

Tensor pow(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::pow(xd[i], c);
  return make_op("pow", x.shape(), std::move(out), {x},
                 [c](const Tensor& self, const Tensor& g) {
                   const Tensor& xin = self.node()->inputs[0];
                   return std::vector<Tensor>{
                       mul(g, mul_scalar(pow(xin, c - 1.0), c))};
                 });
}

Tensor sqrt(const Tensor& x) { return pow(x, 0.5); }

Tensor relu(const Tensor& x) {
  return unary_map(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](const Tensor& self, const Tensor& g) {
        const Tensor& xin = self.node()->inputs[0];
        std::vector<double> m(xin.numel());
        auto xd = xin.data();
        for (size_t i = 0; i < m.size(); ++i) m[i] = xd[i] > 0.0 ? 1.0 : 0.0;
        Tensor mask = Tensor::from_data(xin.shape(), std::move(m));
        return std::vector<Tensor>{mul(g, mask)};
      });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = xd[i] > 0.0 ? xd[i] : slope * xd[i];
  return make_op("lrelu", x.shape(), std::move(out), {x},
                 [slope](const Tensor& self, const Tensor& g) {
                   const Tensor& xin = self.node()->inputs[0];
                   std::vector<double> m(xin.numel());
                   auto xd2 = xin.data();
                   for (size_t i = 0; i < m.size(); ++i)
                     m[i] = xd2[i] > 0.0 ? 1.0 : slope;
                   Tensor mask = Tensor::from_data(xin.shape(), std::move(m));
                   return std::vector<Tensor>{mul(g, mask)};
                 });
}

Tensor tanh(const Tensor& x) {
  return unary_map(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](const Tensor& self, const Tensor& g) {
        Tensor one_minus = sub(Tensor::full(self.shape(), 1.0),
                               mul(self, self));
        return std::vector<Tensor>{mul(g, one_minus)};
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_map(
      "sigmoid", x,
      [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      },
      [](const Tensor& self, const Tensor& g) {
        Tensor one_minus =
            mul(self, sub(Tensor::full(self.shape(), 1.0), self));
        return std::vector<Tensor>{mul(g, one_minus)};
      });
}

Tensor softplus(const Tensor& x) {
  // log(1+exp(x)) = relu(x) + log1p(exp(-|x|))
  return unary_map(
      "softplus", x,
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
      [](const Tensor& self, const Tensor& g) {
        return std::vector<Tensor>{mul(g, sigmoid(self.node()->inputs[0]))};
      });
}

// ---- structure ----

Tensor reshape(const Tensor& x, const Shape& s) {
  Shape target = s;
  // allow a single -1 wildcard
  int64_t known = 1;
  int wild = -1;
  for (size_t i = 0; i < target.size(); ++i) {
    if (target[i] == -1) {
      check(wild < 0, "reshape: multiple wildcards");
      wild = static_cast<int>(i);
    } else {
      known *= target[i];
    }
  }
  if (wild >= 0) target[static_cast<size_t>(wild)] =
      static_cast<int>(static_cast<int64_t>(x.numel()) / known);
  check(shape_numel(target) == x.numel(),
        "reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
            shape_str(s));
  std::vector<double> out(x.data().begin(), x.data().end());
  Shape from = x.shape();
  return make_op("reshape", target, std::move(out), {x},
                 [from](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{reshape(g, from)};
                 });
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  check(axes.size() == x.shape().size(), "permute: rank mismatch");
  const Shape& xs = x.shape();
  Shape out_shape(axes.size());
  for (size_t i = 0; i < axes.size(); ++i)
    out_shape[i] = xs[static_cast<size_t>(axes[i])];
  auto in_strides = strides_of(xs);
  auto out_strides = strides_of(out_shape);
  std::vector<double> out(x.numel());
  auto xd = x.data();
  size_t n = out.size();
  size_t nd = axes.size();
  // stride of output dim i in the input layout
  std::vector<size_t> src_stride(nd);
  for (size_t i = 0; i < nd; ++i)
    src_stride[i] = in_strides[static_cast<size_t>(axes[i])];
#pragma omp parallel for schedule(static)
  for (int64_t oi = 0; oi < static_cast<int64_t>(n); ++oi) {
    size_t rem = static_cast<size_t>(oi);
    size_t src = 0;
    for (size_t d = 0; d < nd; ++d) {
      size_t idx = rem / out_strides[d];
      rem %= out_strides[d];
      src += idx * src_stride[d];
    }
    out[static_cast<size_t>(oi)] = xd[src];
  }
  std::vector<int> inverse(axes.size());
  for (size_t i = 0; i < axes.size(); ++i)
    inverse[static_cast<size_t>(axes[i])] = static_cast<int>(i);
  return make_op("permute", out_shape, std::move(out), {x},
                 [inverse](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{permute(g, inverse)};
                 });
}

Tensor transpose2d(const Tensor& x) {
  check(x.ndim() == 2, "transpose2d: need rank 2");
  return permute(x, {1, 0});
}

Tensor broadcast_to(const Tensor& x, const Shape& s) {
  if (x.shape() == s) return x;
  const Shape& xs = x.shape();
  size_t nd = s.size();
  check(xs.size() <= nd, "broadcast_to: rank shrink");
  auto out_strides = strides_of(s);
  auto in_strides = strides_of(xs);
  // per output dim: input stride, 0 when broadcast
  std::vector<size_t> src_stride(nd, 0);
  size_t off = nd - xs.size();
  for (size_t i = 0; i < xs.size(); ++i) {
    int sd = s[off + i];
    check(xs[i] == sd || xs[i] == 1,
          "broadcast_to: " + shape_str(xs) + " -> " + shape_str(s));
    src_stride[off + i] = xs[i] == 1 ? 0 : in_strides[i];
  }
  std::vector<double> out(shape_numel(s));
  auto xd = x.data();
#pragma omp parallel for schedule(static)
  for (int64_t oi = 0; oi < static_cast<int64_t>(out.size()); ++oi) {
    size_t rem = static_cast<size_t>(oi);
    size_t src = 0;
    for (size_t d = 0; d < nd; ++d) {
      size_t idx = rem / out_strides[d];
      rem %= out_strides[d];
      src += idx * src_stride[d];
    }
    out[static_cast<size_t>(oi)] = xd[src];
  }
  Shape from = xs;
  return make_op("broadcast", s, std::move(out), {x},
                 [from](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{reduce_sum_to(g, from)};
                 });
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  const Shape& xs = x.shape();
  check(axis >= 0 && axis < x.ndim(), "slice: bad axis");
  check(start >= 0 && len >= 0 && start + len <= xs[static_cast<size_t>(axis)],
        "slice: out of range");
  Shape out_shape = xs;
  out_shape[static_cast<size_t>(axis)] = len;
  auto in_strides = strides_of(xs);
  size_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(xs[i]);
  size_t inner = in_strides[static_cast<size_t>(axis)];
  size_t axis_len = static_cast<size_t>(xs[static_cast<size_t>(axis)]);
  std::vector<double> out(shape_numel(out_shape));
  auto xd = x.data();
  size_t o = 0;
  for (size_t a = 0; a < outer; ++a) {
    size_t base = a * axis_len * inner + static_cast<size_t>(start) * inner;
    std::copy(xd.begin() + base, xd.begin() + base + static_cast<size_t>(len) * inner,
              out.begin() + o);
    o += static_cast<size_t>(len) * inner;
  }
  int before = start;
  int after = xs[static_cast<size_t>(axis)] - start - len;
  return make_op("slice", out_shape, std::move(out), {x},
                 [axis, before, after](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{pad_axis(g, axis, before, after)};
                 });
}

Tensor pad_axis(const Tensor& x, int axis, int before, int after) {
  const Shape& xs = x.shape();
  check(axis >= 0 && axis < x.ndim(), "pad_axis: bad axis");
  check(before >= 0 && after >= 0, "pad_axis: negative pad");
  Shape out_shape = xs;
  out_shape[static_cast<size_t>(axis)] += before + after;
  auto in_strides = strides_of(xs);
  size_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(xs[i]);
  size_t inner = in_strides[static_cast<size_t>(axis)];
  size_t axis_len = static_cast<size_t>(xs[static_cast<size_t>(axis)]);
  std::vector<double> out(shape_numel(out_shape), 0.0);
  auto xd = x.data();
  size_t out_axis = axis_len + static_cast<size_t>(before + after);
  for (size_t a = 0; a < outer; ++a) {
    size_t src = a * axis_len * inner;
    size_t dst = (a * out_axis + static_cast<size_t>(before)) * inner;
    std::copy(xd.begin() + src, xd.begin() + src + axis_len * inner,
              out.begin() + dst);
  }
  int len = xs[static_cast<size_t>(axis)];
  return make_op("pad_axis", out_shape, std::move(out), {x},
                 [axis, before, len](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{slice(g, axis, before, len)};
                 });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  check(!xs.empty(), "concat: empty list");
  const Shape& s0 = xs[0].shape();
  check(axis >= 0 && axis < xs[0].ndim(), "concat: bad axis");
  int total = 0;
  for (const auto& t : xs) {
    check(t.ndim() == xs[0].ndim(), "concat: rank mismatch");
    for (int d = 0; d < t.ndim(); ++d)
      if (d != axis)
        check(t.shape()[static_cast<size_t>(d)] == s0[static_cast<size_t>(d)],
              "concat: shape mismatch");
    total += t.shape()[static_cast<size_t>(axis)];
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = total;
  size_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s0[i]);
  size_t inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i)
    inner *= static_cast<size_t>(s0[i]);
  std::vector<double> out(shape_numel(out_shape));
  size_t row = static_cast<size_t>(total) * inner;
  size_t col_off = 0;
  for (const auto& t : xs) {
    size_t t_axis = static_cast<size_t>(t.shape()[static_cast<size_t>(axis)]);
    auto td = t.data();
    for (size_t a = 0; a < outer; ++a) {
      std::copy(td.begin() + a * t_axis * inner,
                td.begin() + (a + 1) * t_axis * inner,
                out.begin() + a * row + col_off);
    }
    col_off += t_axis * inner;
  }
  std::vector<int> lens;
  for (const auto& t : xs)
    lens.push_back(t.shape()[static_cast<size_t>(axis)]);
  return make_op("concat", out_shape, std::move(out), xs,
                 [axis, lens](const Tensor&, const Tensor& g) {
                   std::vector<Tensor> gs;
                   int off = 0;
                   for (int len : lens) {
                     gs.push_back(slice(g, axis, off, len));
                     off += len;
                   }
                   return gs;
                 });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Shape from = x.shape();
  return make_op("sum", {1}, {acc}, {x},
                 [from](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{broadcast_to(
                       reshape(g, Shape(from.size(), 1)), from)};
                 });
}

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  const Shape& xs = x.shape();
  std::vector<bool> reduce(xs.size(), false);
  for (int a : axes) {
    check(a >= 0 && a < x.ndim(), "sum: bad axis");
    reduce[static_cast<size_t>(a)] = true;
  }
  Shape kept = xs;
  for (size_t i = 0; i < xs.size(); ++i)
    if (reduce[i]) kept[i] = 1;
  auto in_strides = strides_of(xs);
  auto out_strides = strides_of(kept);
  std::vector<double> out(shape_numel(kept), 0.0);
  auto xd = x.data();
  size_t nd = xs.size();
  for (size_t ii = 0; ii < xd.size(); ++ii) {
    size_t rem = ii;
    size_t oi = 0;
    for (size_t d = 0; d < nd; ++d) {
      size_t idx = rem / in_strides[d];
      rem %= in_strides[d];
      if (!reduce[d]) oi += idx * out_strides[d];
    }
    out[oi] += xd[ii];
  }
  Shape final_shape;
  if (keepdim) {
    final_shape = kept;
  } else {
    for (size_t i = 0; i < xs.size(); ++i)
      if (!reduce[i]) final_shape.push_back(xs[i]);
    if (final_shape.empty()) final_shape = {1};
  }
  Shape from = xs;
  Shape kept_copy = kept;
  return make_op("sum_axes", final_shape, std::move(out), {x},
                 [from, kept_copy](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{
                       broadcast_to(reshape(g, kept_copy), from)};
                 });
}

Tensor mean(const Tensor& x) {
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  size_t n = 1;
  for (int a : axes) n *= static_cast<size_t>(x.shape()[static_cast<size_t>(a)]);
  return mul_scalar(sum(x, axes, keepdim), 1.0 / static_cast<double>(n));
}

Tensor reduce_sum_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  const Shape& gs = g.shape();
  size_t off = gs.size() - target.size();
  std::vector<int> axes;
  for (size_t i = 0; i < off; ++i) axes.push_back(static_cast<int>(i));
  for (size_t i = 0; i < target.size(); ++i)
    if (target[i] == 1 && gs[off + i] != 1)
      axes.push_back(static_cast<int>(off + i));
  Tensor r = axes.empty() ? g : sum(g, axes, true);
  return reshape(r, target);
}

Tensor row_max_detached(const Tensor& x) {
  check(x.ndim() >= 1, "row_max: rank 0");
  size_t cols = static_cast<size_t>(x.shape().back());
  size_t rows = x.numel() / cols;
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  std::vector<double> out(rows);
  auto xd = x.data();
  for (size_t r = 0; r < rows; ++r) {
    double m = xd[r * cols];
    for (size_t c = 1; c < cols; ++c) m = std::max(m, xd[r * cols + c]);
    out[r] = m;
  }
  return Tensor::from_data(out_shape, std::move(out));
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul: rank must be 2");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  check(k == k2, "matmul: inner dim mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m) * static_cast<size_t>(n));
  {
    MapCM am(a.data().data(), m, k);
    MapCM bm(b.data().data(), k, n);
    MapM om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [](const Tensor& self, const Tensor& g) {
                   const auto& in = self.node()->inputs;
                   Tensor ga = matmul(g, transpose2d(in[1]));
                   Tensor gb = matmul(transpose2d(in[0]), g);
                   return std::vector<Tensor>{ga, gb};
                 });
}

Tensor bmm_shared_left(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 3, "bmm_shared_left: need [m,k],[N,k,l]");
  int m = a.dim(0), k = a.dim(1);
  int N = b.dim(0), k2 = b.dim(1), l = b.dim(2);
  check(k == k2, "bmm_shared_left: inner dim mismatch");
  std::vector<double> out(size_t(N) * m * l);
  {
    MapCM am(a.data().data(), m, k);
    const double* bd = b.data().data();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
      MapCM bn(bd + size_t(n) * k * l, k, l);
      MapM on(out.data() + size_t(n) * m * l, m, l);
      on.noalias() = am * bn;
    }
  }
  return make_op("bmm_l", {N, m, l}, std::move(out), {a, b},
                 [](const Tensor& self, const Tensor& g) {
                   const auto& in = self.node()->inputs;
                   Tensor ga = bmm_sum_outer(g, in[1]);
                   Tensor gb = bmm_shared_left(transpose2d(in[0]), g);
                   return std::vector<Tensor>{ga, gb};
                 });
}

Tensor bmm_sum_outer(const Tensor& g, const Tensor& b) {
  check(g.ndim() == 3 && b.ndim() == 3, "bmm_sum_outer: need [N,m,l],[N,k,l]");
  int N = g.dim(0), m = g.dim(1), l = g.dim(2);
  int N2 = b.dim(0), k = b.dim(1), l2 = b.dim(2);
  check(N == N2 && l == l2, "bmm_sum_outer: batch/inner mismatch");
  std::vector<double> out(size_t(m) * k, 0.0);
  {
    MapM om(out.data(), m, k);
    const double* gd = g.data().data();
    const double* bd = b.data().data();
    for (int n = 0; n < N; ++n) {
      MapCM gn(gd + size_t(n) * m * l, m, l);
      MapCM bn(bd + size_t(n) * k * l, k, l);
      om.noalias() += gn * bn.transpose();
    }
  }
  return make_op("bmm_so", {m, k}, std::move(out), {g, b},
                 [](const Tensor& self, const Tensor& gg) {
                   const auto& in = self.node()->inputs;
                   Tensor g_g = bmm_shared_left(gg, in[1]);
                   Tensor g_b = bmm_shared_left(transpose2d(gg), in[0]);
                   return std::vector<Tensor>{g_g, g_b};
                 });
}

// ---- image ops ----

Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad) {
  check(x.ndim() == 4, "im2col: need [N,C,H,W]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  check(OH > 0 && OW > 0, "im2col: kernel larger than input");
  size_t ckk = static_cast<size_t>(C) * kh * kw;
  size_t L = static_cast<size_t>(OH) * OW;
  std::vector<double> out(static_cast<size_t>(N) * ckk * L, 0.0);
  auto xd = x.data();
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    const double* xn = xd.data() + static_cast<size_t>(n) * C * H * W;
    double* on = out.data() + static_cast<size_t>(n) * ckk * L;
    for (int c = 0; c < C; ++c) {
      for (int ki = 0; ki < kh; ++ki) {
        for (int kj = 0; kj < kw; ++kj) {
          double* row = on + ((static_cast<size_t>(c) * kh + ki) * kw + kj) * L;
          for (int oi = 0; oi < OH; ++oi) {
            int ih = oi * stride + ki - pad;
            if (ih < 0 || ih >= H) continue;
            const double* src = xn + (static_cast<size_t>(c) * H + ih) * W;
            for (int oj = 0; oj < OW; ++oj) {
              int iw = oj * stride + kj - pad;
              if (iw < 0 || iw >= W) continue;
              row[static_cast<size_t>(oi) * OW + oj] = src[iw];
            }
          }
        }
      }
    }
  }
  int Ci = C, Hi = H, Wi = W;
  return make_op("im2col", {N, static_cast<int>(ckk), static_cast<int>(L)},
                 std::move(out), {x},
                 [Ci, Hi, Wi, kh, kw, stride, pad](const Tensor&,
                                                   const Tensor& g) {
                   return std::vector<Tensor>{
                       col2im(g, Ci, Hi, Wi, kh, kw, stride, pad)};
                 });
}

Tensor col2im(const Tensor& cols, int C, int H, int W, int kh, int kw,
              int stride, int pad) {
  check(cols.ndim() == 3, "col2im: need [N,CKK,L]");
  int N = cols.dim(0);
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  check(cols.dim(1) == C * kh * kw && cols.dim(2) == OH * OW,
        "col2im: layout mismatch");
  size_t ckk = static_cast<size_t>(C) * kh * kw;
  size_t L = static_cast<size_t>(OH) * OW;
  std::vector<double> out(static_cast<size_t>(N) * C * H * W, 0.0);
  auto cd = cols.data();
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    const double* cn = cd.data() + static_cast<size_t>(n) * ckk * L;
    double* on = out.data() + static_cast<size_t>(n) * C * H * W;
    for (int c = 0; c < C; ++c) {
      for (int ki = 0; ki < kh; ++ki) {
        for (int kj = 0; kj < kw; ++kj) {
          const double* row =
              cn + ((static_cast<size_t>(c) * kh + ki) * kw + kj) * L;
          for (int oi = 0; oi < OH; ++oi) {
            int ih = oi * stride + ki - pad;
            if (ih < 0 || ih >= H) continue;
            double* dst = on + (static_cast<size_t>(c) * H + ih) * W;
            for (int oj = 0; oj < OW; ++oj) {
              int iw = oj * stride + kj - pad;
              if (iw < 0 || iw >= W) continue;
              dst[iw] += row[static_cast<size_t>(oi) * OW + oj];
            }
          }
        }
      }
    }
  }
  return make_op("col2im", {N, C, H, W}, std::move(out), {cols},
                 [kh, kw, stride, pad](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{im2col(g, kh, kw, stride, pad)};
                 });
}

Tensor sum_pool2d(const Tensor& x, int k) {
  check(x.ndim() == 4, "sum_pool2d: need [N,C,H,W]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H % k == 0 && W % k == 0, "sum_pool2d: size not divisible");
  int OH = H / k, OW = W / k;
  std::vector<double> out(static_cast<size_t>(N) * C * OH * OW, 0.0);
  auto xd = x.data();
  size_t nc = static_cast<size_t>(N) * C;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < static_cast<int64_t>(nc); ++p) {
    const double* xp = xd.data() + static_cast<size_t>(p) * H * W;
    double* op = out.data() + static_cast<size_t>(p) * OH * OW;
    for (int oi = 0; oi < OH; ++oi)
      for (int oj = 0; oj < OW; ++oj) {
        double acc = 0.0;
        for (int di = 0; di < k; ++di)
          for (int dj = 0; dj < k; ++dj)
            acc += xp[(oi * k + di) * W + (oj * k + dj)];
        op[oi * OW + oj] = acc;
      }
  }
  return make_op("sum_pool", {N, C, OH, OW}, std::move(out), {x},
                 [k](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{upsample_nearest(g, k)};
                 });
}

Tensor avg_pool2d(const Tensor& x, int k) {
  return mul_scalar(sum_pool2d(x, k), 1.0 / static_cast<double>(k * k));
}

Tensor upsample_nearest(const Tensor& x, int k) {
  check(x.ndim() == 4, "upsample: need [N,C,H,W]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int OH = H * k, OW = W * k;
  std::vector<double> out(static_cast<size_t>(N) * C * OH * OW);
  auto xd = x.data();
  size_t nc = static_cast<size_t>(N) * C;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < static_cast<int64_t>(nc); ++p) {
    const double* xp = xd.data() + static_cast<size_t>(p) * H * W;
    double* op = out.data() + static_cast<size_t>(p) * OH * OW;
    for (int oi = 0; oi < OH; ++oi)
      for (int oj = 0; oj < OW; ++oj)
        op[oi * OW + oj] = xp[(oi / k) * W + (oj / k)];
  }
  return make_op("upsample", {N, C, OH, OW}, std::move(out), {x},
                 [k](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{sum_pool2d(g, k)};
                 });
}

namespace {

// shared bilinear kernel: forward gathers, adjoint scatters
void bilinear_apply(std::span<const double> src, std::span<double> dst,
                    const std::vector<double>& theta, int N, int C, int in_h,
                    int in_w, int out_h, int out_w, bool adjoint) {
  // adjoint=false: src is [N,C,in_h,in_w], dst is [N,C,out_h,out_w]
  // adjoint=true : src is [N,C,out_h,out_w] (grad), dst is [N,C,in_h,in_w]
  for (int n = 0; n < N; ++n) {
    const double* th = theta.data() + static_cast<size_t>(n) * 6;
    for (int oi = 0; oi < out_h; ++oi) {
      double v = out_h > 1 ? 2.0 * oi / (out_h - 1) - 1.0 : 0.0;
      for (int oj = 0; oj < out_w; ++oj) {
        double u = out_w > 1 ? 2.0 * oj / (out_w - 1) - 1.0 : 0.0;
        double su = th[0] * u + th[1] * v + th[2];
        double sv = th[3] * u + th[4] * v + th[5];
        double xs = in_w > 1 ? (su + 1.0) * 0.5 * (in_w - 1) : 0.0;
        double ys = in_h > 1 ? (sv + 1.0) * 0.5 * (in_h - 1) : 0.0;
        int x0 = static_cast<int>(std::floor(xs));
        int y0 = static_cast<int>(std::floor(ys));
        double fx = xs - x0, fy = ys - y0;
        const int xi[2] = {x0, x0 + 1};
        const int yi[2] = {y0, y0 + 1};
        const double wx[2] = {1.0 - fx, fx};
        const double wy[2] = {1.0 - fy, fy};
        for (int c = 0; c < C; ++c) {
          size_t in_base =
              (static_cast<size_t>(n) * C + c) * in_h * in_w;
          size_t out_idx =
              ((static_cast<size_t>(n) * C + c) * out_h + oi) * out_w + oj;
          if (!adjoint) {
            double acc = 0.0;
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b) {
                if (yi[a] < 0 || yi[a] >= in_h || xi[b] < 0 || xi[b] >= in_w)
                  continue;
                acc += wy[a] * wx[b] *
                       src[in_base + static_cast<size_t>(yi[a]) * in_w + xi[b]];
              }
            dst[out_idx] = acc;
          } else {
            double gv = src[out_idx];
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b) {
                if (yi[a] < 0 || yi[a] >= in_h || xi[b] < 0 || xi[b] >= in_w)
                  continue;
                dst[in_base + static_cast<size_t>(yi[a]) * in_w + xi[b]] +=
                    wy[a] * wx[b] * gv;
              }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor affine_resample(const Tensor& x, const std::vector<double>& theta,
                       int out_h, int out_w) {
  check(x.ndim() == 4, "affine_resample: need [N,C,H,W]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(theta.size() == static_cast<size_t>(N) * 6,
        "affine_resample: theta must be [N,6]");
  std::vector<double> out(static_cast<size_t>(N) * C * out_h * out_w, 0.0);
  bilinear_apply(x.data(), out, theta, N, C, H, W, out_h, out_w, false);
  return make_op("resample", {N, C, out_h, out_w}, std::move(out), {x},
                 [theta, H, W](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{
                       affine_resample_adjoint(g, theta, H, W)};
                 });
}

Tensor affine_resample_adjoint(const Tensor& g,
                               const std::vector<double>& theta, int in_h,
                               int in_w) {
  check(g.ndim() == 4, "resample_adjoint: need [N,C,H,W]");
  int N = g.dim(0), C = g.dim(1), OH = g.dim(2), OW = g.dim(3);
  check(theta.size() == static_cast<size_t>(N) * 6,
        "resample_adjoint: theta must be [N,6]");
  std::vector<double> out(static_cast<size_t>(N) * C * in_h * in_w, 0.0);
  bilinear_apply(g.data(), out, theta, N, C, in_h, in_w, OH, OW, true);
  return make_op("resample_adj", {N, C, in_h, in_w}, std::move(out), {g},
                 [theta, OH, OW](const Tensor&, const Tensor& gg) {
                   return std::vector<Tensor>{
                       affine_resample(gg, theta, OH, OW)};
                 });
}

// ---- autodiff driver ----

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs,
                         const GradOptions& opt) {
  check(output.defined(), "grad: undefined output");
  Tensor seed = opt.grad_output;
  if (!seed.defined()) {
    check(output.numel() == 1, "grad: non-scalar output needs grad_output");
    seed = ones_like(output);
  }
  check(seed.shape() == output.shape(), "grad: seed shape mismatch");

  // reverse topological order over the requires_grad subgraph
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::unordered_map<Node*, Tensor> node_tensor;
  {
    std::vector<std::pair<Tensor, size_t>> stack;
    stack.emplace_back(output, 0);
    node_tensor.emplace(output.node(), output);
    visited.insert(output.node());
    while (!stack.empty()) {
      auto& [t, child_idx] = stack.back();
      Node* n = t.node();
      if (child_idx < n->inputs.size()) {
        Tensor child = n->inputs[child_idx];
        ++child_idx;
        if (child.defined() && child.requires_grad() &&
            !visited.count(child.node())) {
          visited.insert(child.node());
          node_tensor.emplace(child.node(), child);
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }
  // order is post-order (children first); traverse reversed for backprop
  std::unordered_map<Node*, Tensor> grads;
  grads[output.node()] = seed;
  {
    GradMode gm(opt.create_graph);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      auto git = grads.find(n);
      if (git == grads.end()) continue;
      if (!n->backward) continue;
      Tensor self = node_tensor.at(n);
      std::vector<Tensor> in_grads = n->backward(self, git->second);
      check(in_grads.size() == n->inputs.size(),
            std::string("backward arity mismatch in op ") + n->op);
      for (size_t i = 0; i < in_grads.size(); ++i) {
        const Tensor& in = n->inputs[i];
        if (!in.defined() || !in.requires_grad()) continue;
        if (!in_grads[i].defined()) continue;
        auto pit = grads.find(in.node());
        if (pit == grads.end()) {
          grads.emplace(in.node(), in_grads[i]);
        } else {
          pit->second = add(pit->second, in_grads[i]);
        }
      }
    }
  }
  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.node());
    Tensor g = it == grads.end() ? zeros_like(in) : it->second;
    if (!opt.create_graph && g.requires_grad()) g = g.detach();
    result.push_back(std::move(g));
  }
  return result;
}

std::vector<Tensor> grad(const Tensor& output,
                         const std::vector<Tensor>& inputs,
                         const GradOptions& opt) {
  return grad(output, std::span<const Tensor>(inputs), opt);
}

}  // namespace hpd
