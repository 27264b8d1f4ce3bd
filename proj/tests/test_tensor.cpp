#include "doctest.h"

#include <cmath>

#include "hpd/tensor.hpp"
#include "oracles.hpp"

using namespace hpd;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("elementwise forward values") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  CHECK(add(a, b).at(3) == 12.0);
  CHECK(mul(a, b).at(0) == 5.0);
  CHECK(sub(a, b).at(1) == -4.0);
  CHECK(div(b, a).at(3) == 2.0);
  CHECK(relu(Tensor::from_data({2}, {-1, 2})).at(0) == 0.0);
  CHECK(relu(Tensor::from_data({2}, {-1, 2})).at(1) == 2.0);
}

TEST_CASE("broadcasting matches numpy rules") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3}, {10, 20, 30});
  Tensor c = add(a, b);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.at(0) == 11.0);
  CHECK(c.at(5) == 36.0);
  Tensor col = Tensor::from_data({2, 1}, {100, 200});
  Tensor d = add(a, col);
  CHECK(d.at(2) == 103.0);
  CHECK(d.at(3) == 204.0);
}

TEST_CASE("broadcast gradient reduces correctly") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b = Tensor::from_data({3}, {10, 20, 30}, true);
  Tensor loss = sum(mul(add(a, b), add(a, b)));
  auto gs = grad(loss, {a, b});
  // d/db_j = sum_i 2*(a_ij + b_j)
  CHECK(gs[1].shape() == Shape{3});
  CHECK(gs[1].at(0) == doctest::Approx(2 * (11 + 14)));
  CHECK(gs[1].at(2) == doctest::Approx(2 * (33 + 36)));
}

TEST_CASE("reductions") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(sum(a).item() == 21.0);
  CHECK(mean(a).item() == doctest::Approx(3.5));
  Tensor s0 = sum(a, {0}, false);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.at(1) == 7.0);
  Tensor s1 = sum(a, {1}, true);
  CHECK(s1.shape() == Shape{2, 1});
  CHECK(s1.at(0) == 6.0);
}

TEST_CASE("matmul forward and gradient") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12}, true);
  Tensor c = matmul(a, b);
  CHECK(c.at(0) == doctest::Approx(58));
  CHECK(c.at(3) == doctest::Approx(154));

  Rng rng(3);
  Tensor x = Tensor::randn({3, 4}, rng);
  Tensor w = Tensor::randn({4, 2}, rng);
  double err = oracles::grad_vs_fd(
      [&](const Tensor& p) { return sum(mul(matmul(p, w), matmul(p, w))); }, x);
  CHECK(err < 1e-6);
}

TEST_CASE("unary op gradients vs finite differences") {
  Rng rng(7);
  Tensor x = Tensor::randn({3, 3}, rng, 0.5);
  auto x_pos = Tensor::from_data({4}, {0.3, 1.1, 2.4, 0.9});

  CHECK(oracles::grad_vs_fd([](const Tensor& p) { return sum(exp(p)); }, x) < 1e-6);
  CHECK(oracles::grad_vs_fd([](const Tensor& p) { return sum(log(p)); }, x_pos) < 1e-6);
  CHECK(oracles::grad_vs_fd([](const Tensor& p) { return sum(tanh(p)); }, x) < 1e-6);
  CHECK(oracles::grad_vs_fd([](const Tensor& p) { return sum(sigmoid(p)); }, x) < 1e-6);
  CHECK(oracles::grad_vs_fd([](const Tensor& p) { return sum(softplus(p)); }, x) < 1e-6);
  CHECK(oracles::grad_vs_fd([](const Tensor& p) { return sum(pow(p, 3.0)); }, x) < 1e-6);
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& p) { return sum(mul(leaky_relu(p, 0.1), p)); },
            x) < 1e-5);
}

TEST_CASE("structure op gradients") {
  Rng rng(11);
  Tensor x = Tensor::randn({2, 3, 4}, rng);
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& p) {
              Tensor t = permute(p, {2, 0, 1});
              return sum(mul(t, t));
            },
            x) < 1e-6);
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& p) {
              Tensor t = reshape(p, {6, 4});
              return sum(mul(t, t));
            },
            x) < 1e-6);
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& p) {
              Tensor t = slice(p, 1, 1, 2);
              return sum(mul(t, t));
            },
            x) < 1e-6);
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& p) {
              Tensor t = concat({p, mul_scalar(p, 2.0)}, 2);
              return sum(mul(t, t));
            },
            x) < 1e-6);
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& p) {
              Tensor t = pad_axis(p, 2, 1, 2);
              return sum(mul(t, t));
            },
            x) < 1e-6);
}

TEST_CASE("permute round trip") {
  Rng rng(5);
  Tensor x = Tensor::randn({2, 3, 4, 5}, rng);
  Tensor y = permute(permute(x, {3, 1, 0, 2}), {2, 1, 3, 0});
  REQUIRE(y.shape() == x.shape());
  for (size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("im2col/col2im are adjoint") {
  Rng rng(13);
  int N = 2, C = 3, H = 5, W = 5, k = 3, stride = 1, pad = 1;
  Tensor x = Tensor::randn({N, C, H, W}, rng);
  Tensor cols = im2col(x, k, k, stride, pad);
  Tensor y = Tensor::randn(cols.shape(), rng);
  // <im2col(x), y> == <x, col2im(y)>
  double lhs = sum(mul(cols, y)).item();
  Tensor back = col2im(y, C, H, W, k, k, stride, pad);
  double rhs = sum(mul(x, back)).item();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("im2col gradient") {
  Rng rng(17);
  Tensor x = Tensor::randn({1, 2, 4, 4}, rng);
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& p) {
              Tensor t = im2col(p, 3, 3, 1, 1);
              return sum(mul(t, t));
            },
            x) < 1e-6);
}

TEST_CASE("pooling and upsampling are adjoint and differentiable") {
  Rng rng(19);
  Tensor x = Tensor::randn({2, 2, 4, 4}, rng);
  Tensor p = sum_pool2d(x, 2);
  CHECK(p.shape() == Shape{2, 2, 2, 2});
  double total_x = sum(x).item();
  CHECK(sum(p).item() == doctest::Approx(total_x));
  Tensor u = upsample_nearest(p, 2);
  CHECK(u.shape() == x.shape());
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& q) {
              Tensor t = avg_pool2d(q, 2);
              return sum(mul(t, t));
            },
            x) < 1e-6);
  CHECK(oracles::grad_vs_fd(
            [](const Tensor& q) {
              Tensor t = upsample_nearest(q, 2);
              return sum(mul(t, t));
            },
            Tensor::randn({1, 2, 3, 3}, rng)) < 1e-6);
}

TEST_CASE("affine resample: identity theta, flip exactness, gradient") {
  Rng rng(23);
  Tensor x = Tensor::randn({2, 1, 5, 5}, rng);
  std::vector<double> ident = {1, 0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0};
  Tensor y = affine_resample(x, ident, 5, 5);
  for (size_t i = 0; i < x.numel(); ++i)
    CHECK(y.at(i) == doctest::Approx(x.at(i)).epsilon(1e-12));

  std::vector<double> flip = {-1, 0, 0, 0, 1, 0, -1, 0, 0, 0, 1, 0};
  Tensor f = affine_resample(x, flip, 5, 5);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j)
        CHECK(f.at((n * 5 + i) * 5 + j) ==
              doctest::Approx(x.at((n * 5 + i) * 5 + (4 - j))));

  std::vector<double> rot;
  double a = 0.35;
  for (int n = 0; n < 2; ++n) {
    rot.insert(rot.end(), {std::cos(a), -std::sin(a), 0.05, std::sin(a),
                           std::cos(a), -0.1});
  }
  CHECK(oracles::grad_vs_fd(
            [&](const Tensor& q) {
              Tensor t = affine_resample(q, rot, 5, 5);
              return sum(mul(t, t));
            },
            x) < 1e-6);
}

TEST_CASE("gradient through a deep composition") {
  Rng rng(29);
  Tensor x = Tensor::randn({2, 6}, rng, 0.7);
  Tensor w1 = Tensor::randn({6, 5}, rng, 0.5);
  Tensor w2 = Tensor::randn({5, 3}, rng, 0.5);
  auto f = [&](const Tensor& p) {
    Tensor h = tanh(matmul(p, w1));
    Tensor o = matmul(h, w2);
    return mean(mul(o, o));
  };
  CHECK(oracles::grad_vs_fd(f, x) < 1e-6);
}

TEST_CASE("second-order gradients match finite differences of first order") {
  Rng rng(31);
  Tensor x0 = Tensor::randn({4}, rng, 0.8);
  Tensor v = Tensor::randn({4}, rng);

  // f(x) = sum(tanh(x)^2); direction-weighted first gradient h(x) = <grad f, v>
  Tensor xx = x0.detach(true);
  Tensor f = sum(mul(tanh(xx), tanh(xx)));
  auto g1 = grad(f, {xx}, {.create_graph = true});
  Tensor hh = sum(mul(g1[0], v));
  auto g2 = grad(hh, {xx});

  auto fd = oracles::fd_gradient(
      [&](const Tensor& p) {
        Tensor q = p.detach(true);
        Tensor ff = sum(mul(tanh(q), tanh(q)));
        auto gg = grad(ff, {q});
        double acc = 0;
        for (size_t i = 0; i < gg[0].numel(); ++i)
          acc += gg[0].at(i) * v.at(i);
        return acc;
      },
      x0, 1e-5);
  CHECK(oracles::max_rel_err(g2[0].data(), fd) < 1e-5);
}

TEST_CASE("second-order through matmul chain") {
  Rng rng(37);
  Tensor x0 = Tensor::randn({2, 3}, rng, 0.6);
  Tensor w = Tensor::randn({3, 3}, rng, 0.6);
  Tensor v = Tensor::randn({2, 3}, rng);

  Tensor x = x0.detach(true);
  Tensor f = sum(pow(matmul(x, w), 3.0));
  auto g1 = grad(f, {x}, {.create_graph = true});
  Tensor h = sum(mul(g1[0], v));
  auto g2 = grad(h, {x});

  auto fd = oracles::fd_gradient(
      [&](const Tensor& p) {
        Tensor q = p.detach(true);
        Tensor ff = sum(pow(matmul(q, w), 3.0));
        auto gg = grad(ff, {q});
        double acc = 0;
        for (size_t i = 0; i < gg[0].numel(); ++i)
          acc += gg[0].at(i) * v.at(i);
        return acc;
      },
      x0, 1e-5);
  CHECK(oracles::max_rel_err(g2[0].data(), fd, 1e-5) < 1e-4);
}

TEST_CASE("grad accumulates over reused subexpressions") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  Tensor y = mul(x, x);           // x^2
  Tensor z = add(y, mul(y, x));   // x^2 + x^3
  auto g = grad(z, {x});
  CHECK(g[0].at(0) == doctest::Approx(2 * 3 + 3 * 9));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  GradMode off(false);
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("detach cuts the graph") {
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  Tensor y = mul(x, x).detach();
  Tensor z = mul(y, x);
  auto g = grad(z, {x});
  CHECK(g[0].at(0) == doctest::Approx(4.0));  // only the direct factor
}

TEST_CASE("all_finite flags NaN and Inf") {
  CHECK(all_finite(Tensor::from_data({2}, {1.0, 2.0})));
  CHECK_FALSE(all_finite(Tensor::from_data({2}, {1.0, NAN})));
  CHECK_FALSE(all_finite(Tensor::from_data({2}, {INFINITY, 2.0})));
}

TEST_CASE("rng determinism and independence") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    double va = a.normal();
    CHECK(va == b.normal());
  }
  bool all_same = true;
  Rng a2(42);
  for (int i = 0; i < 10; ++i)
    if (a2.normal() != c.normal()) all_same = false;
  CHECK_FALSE(all_same);
}

TEST_SUITE_END();
