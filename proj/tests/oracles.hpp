#pragma once

// Shared test oracles: central finite differences against autodiff, and a
// tiny Spearman null-distribution sampler. Kept independent of the library's
// gradient path (only forward evaluations are used to form differences).

#include <cmath>
#include <functional>
#include <vector>

#include "hpd/tensor.hpp"

namespace oracles {

// central finite difference of scalar fn w.r.t. x, element by element
inline std::vector<double> fd_gradient(
    const std::function<double(const hpd::Tensor&)>& fn, const hpd::Tensor& x,
    double h = 1e-5) {
  std::vector<double> g(x.numel());
  hpd::Tensor probe = x.detach();
  auto pd = probe.mutable_data();
  for (size_t i = 0; i < g.size(); ++i) {
    double orig = pd[i];
    pd[i] = orig + h;
    double fp = fn(probe);
    pd[i] = orig - h;
    double fm = fn(probe);
    pd[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// max relative error between two gradient vectors, with an absolute floor so
// near-zero entries do not blow up the ratio
inline double max_rel_err(const std::vector<double>& a,
                          const std::vector<double>& b, double floor = 1e-6) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline double max_rel_err(std::span<const double> a,
                          const std::vector<double>& b, double floor = 1e-6) {
  return max_rel_err(std::vector<double>(a.begin(), a.end()), b, floor);
}

// convenience: compare autodiff gradient of fn at x against central FD
inline double grad_vs_fd(const std::function<hpd::Tensor(const hpd::Tensor&)>& fn,
                         const hpd::Tensor& x0, double h = 1e-5,
                         double floor = 1e-6) {
  hpd::Tensor x = x0.detach(true);
  hpd::Tensor y = fn(x);
  auto g = hpd::grad(y, {x});
  auto fd = fd_gradient(
      [&](const hpd::Tensor& p) { return fn(p).item(); }, x, h);
  return max_rel_err(g[0].data(), fd, floor);
}

}  // namespace oracles
