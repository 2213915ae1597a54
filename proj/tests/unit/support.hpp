#pragma once
// Helpers shared by the unit tests. The finite-difference routine here is
// deliberately separate from the library's own gradcheck.
#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "triforecaster/rng.hpp"
#include "triforecaster/tensor.hpp"

namespace tftest {

using triforecaster::Rng;
using triforecaster::Shape;
using triforecaster::Tensor;

inline Tensor uniform(Shape shape, Rng& rng, bool requires_grad = false, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(triforecaster::shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Largest relative error between the analytic gradient of f w.r.t. each
// input and central differences with step eps.
inline double fd_max_rel(std::vector<Tensor> inputs, const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         double eps = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f(inputs).backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.grad_touched()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto x = t.mutable_values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      double up, down;
      {
        triforecaster::NoGradGuard g;
        x[i] = keep + eps;
        up = f(inputs).item();
        x[i] = keep - eps;
        down = f(inputs).item();
      }
      x[i] = keep;
      worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * eps)));
    }
  }
  return worst;
}

inline std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace tftest
