#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cct/graph.hpp"
#include "cct/tensor.hpp"

namespace cct {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because a kink (ReLU zero, max-pool tie) lies
  /// within h of them.
  std::size_t excluded = 0;
  bool passed = true;
};

/// Scalar-valued function of tensors that the caller owns. It must build the
/// computation in the graph it is handed.
template <Scalar T>
using ScalarFn = std::function<Tensor<T>(Graph<T>&)>;

/// Central finite differences against backward() for every coordinate of
/// `inputs`.
///
/// The relative error per coordinate is |analytic - numeric| divided by
/// max(|analytic|, |numeric|, 1e-6). A coordinate counts as kink-adjacent
/// when its forward and backward one-sided slopes disagree by more than
/// max(1e-4, 1e-2 * max slope); such coordinates are excluded. The decision
/// uses only function values, never the analytic gradient.
template <Scalar T>
GradCheckReport grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>> inputs, double h, double tol) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  std::vector<std::vector<T>> analytic;
  T f0;
  {
    Graph<T> g;
    Tensor<T> loss = f(g);
    backward(loss, g);
    f0 = loss.item();
    for (auto& x : inputs) {
      auto gr = x.grad();
      analytic.emplace_back(gr.begin(), gr.end());
    }
  }
  auto eval = [&]() {
    Graph<T> g(false);
    return static_cast<double>(f(g).item());
  };

  GradCheckReport rep;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto data = inputs[t].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T saved = data[i];
      data[i] = static_cast<T>(saved + h);
      const double fp = eval();
      data[i] = static_cast<T>(saved - h);
      const double fm = eval();
      data[i] = saved;

      const double d_plus = (fp - static_cast<double>(f0)) / h;
      const double d_minus = (static_cast<double>(f0) - fm) / h;
      if (std::abs(d_plus - d_minus) > std::max(1e-4, 1e-2 * std::max(std::abs(d_plus), std::abs(d_minus)))) {
        ++rep.excluded;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[t][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      rep.max_rel_error = std::max(rep.max_rel_error, std::abs(a - numeric) / denom);
      ++rep.checked;
    }
  }
  for (auto& x : inputs) x.zero_grad();
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

/// Single-input convenience form.
template <Scalar T>
GradCheckReport grad_check(const std::function<Tensor<T>(Graph<T>&, const Tensor<T>&)>& f, Tensor<T> x, double h,
                           double tol) {
  return grad_check<T>(ScalarFn<T>([&](Graph<T>& g) { return f(g, x); }), {x}, h, tol);
}

}  // namespace cct
