#pragma once

// Reference computations written without the library's kernels, used as
// independent oracles by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mmdit/tensor.hpp"

namespace oracle {

using mmdit::Tensor;

// Central-difference gradient of a scalar function.
inline std::vector<double> numeric_grad(const std::function<double(const Tensor&)>& fn,
                                        const Tensor& x, double eps = 1e-6) {
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::vector<double> plus(x.data().begin(), x.data().end()), minus = plus;
    plus[i] += eps;
    minus[i] -= eps;
    g[i] = (fn(Tensor(x.shape(), plus)) - fn(Tensor(x.shape(), minus))) / (2.0 * eps);
  }
  return g;
}

inline double max_rel_error(std::span<const double> analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i])));
  return worst;
}

// Relative error of the autodiff gradient of fn at x against central differences.
inline double grad_error(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x0,
                         double eps = 1e-6) {
  Tensor x = x0.detach();
  x.set_requires_grad();
  Tensor y = fn(x);
  y.backward();
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  const auto numeric = numeric_grad(
      [&](const Tensor& v) {
        mmdit::NoGradGuard guard;
        return fn(v).item();
      },
      x0, eps);
  return max_rel_error(analytic, numeric);
}

// Row-major [m x k] * [k x n].
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t) c[i * n + j] += a[i * k + t] * b[t * n + j];
  return c;
}

// Multi-head attention for one query row restricted to the listed keys:
// excluded rows are physically absent and the softmax renormalizes over the
// rest. q: [d], k/v: [Tk x d] row-major. Returns the concatenated heads [d].
inline std::vector<double> attend_row(const double* q, const std::vector<double>& k,
                                      const std::vector<double>& v, std::size_t d,
                                      std::size_t n_heads, const std::vector<std::size_t>& keys) {
  const std::size_t dh = d / n_heads;
  std::vector<double> out(d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    std::vector<double> logits;
    for (auto j : keys) {
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += q[h * dh + c] * k[j * d + h * dh + c];
      logits.push_back(s / std::sqrt(static_cast<double>(dh)));
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (std::size_t n = 0; n < keys.size(); ++n)
      for (std::size_t c = 0; c < dh; ++c) out[h * dh + c] += logits[n] / z * v[keys[n] * d + h * dh + c];
  }
  return out;
}

// x [d] * W [d x d] + bias.
inline std::vector<double> project(const std::vector<double>& x, const Tensor& w, const Tensor& bias) {
  const std::size_t d = x.size(), n = w.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < d; ++i) out[j] += x[i] * w[i * n + j];
    if (bias.defined()) out[j] += bias[j];
  }
  return out;
}

inline double max_abs(const std::vector<double>& a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace oracle
