#include "mmdit/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mmdit {

namespace {

void require_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ContractError("grad_check: eps must lie in [1e-7, 1e-3], got " + std::to_string(eps));
  }
}

double scalar_value(const Tensor& y) {
  if (y.numel() != 1) {
    throw ContractError("grad_check: function must return a scalar, got " + shape_str(y.shape()));
  }
  return y.item();
}

}  // namespace

GradCheckResult grad_check_param(const std::function<Tensor()>& fn, Tensor& param, double eps) {
  require_eps(eps);
  if (!param.requires_grad()) throw ContractError("grad_check: parameter must require grad");
  param.zero_grad();
  Tensor y = fn();
  scalar_value(y);
  y.backward();
  std::vector<double> analytic(param.numel(), 0.0);
  if (param.has_grad()) {
    auto g = param.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
  }
  param.zero_grad();

  GradCheckResult result;
  NoGradGuard no_grad;
  auto values = param.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = scalar_value(fn());
    values[i] = saved - eps;
    const double down = scalar_value(fn());
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double eps) {
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  return grad_check_param([&] { return fn(leaf); }, leaf, eps).max_rel_error;
}

}  // namespace mmdit
