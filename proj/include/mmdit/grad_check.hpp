#pragma once

#include <functional>

#include "mmdit/tensor.hpp"

namespace mmdit {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

// Compares the reverse-mode gradient of a scalar function against central
// differences. The error per coordinate is |analytic - numeric| /
// max(1, |analytic|); the maximum over coordinates is returned.
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                  double eps = 1e-6);

// Same, differentiating with respect to a leaf that `fn` reads internally
// (e.g. a model parameter). `param` must require grad; its values are
// perturbed in place and restored.
GradCheckResult grad_check_param(const std::function<Tensor()>& fn, Tensor& param,
                                 double eps = 1e-6);

}  // namespace mmdit
