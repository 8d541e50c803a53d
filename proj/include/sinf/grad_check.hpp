#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>

#include "sinf/tensor.hpp"

namespace sinet::nn {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares `analytic` against central differences of `loss` taken by
/// perturbing `value` in place, one coordinate at a time. The step actually
/// applied (after rounding to T) is used as the denominator. Relative error
/// per coordinate is |a - n| / max(|a|, |n|, 1e-8).
template <typename T>
GradCheckResult grad_check(const std::function<double()>& loss, BasicTensor<T>& value,
                           const BasicTensor<T>& analytic, double eps) {
  GradCheckResult r;
  for (std::size_t i = 0; i < value.size(); ++i) {
    const T original = value[i];
    value[i] = static_cast<T>(original + eps);
    const double up_x = value[i];
    const double up = loss();
    value[i] = static_cast<T>(original - eps);
    const double down_x = value[i];
    const double down = loss();
    value[i] = original;
    const double numeric = (up - down) / (up_x - down_x);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > r.max_relative_error || r.checked == 0) {
      r.max_relative_error = rel;
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
    ++r.checked;
  }
  return r;
}

/// Checks a parameter against the gradient already accumulated in `param.grad`.
template <typename T>
GradCheckResult grad_check(const std::function<double()>& loss, BasicParam<T>& param, double eps) {
  const BasicTensor<T> analytic = param.grad;
  return grad_check(loss, param.value, analytic, eps);
}

}  // namespace sinet::nn
