// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "termprob/tensor.hpp"

namespace termprob {

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::size_t checked = 0;
};

struct NamedParam {
  std::string name;
  BasicTensor2<double>* value;
  const BasicTensor2<double>* analytic_grad;
};

// Relative error with a floor on the denominator so entries whose true
// gradient is ~0 are judged on absolute error instead.
inline double relative_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central-difference check of `loss` against precomputed analytic gradients.
// `loss` must be a pure function of the parameter values it closes over.
inline GradCheckResult finite_diff_check(const std::function<double()>& loss,
                                         const std::vector<NamedParam>& params, double eps) {
  if (!(eps >= 1e-5 && eps <= 1e-3)) {
    throw std::invalid_argument("finite_diff_check: eps must lie in [1e-5, 1e-3]");
  }
  GradCheckResult result;
  for (const auto& p : params) {
    auto& values = p.value->data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss();
      values[i] = saved - eps;
      const double down = loss();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_check: non-finite loss while perturbing " + p.name);
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.analytic_grad->data()[i];
      const double err = relative_error(analytic, numeric);
      if (result.checked++ == 0 || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = {p.name, i, analytic, numeric, err};
      }
    }
  }
  return result;
}

}  // namespace termprob
