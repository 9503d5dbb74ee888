#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tmvod/autograd.hpp"

namespace tmvod::testing {

struct GradCheckResult {
  bool ok = true;
  double max_abs_error = 0;
  std::size_t checked = 0;
  std::string worst;  // description of the worst entry

  explicit operator bool() const { return ok; }
};

// Central differences against reverse mode for every entry of every input
// (or a strided subset when `max_entries` is smaller than an input).
// Pass criterion per entry: |analytic - numeric| <= atol + rtol * |numeric|.
inline GradCheckResult gradcheck(const std::function<ag::Var<double>()>& f,
                                 const std::vector<ag::Var<double>>& inputs, double eps = 1e-6,
                                 double rtol = 1e-4, double atol = 1e-6, std::size_t max_entries = 0) {
  for (const auto& in : inputs) {
    in->requires_grad = true;
    in->grad = Tensor<double>();
  }
  ag::Var<double> out = f();
  ag::backward(out);
  std::vector<Tensor<double>> analytic;
  for (const auto& in : inputs) analytic.push_back(in->has_grad() ? in->grad : Tensor<double>(in->value.shape()));

  GradCheckResult r;
  double worst_excess = -1;
  ag::NoGradGuard ng;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double>& x = inputs[k]->value;
    const std::size_t n = x.size();
    const std::size_t step = max_entries && n > max_entries ? (n + max_entries - 1) / max_entries : 1;
    for (std::size_t i = 0; i < n; i += step) {
      const double keep = x[i];
      x[i] = keep + eps;
      const double plus = f()->value.sum();
      x[i] = keep - eps;
      const double minus = f()->value.sum();
      x[i] = keep;
      const double numeric = (plus - minus) / (2 * eps);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric);
      const double excess = err - (atol + rtol * std::abs(numeric));
      ++r.checked;
      r.max_abs_error = std::max(r.max_abs_error, err);
      if (excess > worst_excess) {
        worst_excess = excess;
        std::ostringstream os;
        os << "input " << k << " entry " << i << ": analytic " << a << " numeric " << numeric;
        r.worst = os.str();
      }
      if (excess > 0) r.ok = false;
    }
  }
  return r;
}

}  // namespace tmvod::testing
