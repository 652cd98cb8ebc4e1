#pragma once

// Central finite-difference oracle for the autograd engine. Runs in double.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vpcsv/rng.hpp"
#include "vpcsv/tensor.hpp"

namespace vpcsv::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index checked = 0;
};

/// Compares backward() against (f(x+h) - f(x-h)) / 2h for every element of
/// every tensor in `inputs`. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult gradcheck(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> inputs,
                                 double h = 1e-5, double floor = 1e-4, Index max_per_tensor = 400) {
  for (auto& t : inputs) t.zero_grad();
  Tensor<double> loss = loss_fn();
  backward(loss);
  std::vector<VectorX<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    const Index n = t.numel();
    const Index step = std::max<Index>(1, n / max_per_tensor);
    for (Index i = 0; i < n; i += step) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double up = loss_fn().item();
      t.data()[i] = orig - h;
      const double down = loss_fn().item();
      t.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      ++result.checked;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return result;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  VectorX<double> data(shape_numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = rng.uniform(lo, hi);
  return Tensor<double>::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace vpcsv::testing
