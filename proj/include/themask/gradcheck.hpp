#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "themask/tensor.hpp"

namespace themask {

/// Whole-loss and whole-model checks use the extrapolated five-point stencil
/// at this step. Those maps return values of order 10 and have coordinates
/// with gradients near 1e-8, so small steps drown in roundoff and the step
/// has to stay large enough that only a high-order rule keeps truncation down.
inline constexpr double kCompositeStep = 5e-3;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar map against central
/// differences at the listed flat coordinates (all when empty). Relative
/// error is |analytic - numeric| / max(|analytic|, floor). `order` 4 selects
/// the five-point stencil, 6 its Richardson extrapolation over steps h and
/// 2h, anything else the three-point one.
inline GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                         const Tensor& x, double h,
                                         const std::vector<std::size_t>& coords,
                                         double floor = 1e-8, int order = 2) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  const std::vector<double> x0(x.data().begin(), x.data().end());

  Tensor leaf = Tensor::from_data(x.shape(), x0, true);
  Tensor y = f(leaf);
  if (y.numel() != 1) throw ContractError("finite_diff_check: map must return a scalar");
  if (!std::isfinite(y.item())) throw NumericError("finite_diff_check: non-finite output");
  backward(y);
  const std::vector<double> analytic = leaf.grad();

  auto eval = [&](std::size_t i, double delta) {
    std::vector<double> shifted = x0;
    shifted[i] += delta;
    const double v = f(Tensor::from_data(x.shape(), std::move(shifted))).item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite output");
    return v;
  };

  std::vector<std::size_t> idx = coords;
  if (idx.empty()) {
    idx.resize(x0.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  GradCheckResult result;
  bool first = true;
  for (std::size_t i : idx) {
    if (i >= x0.size()) throw ContractError("finite_diff_check: coordinate out of range");
    auto five_point = [&](double s, double d1, double d2) {
      return (8.0 * d1 - d2) / (12.0 * s);
    };
    double numeric = 0.0;
    if (order == 6) {
      const double d1 = eval(i, h) - eval(i, -h), d2 = eval(i, 2.0 * h) - eval(i, -2.0 * h),
                   d4 = eval(i, 4.0 * h) - eval(i, -4.0 * h);
      numeric = (16.0 * five_point(h, d1, d2) - five_point(2.0 * h, d2, d4)) / 15.0;
    } else if (order == 4) {
      numeric = five_point(h, eval(i, h) - eval(i, -h), eval(i, 2.0 * h) - eval(i, -2.0 * h));
    } else {
      numeric = (eval(i, h) - eval(i, -h)) / (2.0 * h);
    }
    const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), floor);
    if (first || err > result.max_rel_error) {
      result = {err, i, analytic[i], numeric};
      first = false;
    }
  }
  return result;
}

inline GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                         const Tensor& x, double h = 1e-5,
                                         double floor = 1e-8) {
  return finite_diff_check(f, x, h, {}, floor);
}

/// Order-6 check at kCompositeStep.
inline GradCheckResult composite_check(const std::function<Tensor(const Tensor&)>& f,
                                       const Tensor& x,
                                       const std::vector<std::size_t>& coords = {},
                                       double floor = 1e-8) {
  return finite_diff_check(f, x, kCompositeStep, coords, floor, 6);
}

}  // namespace themask
