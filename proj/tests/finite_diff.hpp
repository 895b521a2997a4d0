#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>

/// Largest relative gap between autograd and central differences of a scalar `fn` at `x`
/// (double precision; magnitudes below 1e-3 are compared absolutely).
inline double gradient_gap(const std::function<torch::Tensor(const torch::Tensor&)>& fn, torch::Tensor x)
{
   x = x.clone().set_requires_grad(true);
   fn(x).backward();
   const auto analytic = x.grad().clone().flatten();
   const double h = 1e-6;
   auto flat = x.detach().clone().flatten();
   double worst = 0.0;
   for (std::int64_t i = 0; i < flat.numel(); ++i) {
      auto plus = flat.clone();
      auto minus = flat.clone();
      plus[i] += h;
      minus[i] -= h;
      const double numeric =
          (fn(plus.view(x.sizes())).item<double>() - fn(minus.view(x.sizes())).item<double>()) / (2 * h);
      const double a = analytic[i].item<double>();
      worst = std::max(worst, std::abs(a - numeric) / std::max(1e-3, std::max(std::abs(a), std::abs(numeric))));
   }
   return worst;
}
