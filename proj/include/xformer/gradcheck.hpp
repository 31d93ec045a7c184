#pragma once

// Central finite-difference verification of the backward pass.

#include "xformer/tensor.hpp"

#include <cmath>

namespace xf {

// Compares the tape gradient of a scalar loss against central differences,
// coordinate by coordinate over x, and returns the worst relative error:
//   max_i |analytic_i - central_i| / max(|analytic_i|, |central_i|, 1e-5)
//
// The denominator floor matters: central differences carry ~1e-10 of
// roundoff for order-one losses, so on a coordinate whose true gradient is
// ~1e-9 the raw ratio would report noise as a defect. Flooring at 1e-5
// treats such vanishing coordinates on an absolute scale (errors below
// 1e-5 * tol are invisible there) while every coordinate of trainable
// magnitude is still checked at full relative precision.
//
// `loss_fn` must be a pure function of the current contents of x (and any
// other captured state it restores itself); it is re-evaluated 2*numel(x)
// times with x perturbed in place. Meant for 64-bit scalars, where h = 1e-5
// leaves ~1e-10 of truncation error.
template <typename Scalar, typename F>
Scalar finite_diff_check(F&& loss_fn, Tensor<Scalar>& x,
                         Scalar h = Scalar(1e-5)) {
  const bool was_leaf = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<Scalar> analytic;
  {
    GradTape<Scalar> tape;
    Tensor<Scalar> loss = loss_fn();
    tape.backward(loss);
    check(x.has_grad(), "finite_diff_check: loss does not depend on x");
    analytic = x.grad_buf();
  }
  x.zero_grad();
  x.set_requires_grad(was_leaf);

  Scalar worst = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const Scalar saved = x[i];
    x[i] = saved + h;
    const Scalar up = loss_fn().item();
    x[i] = saved - h;
    const Scalar down = loss_fn().item();
    x[i] = saved;
    const Scalar central = (up - down) / (2 * h);
    const Scalar a = analytic[static_cast<std::size_t>(i)];
    const Scalar denom =
        std::max({std::abs(a), std::abs(central), Scalar(1e-5)});
    worst = std::max(worst, std::abs(a - central) / denom);
  }
  return worst;
}

}  // namespace xf
