#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tpseg/autograd.hpp"

namespace tpseg {

/// |analytic - numeric| / max(1, |analytic|, |numeric|)
template <typename S>
S gradient_error(S analytic, S numeric) {
  return std::abs(analytic - numeric) / std::max({S(1), std::abs(analytic), std::abs(numeric)});
}

/// Compares the tape gradient of `fn` at `point` with central differences of
/// step `h` and returns the worst coordinate error. `fn` must be pure.
template <typename S>
S finite_diff_check(const std::function<Var<S>(const Var<S>&)>& fn, const Tensor<S>& point, S h = S(1e-5)) {
  Var<S> x = Var<S>::parameter(point);
  {
    GradTape<S> tape;
    tape.backward(fn(x));
  }
  const Tensor<S> analytic = x.grad();
  NoGradScope no_grad;
  Tensor<S> probe = point;
  S worst = 0;
  for (Index i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + h;
    const S up = fn(Var<S>(probe)).item();
    probe[i] = point[i] - h;
    const S down = fn(Var<S>(probe)).item();
    probe[i] = point[i];
    worst = std::max(worst, gradient_error(analytic[i], (up - down) / (S(2) * h)));
  }
  return worst;
}

/// Same check over every coordinate of a set of leaf parameters, perturbed in
/// place. Returns the worst error per parameter, in order.
template <typename S>
std::vector<S> finite_diff_check_params(const std::function<Var<S>()>& loss_fn, std::vector<Var<S>> params,
                                        S h = S(1e-5)) {
  for (auto& p : params) p.zero_grad();
  {
    GradTape<S> tape;
    tape.backward(loss_fn());
  }
  std::vector<S> worst(params.size(), S(0));
  NoGradScope no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor<S> analytic = params[k].grad();
    Tensor<S>& value = params[k].mutable_value();
    for (Index i = 0; i < value.size(); ++i) {
      const S saved = value[i];
      value[i] = saved + h;
      const S up = loss_fn().item();
      value[i] = saved - h;
      const S down = loss_fn().item();
      value[i] = saved;
      worst[k] = std::max(worst[k], gradient_error(analytic[i], (up - down) / (S(2) * h)));
    }
  }
  return worst;
}

}  // namespace tpseg
