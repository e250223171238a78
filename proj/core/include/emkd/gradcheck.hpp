#pragma once

#include <functional>
#include <span>
#include <vector>

#include "emkd/tensor.hpp"

namespace emkd {

/// One scalar coordinate of a leaf tensor.
struct Probe {
  Tensor tensor;
  std::size_t index;
};

/// Compares autodiff gradients of a scalar function with central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h. Returns the largest relative error,
/// using max(|analytic|, |numeric|, 1e-8) as the denominator.
///
/// `loss` rebuilds the expression from its leaves on every call; the probed
/// tensors must be leaves with requires_grad set.
double finite_diff_check(const std::function<Tensor()>& loss, std::span<const Probe> probes,
                         double h = 1e-5);

/// Single-input form: probes every coordinate of `x`.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

}  // namespace emkd
