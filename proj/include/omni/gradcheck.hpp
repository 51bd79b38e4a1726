// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "omni/rng.hpp"
#include "omni/tensor.hpp"

namespace omni {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Max over all input coordinates of |analytic - numeric| / max(1, |numeric|),
/// numeric taken by central differences with step h. f must return one element.
double grad_check(const TensorFn& f, const std::vector<Tensor>& inputs, double h = 1e-5);

/// Same measure for tensors captured inside f (e.g. model parameters), which
/// are perturbed in place and restored. Each must require a gradient.
double grad_check_inplace(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h = 1e-5);

/// One scalar probe per differentiable primitive, with inputs drawn from an Rng.
struct GradCase {
    std::string name;
    std::function<std::vector<Tensor>(Rng&)> make;
    TensorFn f;
};
std::vector<GradCase> primitive_grad_cases();

}  // namespace omni
