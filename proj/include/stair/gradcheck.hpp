#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "stair/autodiff.hpp"

namespace stair::ad {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    // Coordinates whose +-h perturbation switched a max/ReLU branch. These
    // sit on a kink where only a subgradient exists.
    std::size_t excluded = 0;
    // Coordinates whose analytic and numeric gradients both fall below what
    // a central difference can resolve (a few ulps of the objective over
    // 2h). An attention key bias is one: softmax ignores a shared shift.
    std::size_t vanishing = 0;
};

/// Builds a scalar on the given tape from one Var per parameter tensor.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares tape gradients of `f` against central differences with step `h`
/// for every coordinate of every parameter. Relative error uses the
/// denominator max(|analytic|, |numeric|, 1e-8). Vanishing coordinates
/// are counted apart and do not enter the error.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params, double h);

} // namespace stair::ad
