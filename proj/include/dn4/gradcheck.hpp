#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dn4/autograd.hpp"

namespace dn4 {

/// Scalar-valued program over leaf variables, evaluated in double precision.
using GradProgram = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences for every
/// entry of every input. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check_detailed(const GradProgram& f, const std::vector<TensorD>& inputs,
                                    double step = 1e-5);

inline double grad_check(const GradProgram& f, const std::vector<TensorD>& inputs, double step = 1e-5) {
    return grad_check_detailed(f, inputs, step).max_rel_error;
}

}  // namespace dn4
