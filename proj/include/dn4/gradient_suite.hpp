#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dn4 {

struct OpGradResult {
    std::string op;
    double max_rel_error = 0.0;
};

/// Finite-difference checks in double precision for every differentiable op
/// used by training, each on fresh random inputs away from kinks and ties.
std::vector<OpGradResult> run_gradient_suite(std::uint64_t seed = 1);

}  // namespace dn4
