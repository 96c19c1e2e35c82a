#include "dn4/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dn4 {
namespace {

double evaluate(const GradProgram& f, const std::vector<TensorD>& inputs) {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(Var<double>::constant(t));
    return f(tape, vars).value().item();
}

}  // namespace

GradCheckResult grad_check_detailed(const GradProgram& f, const std::vector<TensorD>& inputs, double step) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(Var<double>::leaf(t, true));
    auto loss = f(tape, leaves);
    tape.backward(loss);

    GradCheckResult result;
    std::vector<TensorD> probe = inputs;
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        const TensorD analytic = leaves[a].has_grad() ? leaves[a].grad() : TensorD(inputs[a].shape());
        for (std::size_t i = 0; i < inputs[a].size(); ++i) {
            const double orig = probe[a][i];
            probe[a][i] = orig + step;
            const double up = evaluate(f, probe);
            probe[a][i] = orig - step;
            const double down = evaluate(f, probe);
            probe[a][i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double an = analytic[i];
            const double denom = std::max({std::abs(an), std::abs(numeric), 1e-8});
            const double rel = std::abs(an - numeric) / denom;
            if (rel > result.max_rel_error || !std::isfinite(rel)) {
                result = {std::isfinite(rel) ? rel : INFINITY, a, i, an, numeric};
            }
        }
    }
    return result;
}

}  // namespace dn4
