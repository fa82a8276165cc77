#include "stair/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "stair/errors.hpp"

namespace stair::ad {

namespace {

struct Probe {
    double value;
    std::uint64_t signature;
};

Probe evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
    Tape tape;
    tape.track_branches(true);
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.constant(p));
    const Var out = f(tape, vars);
    const double v = out.value()[0];
    if (!std::isfinite(v)) throw_numeric("grad_check: objective is not finite");
    return {v, tape.branch_signature()};
}

} // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params, double h) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw_invalid("grad_check: step must lie in [1e-7, 1e-3]");

    Tape tape;
    tape.track_branches(true);
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.variable(p));
    const Var out = f(tape, vars);
    if (out.value().size() != 1) throw_invalid("grad_check: objective must be scalar");
    if (!std::isfinite(out.value()[0])) throw_numeric("grad_check: objective is not finite");
    const std::uint64_t base_signature = tape.branch_signature();
    const double resolution =
        8.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(out.value()[0]), 1.0) / (2.0 * h);
    tape.backward(out);

    GradCheckReport report;
    std::vector<Tensor> work = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor analytic = tape.grad(vars[p]);
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double x0 = params[p][i];
            work[p][i] = x0 + h;
            const Probe plus = evaluate(f, work);
            work[p][i] = x0 - h;
            const Probe minus = evaluate(f, work);
            work[p][i] = x0;
            if (plus.signature != base_signature || minus.signature != base_signature) {
                ++report.excluded;
                continue;
            }
            const double numeric = (plus.value - minus.value) / (2.0 * h);
            const double a = analytic[i];
            if ((a != 0.0 || numeric != 0.0) && std::abs(a) < resolution && std::abs(numeric) < resolution) {
                ++report.vanishing;
                continue;
            }
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
            ++report.checked;
        }
    }
    return report;
}

} // namespace stair::ad
