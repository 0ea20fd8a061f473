#include "prime/gradcheck.hpp"

#include "prime/error.hpp"

#include <cmath>

namespace prime::ad {

namespace {

double evaluate(const LossBuilder& loss) {
    Tape tape(false);
    try {
        const double v = loss(tape).item();
        if (!std::isfinite(v)) throw NonFiniteLoss("loss evaluated to " + std::to_string(v));
        return v;
    } catch (const NonFiniteError& e) {
        throw NonFiniteLoss(e.what());
    }
}

} // namespace

GradCheckReport grad_check(const LossBuilder& loss, const std::vector<NamedParameter>& params,
                           const GradCheckOptions& options) {
    for (const auto& [name, p] : params) p->zero_grad();
    {
        Tape tape(true);
        Var out;
        try {
            out = loss(tape);
        } catch (const NonFiniteError& e) {
            throw NonFiniteLoss(e.what());
        }
        if (!std::isfinite(out.item())) throw NonFiniteLoss("loss is not finite");
        tape.backward(out);
    }

    GradCheckReport report;
    for (const auto& [name, p] : params) {
        ParameterCheck check;
        check.name = name;
        const std::size_t n = p->value.numel();
        const std::size_t budget = options.max_entries_per_parameter;
        const std::size_t stride = (budget == 0 || n <= budget) ? 1 : (n + budget - 1) / budget;
        for (std::size_t i = 0; i < n; i += stride) {
            const double saved = p->value[i];
            p->value[i] = saved + options.eps;
            const double up = evaluate(loss);
            p->value[i] = saved - options.eps;
            const double down = evaluate(loss);
            p->value[i] = saved;
            const double numeric = (up - down) / (2.0 * options.eps);
            const double analytic = p->grad[i];
            const double rel = std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
            ++check.checked;
            if (rel >= check.max_rel_err) {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        if (check.max_rel_err >= report.max_rel_err) {
            report.max_rel_err = check.max_rel_err;
            report.worst_parameter = name;
        }
        report.per_parameter.push_back(std::move(check));
    }
    return report;
}

} // namespace prime::ad
