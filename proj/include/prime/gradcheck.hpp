#pragma once

#include "prime/autodiff.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace prime::ad {

using NamedParameter = std::pair<std::string, Parameter*>;
/// Builds a scalar loss on the given tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

struct ParameterCheck {
    std::string name;
    std::size_t checked = 0;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_parameter;
    std::vector<ParameterCheck> per_parameter;
};

struct GradCheckOptions {
    double eps = 1e-5;
    /// 0 checks every entry; otherwise an evenly strided subset of this size.
    std::size_t max_entries_per_parameter = 0;
};

/// Compares reverse-mode gradients against central differences,
/// rel err = |analytic - numeric| / (|numeric| + 1e-8), maximised over entries.
/// Throws NonFiniteLoss if the loss is not finite at the current parameters.
GradCheckReport grad_check(const LossBuilder& loss, const std::vector<NamedParameter>& params,
                           const GradCheckOptions& options = {});

} // namespace prime::ad
