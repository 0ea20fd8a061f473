#pragma once

// Finite-difference checks of every differentiable module and of the composed
// pretraining objective, at small shapes with all sampling frozen.

#include "prime/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace prime {

struct ModuleCheck {
    std::string module;
    ad::GradCheckReport report;
};

struct GradCheckSuiteOptions {
    std::uint64_t seed = 7;
    double eps = 1e-5;
    std::size_t max_entries_per_parameter = 24;
    bool inject_nan = false; // poisons one bank entry; the suite must throw NonFiniteLoss
};

std::vector<ModuleCheck> gradcheck_suite(const GradCheckSuiteOptions& options = {});

/// One line per module: name, entries checked, worst relative error, worst parameter.
std::string gradcheck_report_csv(const std::vector<ModuleCheck>& checks);

} // namespace prime
