#pragma once

// Survival statistics: concordance, AUROC, Kaplan-Meier, log-rank, univariate Cox.

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace prime {

struct SurvivalSample {
    double time = 0.0;
    bool event = false;
    double risk = 0.0;
};

/// Harrell's C. A pair is comparable when the earlier time is an event; equal
/// times count when exactly the event side is compared against a censored
/// one. Risk ties score 0.5. Throws NoComparablePairs.
double c_index(std::span<const SurvivalSample> samples);

/// Mann-Whitney AUROC with midranks. Throws SingleClass.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct KmCurve {
    std::vector<double> times; // distinct event times, ascending
    std::vector<double> survival;
    std::vector<std::size_t> at_risk;
    std::vector<std::size_t> events;

    /// S(t), right-continuous; 1 before the first event.
    double at(double t) const;
};

KmCurve km_curve(std::span<const SurvivalSample> samples);

struct LogRankResult {
    double chi2 = 0.0;
    double p_value = 1.0;
    double observed_a = 0.0;
    double expected_a = 0.0;
    double variance = 0.0;
};

/// Two-group log-rank test. Throws InsufficientGroup when a group is empty.
LogRankResult logrank_test(std::span<const SurvivalSample> group_a, std::span<const SurvivalSample> group_b);

struct CoxResult {
    double beta = 0.0;
    double hazard_ratio = 1.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double std_error = 0.0;
    double score = 0.0; // dl/dbeta at the returned beta
    bool converged = false;
    int iterations = 0;
};

/// Newton-Raphson on the Breslow partial likelihood of one binary covariate.
/// Throws Separation when the likelihood is monotone.
CoxResult cox_univariate(std::span<const SurvivalSample> samples, std::span<const int> group);

struct Stratification {
    double threshold = 0.0;
    std::vector<std::size_t> high;
    std::vector<std::size_t> low;
};

/// Median split; risks equal to the median go to the low-risk group.
Stratification risk_stratify(std::span<const double> risks);

/// Step-function CSV with columns group,time,survival,at_risk,events.
std::string km_csv(const std::vector<std::pair<std::string, KmCurve>>& curves);

/// Standalone SVG of one or more KM curves.
std::string km_svg(const std::vector<std::pair<std::string, KmCurve>>& curves, const std::string& title);

} // namespace prime
