#pragma once

// Protocol orchestration: pretraining, feature caching, k-fold downstream
// runs under test-time availability conditions, aggregation and reports.

#include "prime/config.hpp"
#include "prime/metrics.hpp"

#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace prime {

struct Condition {
    std::string_view name;
    Availability mask;
};

inline constexpr std::array<Condition, 7> kConditions{{
    {"Full", {true, true, true}},
    {"LI", {false, true, true}},
    {"LR", {true, false, true}},
    {"LT", {true, true, false}},
    {"OI", {true, false, false}},
    {"OR", {false, true, false}},
    {"OT", {false, false, true}},
}};

const Condition& condition(std::string_view name);

using Progress = std::function<void(const std::string&)>;

// ---- pretraining ----

struct PretrainLogRow {
    std::size_t epoch = 0;
    double align = 0.0;
    double fusion = 0.0;
    double router = 0.0;
    double total = 0.0;
    double val_total = 0.0;
    double best_val = 0.0;
};

struct PretrainOutcome {
    PrimeModel model; // best validation epoch
    std::vector<PretrainLogRow> log;
    std::size_t best_epoch = 0;
    std::vector<std::vector<RouterStats>> router; // per epoch, per MoE block
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> val_idx;
};

/// Patients eligible for pretraining: all of them, or only tri-modal ones.
std::vector<std::size_t> pretrain_pool(std::span<const PatientRecord> patients, PretrainCohort cohort);

/// Self-supervised training on an 80/20 split of the pool; never reads labels.
PretrainOutcome run_pretraining(const ExperimentConfig& config, std::span<const PatientRecord> patients,
                                const Progress& progress = {});

// ---- features ----

/// Memoized frozen-model features per (patient, availability subset).
class FeatureCache {
public:
    FeatureCache(PrimeModel& model, std::span<const PatientRecord> patients, Pooling pooling);

    Tensor get(std::size_t patient, const Availability& use);
    /// Computes the listed (patient, subset) pairs, spreading work over threads.
    void warm(const std::vector<std::pair<std::size_t, Availability>>& wanted, std::size_t threads);
    FeatureFn fn();

private:
    static std::size_t code(const Availability& a);

    PrimeModel* model_;
    std::span<const PatientRecord> patients_;
    Pooling pooling_;
    std::vector<std::array<std::optional<Tensor>, 8>> table_;
    std::mutex mutex_;
};

// ---- downstream protocol ----

struct Prediction {
    std::string patient_id;
    std::size_t fold = 0;
    Task task = Task::Survival;
    std::string condition;
    double score = 0.0;
    double time = 0.0;
    bool event = false;
    int label = 0;
};

struct FoldMetric {
    Task task = Task::Survival;
    std::string condition;
    std::size_t fold = 0;
    double metric = 0.0;
    std::size_t n = 0;
    bool valid = true;
};

struct ProtocolOptions {
    AdaptationMode mode = AdaptationMode::LinearProbe;
    bool missing_aware = false;
    double label_fraction = 1.0;
    std::vector<Task> tasks{Task::Survival, Task::Mortality3y, Task::Recurrence3y};
    std::vector<Condition> conditions{kConditions.begin(), kConditions.end()};
};

struct ProtocolResult {
    std::vector<Prediction> predictions;
    std::vector<FoldMetric> metrics;
    std::vector<std::string> subsample_hashes; // one per (task, fold)
    std::uint64_t frozen_hash_before = 0;
    std::uint64_t frozen_hash_after = 0;
};

/// k-fold downstream evaluation starting from init (pretrained or scratch).
/// In LP mode the model is frozen and its parameter hash is checked.
ProtocolResult run_protocol(const ExperimentConfig& config, std::span<const PatientRecord> patients, PrimeModel& init,
                            const ProtocolOptions& options, const Progress& progress = {});

/// Sorted train indices kept at the given label fraction; nested across
/// fractions and identical across methods for the same seed and fold.
std::vector<std::size_t> subsample_train(std::span<const std::size_t> train, double fraction, std::uint64_t seed,
                                         std::size_t fold);

struct SummaryRow {
    Task task = Task::Survival;
    std::string condition;
    double mean = 0.0;
    double std = 0.0;
    std::size_t folds = 0;
};

/// Mean and sample standard deviation over folds per (task, condition).
std::vector<SummaryRow> summarize(const std::vector<FoldMetric>& metrics);
double summary_mean(const std::vector<SummaryRow>& rows, Task task, std::string_view condition);

struct SurvivalAnalysis {
    Stratification split;
    KmCurve high;
    KmCurve low;
    std::optional<LogRankResult> logrank;
    std::optional<CoxResult> cox;
    std::string note;
};

/// Median split of pooled held-out OS predictions for one condition, then
/// KM curves, log-rank test and univariate Cox HR (high vs low).
SurvivalAnalysis analyze_survival(const std::vector<Prediction>& predictions, std::string_view condition = "Full");

// ---- ablations and sweeps ----

struct AblationArm {
    std::string variant;
    bool missing_data = true;
    bool prototypes = true;
    bool align = true;
    bool fusion = true;
};

/// Table rows in display order, with the config edit each one implies.
std::vector<AblationArm> ablation_arms();
ExperimentConfig apply_arm(ExperimentConfig config, const AblationArm& arm);

struct AblationRow {
    AblationArm arm;
    std::vector<SummaryRow> summary; // Full condition, one per task
};

std::vector<AblationRow> run_ablation(const ExperimentConfig& config, std::span<const PatientRecord> patients,
                                      const Progress& progress = {});

// ---- reports ----

std::string predictions_csv(const std::vector<Prediction>& predictions);
std::vector<Prediction> parse_predictions_csv(const std::string& text);
std::string metrics_csv(const std::vector<FoldMetric>& metrics);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::string pretrain_log_csv(const std::vector<PretrainLogRow>& log);
std::string router_csv(const std::vector<std::vector<RouterStats>>& per_epoch);
std::string survival_analysis_csv(const SurvivalAnalysis& analysis);
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_markdown(const std::vector<AblationRow>& rows);

} // namespace prime
