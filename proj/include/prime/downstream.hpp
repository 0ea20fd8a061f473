#pragma once

// Task heads (discrete-time survival, 3-year binary outcomes) and their
// training by linear probing on frozen features or full fine-tuning.

#include "prime/model.hpp"
#include "prime/optim.hpp"

#include <functional>
#include <optional>
#include <string_view>
#include <vector>

namespace prime {

enum class Task { Survival, Mortality3y, Recurrence3y };
inline constexpr std::array<Task, 3> kTasks{Task::Survival, Task::Mortality3y, Task::Recurrence3y};
std::string_view task_name(Task task) noexcept;
Task parse_task(std::string_view name);

enum class AdaptationMode { FullFineTune, LinearProbe };
std::string_view mode_name(AdaptationMode mode) noexcept;
AdaptationMode parse_mode(std::string_view name);

struct TaskLabel {
    double time = 0.0;
    bool event = false;
    int binary = 0;
};

/// Absent when the patient is excluded from the task.
std::optional<TaskLabel> task_label(const PatientRecord& patient, Task task);

struct TimeBins {
    std::vector<double> edges; // K_time - 1 interior edges, strictly increasing
    std::vector<std::size_t> index;

    std::size_t bins() const noexcept { return edges.size() + 1; }
    /// Bin of time t; a time equal to an edge falls in the lower bin.
    std::size_t bin_of(double t) const;
};

/// Edges at type-7 quantiles of the event times. Throws DegenerateBins when
/// fewer than k distinct event times exist or edges collide.
TimeBins discretize_time(std::span<const double> times, std::span<const bool> events, std::size_t k);

/// Mean censoring-aware discrete-time NLL of n x K hazard logits.
ad::Var survival_nll(ad::Var logits, std::span<const std::size_t> bin, std::span<const bool> censored);

/// -sum_j S_j for one row of hazard logits; higher is riskier.
double risk_score(std::span<const double> logits);

struct DownstreamConfig {
    std::size_t k_time = 8;
    double lr_ft = 5e-4;
    double lr_lp = 1e-4;
    double weight_decay = 0.01;
    std::size_t batch_size = 16;
    std::size_t epochs = 50;
    std::size_t patience = 0; // 0 runs every epoch
    double grad_clip = 0.0;
    Pooling pooling = Pooling::Reliable;
    double missing_p_mod = 0.2; // modality dropout of the missing-aware variant
};

/// Linear head: K_time hazard logits for survival, one logit for binary tasks.
struct HeadState {
    Task task = Task::Survival;
    TimeBins bins;
    nn::Linear linear;

    Tensor scores(const Tensor& features) const; // n x 1 risk or logit
};

struct DownstreamResult {
    HeadState head;
    std::optional<PrimeModel> model; // fine-tuned copy in FT mode
    double best_val_metric = 0.0;
    std::size_t best_epoch = 0;
    std::vector<double> val_history;
};

/// Feature lookup for patient i under an availability subset.
using FeatureFn = std::function<Tensor(std::size_t patient, const Availability& use)>;

struct TrainRequest {
    Task task = Task::Survival;
    std::span<const PatientRecord> patients;
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::uint64_t seed = 0;
    bool missing_aware = false; // modality dropout during training
};

/// Filters indices to those labeled for the task.
std::vector<std::size_t> labeled(std::span<const PatientRecord> patients, std::span<const std::size_t> idx, Task task);

/// Random availability subset for the missing-aware variant (at least one modality kept).
Availability dropout_availability(const Availability& available, double p_mod, std::uint64_t seed,
                                  std::size_t patient, std::size_t epoch);

/// Head trained on frozen features; best validation epoch kept.
DownstreamResult train_linear_probe(const TrainRequest& req, const FeatureFn& features, std::size_t dim,
                                    const DownstreamConfig& config);

/// Head and every model parameter trained jointly; best validation epoch kept.
DownstreamResult train_finetune(const TrainRequest& req, const PrimeModel& init, const DownstreamConfig& config);

/// Validation metric: C-index for survival, AUROC for binary tasks.
double task_metric(Task task, std::span<const PatientRecord> patients, std::span<const std::size_t> idx,
                   std::span<const double> scores);

/// Scores for the given patients with availability restricted by override.
/// Patients left without any modality are skipped; their positions are
/// reported through kept.
std::vector<double> predict(const HeadState& head, const FeatureFn& features, std::span<const PatientRecord> patients,
                            std::span<const std::size_t> idx, const Availability& override_mask,
                            std::vector<std::size_t>* kept = nullptr);

} // namespace prime
