#pragma once

// Experiment configuration: one JSON document with a section per module.
// Unknown keys are rejected; every output carries the config fingerprint.

#include "prime/cohort.hpp"
#include "prime/downstream.hpp"
#include "prime/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace prime {

enum class PretrainCohort { Union, FullOnly };

struct PretrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double val_fraction = 0.2;
    PretrainCohort cohort = PretrainCohort::Union;
};

struct EvaluationConfig {
    std::size_t folds = 5;
    std::vector<Task> tasks{Task::Survival, Task::Mortality3y, Task::Recurrence3y};
    AdaptationMode mode = AdaptationMode::LinearProbe;
    bool missing_aware = false;
    double label_fraction = 1.0;
};

struct SweepConfig {
    std::vector<double> label_fractions{1.0, 0.9, 0.7, 0.5};
    std::vector<std::size_t> prototypes{32, 64, 128, 256};
    std::vector<double> lambdas{0.0, 0.25, 0.5, 0.75, 1.0};
};

struct PathConfig {
    std::string cohort_dir = "cohort";
    std::string checkpoint = "";
    std::string out_dir = "out";
};

struct ExperimentConfig {
    std::string name = "default";
    std::uint64_t seed = 7;
    std::size_t threads = 1;
    SyntheticConfig data;
    ModelConfig model;
    PretrainConfig pretrain;
    DownstreamConfig downstream;
    EvaluationConfig evaluation;
    SweepConfig sweep;
    PathConfig paths;
};

/// Parses and validates; throws InvalidConfig naming the offending key.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);

/// Reads a JSON file, then applies PRIME_COHORT_DIR, PRIME_CHECKPOINT,
/// PRIME_OUT_DIR and PRIME_THREADS environment overrides.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Throws InvalidConfig on out-of-range values.
void validate(const ExperimentConfig& config);

/// SHA-256 of the canonical JSON of the result-affecting fields (paths and
/// thread count excluded).
std::string fingerprint(const ExperimentConfig& config);

std::string sha256_hex(const std::string& bytes);

} // namespace prime
