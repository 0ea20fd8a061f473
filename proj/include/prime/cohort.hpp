#pragma once

// Patients, outcome labels, the synthetic cohort generator, embedding files
// and fold assignment.

#include "prime/modality.hpp"
#include "prime/rng.hpp"
#include "prime/tensor.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace prime {

inline constexpr double kThreeYearsMonths = 36.0;

struct PatientRecord {
    std::string id;
    Availability availability{};
    std::array<std::optional<Tensor>, kNumModalities> embeddings;
    double time_months = 0.0;
    bool censored = true;
    std::optional<double> pfi_months;
    bool pfi_censored = true;
    std::size_t site = 0;
    std::vector<double> latent; // synthetic ground truth, empty for loaded data

    /// Death within 36 months; absent when censored before 36 months.
    std::optional<bool> mortality_3y() const;
    /// Progression within 36 months; absent without PFI or when censored before 36 months.
    std::optional<bool> recurrence_3y() const;
};

struct Cohort {
    std::vector<PatientRecord> patients;
    std::array<std::size_t, kNumModalities> dims{}; // D_m
};

struct SyntheticConfig {
    std::uint64_t seed = 7;
    std::size_t n_patients = 600;
    std::size_t latent_dim = 8;
    std::size_t nuisance_dim = 8;
    std::array<std::size_t, kNumModalities> lengths{128, 1, 200};
    std::array<std::size_t, kNumModalities> dims{32, 64, 48};
    std::array<double, kNumModalities> missing_rates{0.3, 0.3, 0.3};
    double hazard_coupling = 1.0;
    double signal_scale = 1.0;
    double nuisance_scale = 1.5;
    double row_noise = 0.3;
    double median_survival_months = 40.0;
    double median_pfi_months = 28.0;
    double median_censor_months = 60.0;
    std::size_t n_sites = 1;
};

/// Throws InvalidConfig on rates outside [0,1) or empty shapes.
void validate(const SyntheticConfig& config);

/// Each patient draws z ~ N(0, I); every observed modality renders z and a
/// modality-private nuisance through a fixed random linear map and tanh, plus
/// per-row noise. Survival is exponential with log-hazard coupling * (w . z).
/// Embedding values are rounded to float precision so files round-trip exactly.
Cohort generate_synthetic_cohort(const SyntheticConfig& config);

// ---- PRIMEMB1 container ----
enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

void write_matrix(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::F32);
/// Throws MissingFile or FormatError (with the failing byte offset).
Tensor read_matrix(const std::filesystem::path& path);

/// Path of a patient's embedding file under data_dir.
std::filesystem::path embedding_path(const std::filesystem::path& data_dir, const std::string& patient_id, Modality m);

/// Writes manifest.csv and per-modality matrices under dir.
void write_cohort(const Cohort& cohort, const std::filesystem::path& dir, DType dtype = DType::F32);

/// Reads a manifest and the embeddings it references. A modality is available
/// when its flag is set and its file exists. Patients are sorted by id.
Cohort load_embeddings(const std::filesystem::path& manifest_path, const std::filesystem::path& data_dir);

struct CohortStats {
    std::size_t n = 0;
    std::size_t os_events = 0;
    std::size_t os_censored = 0;
    std::size_t mortality_pos = 0;
    std::size_t mortality_neg = 0;
    std::size_t recurrence_pos = 0;
    std::size_t recurrence_neg = 0;
    std::array<std::size_t, kNumModalities> modality_counts{};
};

CohortStats cohort_stats(const std::vector<PatientRecord>& patients);
std::string cohort_stats_csv(const CohortStats& stats);

/// Parses an "events / censored" table cell such as "80 / 419".
std::pair<std::size_t, std::size_t> parse_count_pair(const std::string& cell);

struct FoldSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// k folds over n patients: test folds partition the cohort, validation takes
/// round(n/10) of the remainder, the rest trains. Index lists are sorted.
std::vector<FoldSplit> make_folds(std::size_t n, std::size_t k, std::uint64_t seed);

/// Folds drawn within each site and merged, so every site is split k ways.
/// With a single site this is make_folds over the whole cohort.
std::vector<FoldSplit> make_site_folds(std::span<const PatientRecord> patients, std::size_t k, std::uint64_t seed);

} // namespace prime
