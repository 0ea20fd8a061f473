#pragma once

// Shared prototype memory: soft assignment, consensus, latent imputation of
// missing modalities and per-modality refinement.

#include "prime/tokenizer.hpp"

#include <array>
#include <optional>
#include <vector>

namespace prime {

struct BankConfig {
    std::size_t prototypes = 128; // K_c
    double temperature = 0.07;    // tau
    double init_std = 0.02;
    std::size_t refine_depth = 1;
    std::size_t refine_hidden = 128;
};

/// How missing modalities and dropped tokens are filled. Zeros is the
/// "without prototypes" ablation.
enum class FillMode { Prototype, Zeros };

class PrototypeBank;

/// The bank's parameters registered on one tape.
struct BankView {
    ad::Var flat;   // K_c x (T_q * D)
    ad::Var pooled; // K_c x D, L2-normalized mean-pooled prototypes
    std::size_t tokens = 0;
    std::size_t dim = 0;
    double temperature = 1.0;
};

class PrototypeBank {
public:
    PrototypeBank() = default;
    PrototypeBank(std::size_t tokens, std::size_t dim, const BankConfig& config, Rng& rng);

    BankView bind(ad::Tape& t);

    std::size_t size() const noexcept { return size_; }
    std::size_t tokens() const noexcept { return tokens_; }
    std::size_t dim() const noexcept { return dim_; }
    double temperature() const noexcept { return temperature_; }

    /// Prototype k as a T_q x D tensor.
    Tensor prototype(std::size_t k) const;
    ad::Parameter& parameter() noexcept { return prototypes_; }
    void collect(const std::string& prefix, nn::ParamList& out);

private:
    std::size_t size_ = 0;
    std::size_t tokens_ = 0;
    std::size_t dim_ = 0;
    double temperature_ = 0.07;
    ad::Parameter prototypes_;
};

/// 1 x K_c soft assignment of an observed block. Throws ZeroVector when the
/// pooled feature vanishes.
ad::Var soft_assign(const BankView& bank, ad::Var tokens);

/// Arithmetic mean of assignment rows. Throws NoObservedModality when empty.
ad::Var consensus(std::span<const ad::Var> assignments);

/// sum_k weights[k] * C_k as a T_q x D block, provenance all-Imputed.
TokenBlock impute_missing(const BankView& bank, ad::Var weights, Modality modality);

/// An all-zero T_q x D block flagged Imputed.
TokenBlock zero_block(ad::Tape& t, std::size_t tokens, std::size_t dim, Modality modality);

class Refiner {
public:
    Refiner() = default;
    Refiner(std::size_t dim, std::size_t heads, const BankConfig& config, Rng& rng);

    TokenBlock operator()(ad::Tape& t, const TokenBlock& block);
    void collect(const std::string& prefix, nn::ParamList& out);

private:
    std::vector<nn::EncoderBlock> blocks_;
};

using Refiners = std::array<Refiner, kNumModalities>;
using ObservedBlocks = std::array<std::optional<TokenBlock>, kNumModalities>;

struct CompletedPatient {
    std::array<TokenBlock, kNumModalities> pre_refine; // U
    std::array<TokenBlock, kNumModalities> refined;    // tilde Z
    std::array<std::optional<ad::Var>, kNumModalities> assignment;
    ad::Var consensus;
    Availability observed{};
};

/// Observed modalities pass through, missing ones are imputed from the
/// consensus of the observed assignments, then every block is refined.
CompletedPatient complete_patient(ad::Tape& t, const BankView& bank, Refiners& refiners,
                                  const ObservedBlocks& observed, FillMode fill = FillMode::Prototype);

} // namespace prime
