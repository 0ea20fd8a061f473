#pragma once

// The full pretraining network: tokenizers, prototype bank, refiners, backbone
// and projection heads, plus the per-batch pretraining loss.

#include "prime/cohort.hpp"
#include "prime/ssl.hpp"

#include <array>
#include <optional>
#include <vector>

namespace prime {

enum class Pooling { Reliable, All };

struct ModelConfig {
    std::array<std::size_t, kNumModalities> input_dims{32, 64, 48};
    TokenizerConfig tokenizer;
    BankConfig bank;
    FusionConfig fusion;
    SslConfig ssl;
    AugmentConfig augment;
    FillMode fill = FillMode::Prototype;
};

using ViewDraws = std::array<AugmentDraw, 2>;

struct PretrainStep {
    LossComponents loss;
    AlignmentReport alignment;
    std::vector<RouterStats> router;
};

class PrimeModel {
public:
    PrimeModel() = default;
    PrimeModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    std::size_t dim() const noexcept { return config_.tokenizer.dim; }

    /// All parameters in a fixed order with stable names.
    nn::ParamList parameters();

    /// Tokenizes the modalities that are both available and allowed by use,
    /// then imputes and refines. Throws NoObservedModality.
    CompletedPatient complete(ad::Tape& t, const BankView& bank, const PatientRecord& patient,
                              const Availability& use = kAllAvailable);

    /// Unaugmented fused representation pooled to 1 x D.
    ad::Var embed(ad::Tape& t, const BankView& bank, const PatientRecord& patient,
                  const Availability& use = kAllAvailable, Pooling pooling = Pooling::Reliable);

    /// embed() evaluated without gradient tracking.
    Tensor features(const PatientRecord& patient, const Availability& use = kAllAvailable,
                    Pooling pooling = Pooling::Reliable);

    /// Augmentation draws for both views of each patient, seeded per patient,
    /// view and epoch.
    std::vector<ViewDraws> draw_views(ad::Tape& t, const BankView& bank, const std::vector<CompletedPatient>& done,
                                      std::span<const PatientRecord* const> batch, std::uint64_t seed,
                                      std::uint64_t epoch) const;

    /// Full objective on one batch. With frozen draws the sampling is reused
    /// verbatim, which makes the loss a deterministic function of the parameters.
    PretrainStep pretrain_loss(ad::Tape& t, std::span<const PatientRecord* const> batch, std::uint64_t seed,
                               std::uint64_t epoch, const std::vector<ViewDraws>* frozen = nullptr,
                               std::vector<ViewDraws>* drawn = nullptr);

    std::array<ModalityTokenizer, kNumModalities>& tokenizers() noexcept { return tokenizers_; }
    PrototypeBank& bank() noexcept { return bank_; }
    Refiners& refiners() noexcept { return refiners_; }
    Backbone& backbone() noexcept { return backbone_; }
    std::array<ProjectionHead, kNumModalities>& align_heads() noexcept { return align_heads_; }
    ProjectionHead& fusion_head() noexcept { return fusion_head_; }

private:
    ModelConfig config_;
    std::array<ModalityTokenizer, kNumModalities> tokenizers_;
    PrototypeBank bank_;
    Refiners refiners_;
    Backbone backbone_;
    std::array<ProjectionHead, kNumModalities> align_heads_;
    ProjectionHead fusion_head_;
};

/// Stable 64-bit FNV-1a hash, used for per-patient seeds and parameter hashes.
std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& s);

/// Hash of the named parameters' values.
std::uint64_t parameter_hash(const nn::ParamList& params);

} // namespace prime
