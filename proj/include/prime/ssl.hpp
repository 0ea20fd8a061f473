#pragma once

// Self-supervised objectives: masked pairwise alignment, structured-missingness
// augmentation, reliability-weighted pooling, inter-view consistency.

#include "prime/fusion.hpp"
#include "prime/prototype.hpp"

#include <array>
#include <optional>
#include <vector>

namespace prime {

struct AugmentConfig {
    double p_mod = 0.2;
    double p_tok = 0.3;
    std::size_t top_ks = 8;
    double alpha = 50.0;
};

struct SslConfig {
    std::size_t proj_dim = 64; // D_d
    double align_temperature = 0.1;
    double fusion_temperature = 0.1;
    double lambda = 0.5;
    double lambda_router = 0.01;
};

/// Two-layer MLP D -> D -> D_d with L2-normalized output.
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(std::size_t dim, std::size_t out_dim, Rng& rng);

    ad::Var operator()(ad::Tape& t, ad::Var x);
    void collect(const std::string& prefix, nn::ParamList& out);

private:
    nn::FeedForward mlp_;
};

/// Symmetric InfoNCE between matched unit-vector rows of a and b.
/// Throws EmptyBatch on zero rows; a single pair gives exactly 0.
ad::Var info_nce(ad::Var a, ad::Var b, double temperature);

struct AlignmentBatch {
    std::vector<std::array<ad::Var, kNumModalities>> refined;
    std::vector<Availability> availability;
};

inline constexpr std::array<std::pair<Modality, Modality>, 3> kModalityPairs{
    std::pair{Modality::Image, Modality::Rna}, std::pair{Modality::Image, Modality::Text},
    std::pair{Modality::Rna, Modality::Text}};

struct AlignmentReport {
    std::array<std::size_t, 3> pair_sizes{};
    std::array<double, 3> pair_losses{};
    std::size_t pairs_used = 0;
};

/// Mean over modality pairs with at least two co-observed patients of the
/// InfoNCE between projected mean-pooled refined blocks.
ad::Var alignment_loss(ad::Tape& t, std::array<ProjectionHead, kNumModalities>& heads, const AlignmentBatch& batch,
                       double temperature, AlignmentReport* report = nullptr);

/// All randomness of one augmented view, drawn ahead of the differentiable part.
struct AugmentDraw {
    std::array<bool, kNumModalities> keep_modality{};
    std::vector<bool> keep_token; // 3*T_q; true only for retained observed tokens
    std::array<std::optional<Tensor>, kNumModalities> mix; // 1 x K_c Dirichlet weights
};

/// Keeps the top_ks largest entries of q (lower index first on ties) and renormalizes.
std::vector<double> sparsify_top_k(std::span<const double> q, std::size_t top_ks);

/// assignments[m] holds q^(m) for observed modalities and is ignored otherwise.
AugmentDraw draw_augmentation(Rng& rng, const Availability& observed,
                              const std::array<std::vector<double>, kNumModalities>& assignments, std::size_t tokens,
                              const AugmentConfig& policy);

/// Builds the fused view: retained tokens keep their refined value, dropped
/// observed tokens take the Dirichlet prototype mixture (or zero).
FusedSequence apply_augmentation(ad::Tape& t, const BankView& bank, const CompletedPatient& patient,
                                 const AugmentDraw& draw, FillMode fill = FillMode::Prototype);

/// Mean of the reliable tokens. Throws NoReliableToken.
ad::Var masked_pool(ad::Tape& t, const FusedSequence& seq);

/// InfoNCE between g_f-projected pooled views (rows matched by patient).
ad::Var fusion_loss(ad::Tape& t, ProjectionHead& head, std::span<const ad::Var> view1, std::span<const ad::Var> view2,
                    double temperature);

struct LossComponents {
    ad::Var total;
    double align = 0.0;
    double fusion = 0.0;
    double router = 0.0;
};

/// lambda*align + (1-lambda)*fusion + lambda_router*router; zero-weight terms
/// are left out of the graph entirely.
LossComponents total_loss(ad::Tape& t, std::optional<ad::Var> align, std::optional<ad::Var> fusion,
                          std::optional<ad::Var> router, double lambda, double lambda_router);

} // namespace prime
