#pragma once

// Fused I,R,T token sequence and the shared backbone of alternating vanilla
// transformer blocks and sparse mixture-of-experts blocks.

#include "prime/tokenizer.hpp"

#include <array>
#include <vector>

namespace prime {

struct FusionConfig {
    std::size_t depth = 2; // vanilla + MoE pairs, must be even
    std::size_t experts = 4;
    std::size_t top_k = 2;
    std::size_t heads = 4;
    std::size_t ffn_hidden = 128;
    bool segment_embedding = true;
};

struct FusedSequence {
    ad::Var tokens; // 3*T_q x D
    std::vector<Modality> modality_of_token;
    std::vector<bool> reliability;

    std::size_t length() const noexcept { return modality_of_token.size(); }
};

/// Concatenates blocks in I, R, T order. Reliability is Observed AND keep; an
/// empty keep mask keeps every token.
FusedSequence fuse_concat(const std::array<TokenBlock, kNumModalities>& blocks, const std::vector<bool>& keep = {});

/// Recovers the block of one modality from a fused sequence.
ad::Var modality_slice(const FusedSequence& seq, Modality m);

/// Routing record of one MoE block over a batch: hard top-1 counts and the
/// differentiable gate probabilities of every token seen.
struct RouterRecord {
    std::vector<double> top1_counts;
    std::vector<ad::Var> probs; // n_tokens x E per forward call
};

/// Numeric summary of one record: f_e and p_e.
struct RouterStats {
    std::vector<double> fraction;
    std::vector<double> mean_prob;
};

RouterStats summarize(const RouterRecord& record);

/// E * sum_e f_e p_e on plain numbers.
double router_loss(std::span<const double> fraction, std::span<const double> mean_prob);

/// Differentiable balance loss averaged over MoE blocks; gradient flows through p.
ad::Var router_loss(ad::Tape& t, const std::vector<RouterRecord>& records);

/// Indices of the k largest entries of a row, lower index first on ties.
std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k);

class MoeLayer {
public:
    MoeLayer() = default;
    MoeLayer(std::size_t dim, std::size_t hidden, std::size_t experts, std::size_t top_k, Rng& rng);

    /// Residual-free mixture output for tokens x (already normalized by the caller).
    ad::Var operator()(ad::Tape& t, ad::Var x, std::span<const Modality> labels, RouterRecord* record);

    std::size_t experts() const noexcept { return experts_.size(); }
    ad::Parameter& gate_weight() noexcept { return gate_; }
    ad::Parameter& modality_embedding() noexcept { return modality_embed_; }
    std::vector<nn::FeedForward>& expert_ffns() noexcept { return experts_; }
    void collect(const std::string& prefix, nn::ParamList& out);

private:
    ad::Parameter gate_;           // D x E
    ad::Parameter modality_embed_; // 3 x D
    std::vector<nn::FeedForward> experts_;
    std::size_t top_k_ = 1;
};

/// Pre-norm self-attention followed by a pre-norm MoE sublayer.
struct MoeBlock {
    nn::LayerNorm attn_norm;
    nn::MultiHeadAttention attn;
    nn::LayerNorm moe_norm;
    MoeLayer moe;

    MoeBlock() = default;
    MoeBlock(const FusionConfig& config, std::size_t dim, Rng& rng);

    ad::Var operator()(ad::Tape& t, ad::Var x, std::span<const Modality> labels, RouterRecord* record);
    void collect(const std::string& prefix, nn::ParamList& out);
};

class Backbone {
public:
    Backbone() = default;
    Backbone(const FusionConfig& config, std::size_t dim, Rng& rng);

    /// Contextualized tokens O with the same labels and reliability. When
    /// records is non-null it must hold one entry per MoE block.
    FusedSequence operator()(ad::Tape& t, const FusedSequence& seq, std::vector<RouterRecord>* records = nullptr);

    std::vector<RouterRecord> make_records() const;
    std::size_t moe_blocks() const noexcept { return moe_.size(); }
    void collect(const std::string& prefix, nn::ParamList& out);

private:
    std::size_t depth_ = 0;
    bool segment_ = false;
    ad::Parameter segment_embed_; // 3 x D
    std::vector<nn::EncoderBlock> vanilla_;
    std::vector<MoeBlock> moe_;
    nn::LayerNorm final_norm_;
};

} // namespace prime
