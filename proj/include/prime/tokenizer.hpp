#pragma once

// Query-based cross-attention tokenizers: variable-length frozen embeddings
// (L_m x D_m) become fixed-shape token blocks (T_q x D).

#include "prime/modality.hpp"
#include "prime/nn.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace prime {

struct TokenizerConfig {
    std::size_t tokens = 8;   // T_q
    std::size_t dim = 64;     // D
    std::size_t heads = 4;
    std::size_t ffn_hidden = 128;
    double query_init_std = 0.02;
};

enum class Provenance : std::uint8_t { Observed, Imputed };

/// A (T_q x D) token sequence of one modality of one patient, bound to a tape.
struct TokenBlock {
    ad::Var tokens;
    Modality modality = Modality::Image;
    std::vector<Provenance> provenance;

    bool fully_observed() const;
};

/// Rows that are not entirely zero; all-zero rows are padding.
std::vector<bool> valid_rows(const Tensor& embeddings);

class ModalityTokenizer {
public:
    ModalityTokenizer() = default;
    ModalityTokenizer(Modality modality, std::size_t input_dim, const TokenizerConfig& config, Rng& rng);

    /// An empty pad_mask derives padding from all-zero rows.
    /// Throws DimMismatch on a wrong feature width and AllKeysMasked when every row is padding.
    TokenBlock tokenize(ad::Tape& t, const Tensor& embeddings, std::span<const bool> pad_mask = {});

    /// Output of the cross-attention sublayer alone (before residual and FFN).
    ad::Var attention_only(ad::Tape& t, const Tensor& embeddings, std::span<const bool> pad_mask = {});

    Modality modality() const noexcept { return modality_; }
    std::size_t input_dim() const noexcept { return input_dim_; }
    void collect(const std::string& prefix, nn::ParamList& out);

private:
    ad::Var context(ad::Tape& t, const Tensor& embeddings);
    std::vector<bool> resolve_mask(const Tensor& embeddings, std::span<const bool> pad_mask) const;

    Modality modality_ = Modality::Image;
    std::size_t input_dim_ = 0;
    ad::Parameter queries_;
    nn::Linear input_proj_;
    nn::LayerNorm query_norm_;
    nn::LayerNorm context_norm_;
    nn::MultiHeadAttention attn_;
    nn::LayerNorm ffn_norm_;
    nn::FeedForward ffn_;
};

} // namespace prime
