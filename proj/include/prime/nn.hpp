#pragma once

// Small transformer building blocks on top of the tape.

#include "prime/autodiff.hpp"
#include "prime/gradcheck.hpp"
#include "prime/rng.hpp"

#include <span>
#include <string>
#include <vector>

namespace prime::nn {

using ad::Parameter;
using ad::Tape;
using ad::Var;
using ParamList = std::vector<ad::NamedParameter>;

struct Linear {
    Parameter weight; // in x out
    Parameter bias;   // 1 x out

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng);

    Var operator()(Tape& t, Var x);
    void collect(const std::string& prefix, ParamList& out);
};

struct LayerNorm {
    Parameter gamma;
    Parameter beta;
    double eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim);

    Var operator()(Tape& t, Var x);
    void collect(const std::string& prefix, ParamList& out);
};

/// Linear -> GELU -> Linear.
struct FeedForward {
    Linear up;
    Linear down;

    FeedForward() = default;
    FeedForward(std::size_t dim, std::size_t hidden, Rng& rng);
    FeedForward(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

    Var operator()(Tape& t, Var x);
    void collect(const std::string& prefix, ParamList& out);
};

struct MultiHeadAttention {
    Linear query;
    Parameter key; // in x out, no bias: it would shift every logit of a query equally
    Linear value;
    Linear output;
    std::size_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng);

    Var operator()(Tape& t, Var queries, Var context, std::span<const bool> key_mask = {});
    void collect(const std::string& prefix, ParamList& out);
};

/// Pre-norm self-attention + FFN block with residuals.
struct EncoderBlock {
    LayerNorm attn_norm;
    MultiHeadAttention attn;
    LayerNorm ffn_norm;
    FeedForward ffn;

    EncoderBlock() = default;
    EncoderBlock(std::size_t dim, std::size_t heads, std::size_t hidden, Rng& rng);

    Var operator()(Tape& t, Var x);
    void collect(const std::string& prefix, ParamList& out);
};

} // namespace prime::nn
