#include "prime/nn.hpp"

#include <cmath>

namespace prime::nn {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(normal_tensor(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)))),
      bias(Tensor::matrix(1, out)) {}

Var Linear::operator()(Tape& t, Var x) { return ad::add_row(ad::matmul(x, t.param(weight)), t.param(bias)); }

void Linear::collect(const std::string& prefix, ParamList& out) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
}

LayerNorm::LayerNorm(std::size_t dim) : gamma(Tensor::matrix(1, dim, 1.0)), beta(Tensor::matrix(1, dim)) {}

Var LayerNorm::operator()(Tape& t, Var x) { return ad::layer_norm_rows(x, t.param(gamma), t.param(beta), eps); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
}

FeedForward::FeedForward(std::size_t dim, std::size_t hidden, Rng& rng) : FeedForward(dim, hidden, dim, rng) {}

FeedForward::FeedForward(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
    : up(in, hidden, rng), down(hidden, out, rng) {}

Var FeedForward::operator()(Tape& t, Var x) { return down(t, ad::gelu(up(t, x))); }

void FeedForward::collect(const std::string& prefix, ParamList& out) {
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t heads_, Rng& rng)
    : query(dim, dim, rng), key(Linear(dim, dim, rng).weight), value(dim, dim, rng), output(dim, dim, rng),
      heads(heads_) {}

Var MultiHeadAttention::operator()(Tape& t, Var queries, Var context, std::span<const bool> key_mask) {
    Var q = query(t, queries);
    Var k = ad::matmul(context, t.param(key));
    Var v = value(t, context);
    return output(t, ad::cross_attention(q, k, v, heads, key_mask));
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) {
    query.collect(prefix + ".q", out);
    out.emplace_back(prefix + ".k.weight", &key);
    value.collect(prefix + ".v", out);
    output.collect(prefix + ".o", out);
}

EncoderBlock::EncoderBlock(std::size_t dim, std::size_t heads, std::size_t hidden, Rng& rng)
    : attn_norm(dim), attn(dim, heads, rng), ffn_norm(dim), ffn(dim, hidden, rng) {}

Var EncoderBlock::operator()(Tape& t, Var x) {
    Var h = attn_norm(t, x);
    x = ad::add(x, attn(t, h, h));
    return ad::add(x, ffn(t, ffn_norm(t, x)));
}

void EncoderBlock::collect(const std::string& prefix, ParamList& out) {
    attn_norm.collect(prefix + ".attn_norm", out);
    attn.collect(prefix + ".attn", out);
    ffn_norm.collect(prefix + ".ffn_norm", out);
    ffn.collect(prefix + ".ffn", out);
}

} // namespace prime::nn
