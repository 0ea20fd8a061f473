#include "prime/tokenizer.hpp"

#include "prime/error.hpp"

#include <algorithm>
#include <memory>

namespace prime {

bool TokenBlock::fully_observed() const {
    return std::all_of(provenance.begin(), provenance.end(),
                       [](Provenance p) { return p == Provenance::Observed; });
}

std::vector<bool> valid_rows(const Tensor& embeddings) {
    std::vector<bool> mask(embeddings.rows(), false);
    const std::size_t c = embeddings.cols();
    auto d = embeddings.data();
    for (std::size_t r = 0; r < mask.size(); ++r)
        mask[r] = std::any_of(d.begin() + static_cast<std::ptrdiff_t>(r * c),
                              d.begin() + static_cast<std::ptrdiff_t>((r + 1) * c),
                              [](double v) { return v != 0.0; });
    return mask;
}

ModalityTokenizer::ModalityTokenizer(Modality modality, std::size_t input_dim, const TokenizerConfig& config,
                                     Rng& rng)
    : modality_(modality),
      input_dim_(input_dim),
      queries_(normal_tensor(rng, {config.tokens, config.dim}, config.query_init_std)),
      input_proj_(input_dim, config.dim, rng),
      query_norm_(config.dim),
      context_norm_(config.dim),
      attn_(config.dim, config.heads, rng),
      ffn_norm_(config.dim),
      ffn_(config.dim, config.ffn_hidden, rng) {}

std::vector<bool> ModalityTokenizer::resolve_mask(const Tensor& embeddings, std::span<const bool> pad_mask) const {
    if (embeddings.cols() != input_dim_)
        throw DimMismatch(std::string(name(modality_)) + " tokenizer expects width " + std::to_string(input_dim_) +
                          ", got " + std::to_string(embeddings.cols()));
    if (embeddings.rows() == 0) throw AllKeysMasked(std::string(name(modality_)) + " embedding has no rows");
    std::vector<bool> mask = pad_mask.empty() ? valid_rows(embeddings)
                                              : std::vector<bool>(pad_mask.begin(), pad_mask.end());
    if (mask.size() != embeddings.rows()) throw DimMismatch("pad mask length does not match embedding rows");
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
        throw AllKeysMasked(std::string(name(modality_)) + " embedding is entirely padding");
    return mask;
}

ad::Var ModalityTokenizer::context(ad::Tape& t, const Tensor& embeddings) {
    return context_norm_(t, input_proj_(t, t.constant(embeddings)));
}

ad::Var ModalityTokenizer::attention_only(ad::Tape& t, const Tensor& embeddings, std::span<const bool> pad_mask) {
    const std::vector<bool> mask = resolve_mask(embeddings, pad_mask);
    const std::unique_ptr<bool[]> flags(new bool[mask.size()]);
    std::copy(mask.begin(), mask.end(), flags.get());
    return attn_(t, query_norm_(t, t.param(queries_)), context(t, embeddings), {flags.get(), mask.size()});
}

TokenBlock ModalityTokenizer::tokenize(ad::Tape& t, const Tensor& embeddings, std::span<const bool> pad_mask) {
    const std::vector<bool> mask = resolve_mask(embeddings, pad_mask);
    const std::unique_ptr<bool[]> flags(new bool[mask.size()]);
    std::copy(mask.begin(), mask.end(), flags.get());
    ad::Var q = t.param(queries_);
    ad::Var h = ad::add(q, attn_(t, query_norm_(t, q), context(t, embeddings), {flags.get(), mask.size()}));
    ad::Var out = ad::add(h, ffn_(t, ffn_norm_(t, h)));
    return TokenBlock{out, modality_, std::vector<Provenance>(out.rows(), Provenance::Observed)};
}

void ModalityTokenizer::collect(const std::string& prefix, nn::ParamList& out) {
    out.emplace_back(prefix + ".queries", &queries_);
    input_proj_.collect(prefix + ".input_proj", out);
    query_norm_.collect(prefix + ".query_norm", out);
    context_norm_.collect(prefix + ".context_norm", out);
    attn_.collect(prefix + ".attn", out);
    ffn_norm_.collect(prefix + ".ffn_norm", out);
    ffn_.collect(prefix + ".ffn", out);
}

} // namespace prime
