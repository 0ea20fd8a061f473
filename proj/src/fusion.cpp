#include "prime/fusion.hpp"

#include "prime/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace prime {

FusedSequence fuse_concat(const std::array<TokenBlock, kNumModalities>& blocks, const std::vector<bool>& keep) {
    FusedSequence seq;
    std::vector<ad::Var> parts;
    for (Modality m : kModalities) {
        const TokenBlock& b = blocks[index(m)];
        if (b.modality != m) throw ShapeMismatch("fused blocks must be ordered I, R, T");
        if (!parts.empty() && b.tokens.cols() != parts.front().cols())
            throw ShapeMismatch("fused blocks disagree on width");
        parts.push_back(b.tokens);
        for (std::size_t r = 0; r < b.tokens.rows(); ++r) {
            seq.modality_of_token.push_back(m);
            seq.reliability.push_back(r < b.provenance.size() && b.provenance[r] == Provenance::Observed);
        }
    }
    if (!keep.empty()) {
        if (keep.size() != seq.reliability.size()) throw ShapeMismatch("keep mask length mismatch");
        for (std::size_t i = 0; i < keep.size(); ++i) seq.reliability[i] = seq.reliability[i] && keep[i];
    }
    seq.tokens = ad::concat_rows(parts);
    return seq;
}

ad::Var modality_slice(const FusedSequence& seq, Modality m) {
    const auto& labels = seq.modality_of_token;
    const auto first = std::find(labels.begin(), labels.end(), m);
    if (first == labels.end()) throw ShapeMismatch("modality absent from fused sequence");
    const auto count = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), m));
    return ad::slice_rows(seq.tokens, static_cast<std::size_t>(first - labels.begin()), count);
}

RouterStats summarize(const RouterRecord& record) {
    const std::size_t e = record.top1_counts.size();
    RouterStats s{std::vector<double>(e, 0.0), std::vector<double>(e, 0.0)};
    const double total = std::accumulate(record.top1_counts.begin(), record.top1_counts.end(), 0.0);
    if (total == 0.0) return s;
    for (std::size_t i = 0; i < e; ++i) s.fraction[i] = record.top1_counts[i] / total;
    for (const ad::Var& p : record.probs) {
        const Tensor& v = p.value();
        for (std::size_t r = 0; r < v.rows(); ++r)
            for (std::size_t i = 0; i < e; ++i) s.mean_prob[i] += v(r, i);
    }
    for (double& p : s.mean_prob) p /= total;
    return s;
}

double router_loss(std::span<const double> fraction, std::span<const double> mean_prob) {
    if (fraction.size() != mean_prob.size()) throw ShapeMismatch("router stats length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < fraction.size(); ++i) acc += fraction[i] * mean_prob[i];
    return static_cast<double>(fraction.size()) * acc;
}

ad::Var router_loss(ad::Tape& t, const std::vector<RouterRecord>& records) {
    std::vector<ad::Var> terms;
    for (const RouterRecord& rec : records) {
        if (rec.probs.empty()) continue;
        const std::size_t e = rec.top1_counts.size();
        const double total = std::accumulate(rec.top1_counts.begin(), rec.top1_counts.end(), 0.0);
        Tensor f = Tensor::matrix(1, e);
        for (std::size_t i = 0; i < e; ++i) f(0, i) = rec.top1_counts[i] / total;
        ad::Var p = ad::mean_rows(rec.probs.size() == 1 ? rec.probs[0] : ad::concat_rows(rec.probs));
        terms.push_back(ad::scale(ad::matmul_nt(p, t.constant(std::move(f))), static_cast<double>(e)));
    }
    if (terms.empty()) return t.constant(Tensor::scalar(0.0));
    ad::Var sum = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) sum = ad::add(sum, terms[i]);
    return ad::reshape(ad::scale(sum, 1.0 / static_cast<double>(terms.size())), 1, 1);
}

std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k) {
    std::vector<std::size_t> idx(row.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

MoeLayer::MoeLayer(std::size_t dim, std::size_t hidden, std::size_t experts, std::size_t top_k, Rng& rng)
    : gate_(normal_tensor(rng, {dim, experts}, 1.0 / std::sqrt(static_cast<double>(dim)))),
      modality_embed_(normal_tensor(rng, {kNumModalities, dim}, 0.02)),
      top_k_(top_k) {
    if (experts == 0 || top_k == 0 || top_k > experts) throw InvalidConfig("MoE requires 1 <= top_k <= experts");
    for (std::size_t e = 0; e < experts; ++e) experts_.emplace_back(dim, hidden, rng);
}

ad::Var MoeLayer::operator()(ad::Tape& t, ad::Var x, std::span<const Modality> labels, RouterRecord* record) {
    const std::size_t n = x.rows();
    const std::size_t n_exp = experts_.size();
    if (labels.size() != n) throw ShapeMismatch("one modality label per token required");
    std::vector<std::size_t> label_idx(n);
    for (std::size_t i = 0; i < n; ++i) label_idx[i] = index(labels[i]);

    ad::Var gate_in = ad::add(x, ad::gather_rows(t.param(modality_embed_), label_idx));
    ad::Var probs = ad::softmax_rows(ad::matmul(gate_in, t.param(gate_)));

    const Tensor& p = probs.value();
    Tensor keep = Tensor::matrix(n, n_exp);
    std::vector<std::vector<std::size_t>> routed(n_exp);
    std::vector<double> top1(n_exp, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        std::vector<double> row(n_exp);
        for (std::size_t e = 0; e < n_exp; ++e) row[e] = p(r, e);
        const auto sel = top_k_indices(row, top_k_);
        top1[sel.front()] += 1.0;
        for (std::size_t e : sel) {
            keep(r, e) = 1.0;
            routed[e].push_back(r);
        }
    }
    if (record) {
        if (record->top1_counts.empty()) record->top1_counts.assign(n_exp, 0.0);
        for (std::size_t e = 0; e < n_exp; ++e) record->top1_counts[e] += top1[e];
        record->probs.push_back(probs);
    }

    ad::Var weights = ad::renormalize_selected(probs, keep);
    std::optional<ad::Var> out;
    for (std::size_t e = 0; e < n_exp; ++e) {
        if (routed[e].empty()) continue;
        ad::Var y = experts_[e](t, ad::gather_rows(x, routed[e]));
        ad::Var w = ad::gather_rows(ad::slice_cols(weights, e, 1), routed[e]);
        ad::Var contrib = ad::scatter_rows(ad::mul_col(y, w), routed[e], n);
        out = out ? ad::add(*out, contrib) : contrib;
    }
    return *out;
}

void MoeLayer::collect(const std::string& prefix, nn::ParamList& out) {
    out.emplace_back(prefix + ".gate", &gate_);
    out.emplace_back(prefix + ".modality_embed", &modality_embed_);
    for (std::size_t e = 0; e < experts_.size(); ++e) experts_[e].collect(prefix + ".expert" + std::to_string(e), out);
}

MoeBlock::MoeBlock(const FusionConfig& config, std::size_t dim, Rng& rng)
    : attn_norm(dim),
      attn(dim, config.heads, rng),
      moe_norm(dim),
      moe(dim, config.ffn_hidden, config.experts, config.top_k, rng) {}

ad::Var MoeBlock::operator()(ad::Tape& t, ad::Var x, std::span<const Modality> labels, RouterRecord* record) {
    ad::Var h = attn_norm(t, x);
    x = ad::add(x, attn(t, h, h));
    return ad::add(x, moe(t, moe_norm(t, x), labels, record));
}

void MoeBlock::collect(const std::string& prefix, nn::ParamList& out) {
    attn_norm.collect(prefix + ".attn_norm", out);
    attn.collect(prefix + ".attn", out);
    moe_norm.collect(prefix + ".moe_norm", out);
    moe.collect(prefix + ".moe", out);
}

Backbone::Backbone(const FusionConfig& config, std::size_t dim, Rng& rng)
    : depth_(config.depth), segment_(config.segment_embedding), final_norm_(dim) {
    if (depth_ % 2 != 0) throw InvalidConfig("backbone depth must be even");
    if (segment_) segment_embed_ = ad::Parameter(normal_tensor(rng, {kNumModalities, dim}, 0.02));
    for (std::size_t i = 0; i < depth_ / 2; ++i) {
        vanilla_.emplace_back(dim, config.heads, config.ffn_hidden, rng);
        moe_.emplace_back(config, dim, rng);
    }
}

std::vector<RouterRecord> Backbone::make_records() const { return std::vector<RouterRecord>(moe_.size()); }

FusedSequence Backbone::operator()(ad::Tape& t, const FusedSequence& seq, std::vector<RouterRecord>* records) {
    if (depth_ == 0) return seq;
    if (records && records->size() != moe_.size()) throw ShapeMismatch("one router record per MoE block required");
    ad::Var x = seq.tokens;
    if (segment_) {
        std::vector<std::size_t> idx(seq.length());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = index(seq.modality_of_token[i]);
        x = ad::add(x, ad::gather_rows(t.param(segment_embed_), idx));
    }
    for (std::size_t i = 0; i < moe_.size(); ++i) {
        x = vanilla_[i](t, x);
        x = moe_[i](t, x, seq.modality_of_token, records ? &(*records)[i] : nullptr);
    }
    return FusedSequence{final_norm_(t, x), seq.modality_of_token, seq.reliability};
}

void Backbone::collect(const std::string& prefix, nn::ParamList& out) {
    if (segment_) out.emplace_back(prefix + ".segment_embed", &segment_embed_);
    for (std::size_t i = 0; i < moe_.size(); ++i) {
        vanilla_[i].collect(prefix + ".vanilla" + std::to_string(i), out);
        moe_[i].collect(prefix + ".moe" + std::to_string(i), out);
    }
    if (depth_ > 0) final_norm_.collect(prefix + ".final_norm", out);
}

} // namespace prime
