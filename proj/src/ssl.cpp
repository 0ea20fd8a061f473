#include "prime/ssl.hpp"

#include "prime/error.hpp"

#include <algorithm>
#include <numeric>

namespace prime {

ProjectionHead::ProjectionHead(std::size_t dim, std::size_t out_dim, Rng& rng) : mlp_(dim, dim, out_dim, rng) {}

ad::Var ProjectionHead::operator()(ad::Tape& t, ad::Var x) { return ad::l2_normalize_rows(mlp_(t, x)); }

void ProjectionHead::collect(const std::string& prefix, nn::ParamList& out) { mlp_.collect(prefix, out); }

ad::Var info_nce(ad::Var a, ad::Var b, double temperature) {
    if (a.rows() == 0 || b.rows() == 0) throw EmptyBatch("InfoNCE on an empty batch");
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeMismatch("InfoNCE inputs must be matched");
    const std::size_t n = a.rows();
    std::vector<std::size_t> diag(n);
    std::iota(diag.begin(), diag.end(), std::size_t{0});
    ad::Var logits = ad::scale(ad::matmul_nt(a, b), 1.0 / temperature);
    ad::Var ab = ad::cross_entropy_rows(logits, diag);
    ad::Var ba = ad::cross_entropy_rows(ad::transpose(logits), diag);
    return ad::scale(ad::add(ab, ba), 0.5);
}

ad::Var alignment_loss(ad::Tape& t, std::array<ProjectionHead, kNumModalities>& heads, const AlignmentBatch& batch,
                       double temperature, AlignmentReport* report) {
    const std::size_t n = batch.refined.size();
    if (batch.availability.size() != n) throw ShapeMismatch("alignment batch availability mismatch");
    std::vector<ad::Var> terms;
    for (std::size_t p = 0; p < kModalityPairs.size(); ++p) {
        const auto [m1, m2] = kModalityPairs[p];
        std::vector<ad::Var> pooled1, pooled2;
        for (std::size_t i = 0; i < n; ++i) {
            const Availability& a = batch.availability[i];
            if (!a[index(m1)] || !a[index(m2)]) continue;
            pooled1.push_back(ad::mean_rows(batch.refined[i][index(m1)]));
            pooled2.push_back(ad::mean_rows(batch.refined[i][index(m2)]));
        }
        if (report) report->pair_sizes[p] = pooled1.size();
        if (pooled1.size() < 2) continue;
        ad::Var v1 = heads[index(m1)](t, ad::concat_rows(pooled1));
        ad::Var v2 = heads[index(m2)](t, ad::concat_rows(pooled2));
        ad::Var loss = info_nce(v1, v2, temperature);
        if (report) report->pair_losses[p] = loss.item();
        terms.push_back(loss);
    }
    if (report) report->pairs_used = terms.size();
    if (terms.empty()) return t.constant(Tensor::matrix(1, 1));
    ad::Var sum = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) sum = ad::add(sum, terms[i]);
    return ad::scale(sum, 1.0 / static_cast<double>(terms.size()));
}

std::vector<double> sparsify_top_k(std::span<const double> q, std::size_t top_ks) {
    std::vector<std::size_t> idx(q.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return q[a] > q[b]; });
    const std::size_t k = std::clamp<std::size_t>(top_ks, 1, q.size());
    std::vector<double> out(q.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += q[idx[i]];
    for (std::size_t i = 0; i < k; ++i) out[idx[i]] = total > 0.0 ? q[idx[i]] / total : 1.0 / static_cast<double>(k);
    return out;
}

AugmentDraw draw_augmentation(Rng& rng, const Availability& observed,
                              const std::array<std::vector<double>, kNumModalities>& assignments, std::size_t tokens,
                              const AugmentConfig& policy) {
    std::vector<std::size_t> obs;
    for (Modality m : kModalities)
        if (observed[index(m)]) obs.push_back(index(m));
    if (obs.empty()) throw NoObservedModality("cannot augment a patient with no observed modality");

    std::bernoulli_distribution drop_mod(policy.p_mod);
    std::bernoulli_distribution drop_tok(policy.p_tok);
    AugmentDraw draw;

    bool any_kept = false;
    for (int attempt = 0; attempt < 10 && !any_kept; ++attempt) {
        draw.keep_modality = {};
        for (std::size_t m : obs) {
            draw.keep_modality[m] = !drop_mod(rng);
            any_kept = any_kept || draw.keep_modality[m];
        }
    }
    if (!any_kept) {
        std::uniform_int_distribution<std::size_t> pick(0, obs.size() - 1);
        draw.keep_modality[obs[pick(rng)]] = true;
    }

    draw.keep_token.assign(kNumModalities * tokens, false);
    std::vector<std::size_t> candidates;
    bool any_token = false;
    for (std::size_t m : obs) {
        if (!draw.keep_modality[m]) continue;
        for (std::size_t j = 0; j < tokens; ++j) {
            const std::size_t pos = m * tokens + j;
            candidates.push_back(pos);
            draw.keep_token[pos] = !drop_tok(rng);
            any_token = any_token || draw.keep_token[pos];
        }
    }
    if (!any_token) {
        std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
        draw.keep_token[candidates[pick(rng)]] = true;
    }

    for (std::size_t m : obs) {
        bool dropped = false;
        for (std::size_t j = 0; j < tokens; ++j) dropped = dropped || !draw.keep_token[m * tokens + j];
        if (!dropped) continue;
        std::vector<double> conc = sparsify_top_k(assignments[m], policy.top_ks);
        for (double& c : conc) c *= policy.alpha;
        const std::vector<double> p = sample_dirichlet(rng, conc);
        draw.mix[m] = Tensor({1, p.size()}, p);
    }
    return draw;
}

FusedSequence apply_augmentation(ad::Tape& t, const BankView& bank, const CompletedPatient& patient,
                                 const AugmentDraw& draw, FillMode fill) {
    const std::size_t tq = bank.tokens;
    if (draw.keep_token.size() != kNumModalities * tq) throw ShapeMismatch("augmentation mask length mismatch");
    std::array<TokenBlock, kNumModalities> blocks = patient.refined;
    for (Modality m : kModalities) {
        const std::size_t i = index(m);
        if (!patient.observed[i] || !draw.mix[i]) continue;
        Tensor keep = Tensor::matrix(tq, bank.dim);
        Tensor drop = Tensor::matrix(tq, bank.dim);
        for (std::size_t r = 0; r < tq; ++r)
            for (std::size_t c = 0; c < bank.dim; ++c) {
                const bool k = draw.keep_token[i * tq + r];
                keep(r, c) = k ? 1.0 : 0.0;
                drop(r, c) = k ? 0.0 : 1.0;
            }
        ad::Var kept = ad::mul(blocks[i].tokens, t.constant(std::move(keep)));
        if (fill == FillMode::Prototype) {
            ad::Var mix = impute_missing(bank, t.constant(*draw.mix[i]), m).tokens;
            blocks[i].tokens = ad::add(kept, ad::mul(mix, t.constant(std::move(drop))));
        } else {
            blocks[i].tokens = kept;
        }
    }
    return fuse_concat(blocks, draw.keep_token);
}

ad::Var masked_pool(ad::Tape& t, const FusedSequence& seq) {
    const auto reliable = static_cast<std::size_t>(std::count(seq.reliability.begin(), seq.reliability.end(), true));
    if (reliable == 0) throw NoReliableToken("no reliable token to pool");
    Tensor w = Tensor::matrix(1, seq.length());
    for (std::size_t i = 0; i < seq.length(); ++i)
        if (seq.reliability[i]) w(0, i) = 1.0 / static_cast<double>(reliable);
    return ad::matmul(t.constant(std::move(w)), seq.tokens);
}

ad::Var fusion_loss(ad::Tape&, ProjectionHead& head, std::span<const ad::Var> view1, std::span<const ad::Var> view2,
                    double temperature) {
    if (view1.empty()) throw EmptyBatch("fusion loss on an empty batch");
    if (view1.size() != view2.size()) throw ShapeMismatch("fusion views must be matched");
    ad::Tape& t = *view1[0].tape;
    ad::Var h1 = head(t, view1.size() == 1 ? view1[0] : ad::concat_rows(view1));
    ad::Var h2 = head(t, view2.size() == 1 ? view2[0] : ad::concat_rows(view2));
    return info_nce(h1, h2, temperature);
}

LossComponents total_loss(ad::Tape& t, std::optional<ad::Var> align, std::optional<ad::Var> fusion,
                          std::optional<ad::Var> router, double lambda, double lambda_router) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidConfig("lambda must lie in [0, 1]");
    LossComponents out;
    std::optional<ad::Var> total;
    auto add_term = [&](const std::optional<ad::Var>& term, double weight, double& slot) {
        if (!term) return;
        slot = term->item();
        if (weight == 0.0) return;
        ad::Var w = ad::reshape(ad::scale(*term, weight), 1, 1);
        total = total ? ad::add(*total, w) : w;
    };
    add_term(align, lambda, out.align);
    add_term(fusion, 1.0 - lambda, out.fusion);
    add_term(router, lambda_router, out.router);
    out.total = total ? *total : t.constant(Tensor::matrix(1, 1));
    return out;
}

} // namespace prime
