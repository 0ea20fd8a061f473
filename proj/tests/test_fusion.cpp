#include "prime/error.hpp"
#include "prime/fusion.hpp"
#include "prime/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace prime;

namespace {

void expect_same(const Tensor& a, const Tensor& b, double tol) {
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t k = 0; k < a.data().size(); ++k) EXPECT_NEAR(a.data()[k], b.data()[k], tol) << "entry " << k;
}

void perturb(nn::ParamList& ps, Rng& rng, double sd) {
    for (auto& [name, p] : ps) {
        const Tensor noise = normal_tensor(rng, p->value.shape(), sd);
        for (std::size_t k = 0; k < noise.data().size(); ++k) p->value.data()[k] += noise.data()[k];
    }
}

MoeLayer make_moe(std::size_t dim, std::size_t experts, std::size_t top_k, std::uint64_t seed = 4) {
    Rng rng = make_rng(seed);
    MoeLayer moe(dim, 6, experts, top_k, rng);
    nn::ParamList ps;
    moe.collect("moe", ps);
    perturb(ps, rng, 0.5);
    return moe;
}

std::vector<Modality> labels_for(std::size_t tokens_per_block) {
    std::vector<Modality> out;
    for (Modality m : kModalities)
        for (std::size_t i = 0; i < tokens_per_block; ++i) out.push_back(m);
    return out;
}

std::array<TokenBlock, kNumModalities> blocks(ad::Tape& t, Rng& rng, std::size_t T, std::size_t D) {
    std::array<TokenBlock, kNumModalities> out;
    for (Modality m : kModalities)
        out[index(m)] = TokenBlock{t.constant(normal_tensor(rng, {T, D}, 1.0)), m,
                                   std::vector<Provenance>(T, Provenance::Observed)};
    return out;
}

} // namespace

TEST(FuseConcat, LabelsFollowFixedOrder) {
    ad::Tape t(false);
    Rng rng = make_rng(1);
    const FusedSequence s = fuse_concat(blocks(t, rng, 2, 3));
    EXPECT_EQ(s.length(), 6u);
    EXPECT_EQ(s.modality_of_token, labels_for(2));
    EXPECT_EQ(s.tokens.rows(), 6u);
    EXPECT_EQ(s.reliability, std::vector<bool>(6, true));
}

TEST(FuseConcat, ReliabilityIsObservedAndKept) {
    ad::Tape t(false);
    Rng rng = make_rng(2);
    auto b = blocks(t, rng, 2, 3);
    b[1].provenance = {Provenance::Imputed, Provenance::Imputed};
    b[2].provenance = {Provenance::Observed, Provenance::Imputed};
    const std::vector<bool> keep{true, false, true, true, false, true};
    const FusedSequence s = fuse_concat(b, keep);
    const std::vector<bool> observed{true, true, false, false, true, false};
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(s.reliability[i], observed[i] && keep[i]) << i;
    EXPECT_THROW(fuse_concat(b, std::vector<bool>{true, false}), ShapeMismatch);
}

TEST(FuseConcat, SlicingRecoversBlocks) {
    ad::Tape t(false);
    Rng rng = make_rng(3);
    const auto b = blocks(t, rng, 3, 4);
    const FusedSequence s = fuse_concat(b);
    for (Modality m : kModalities) {
        const Tensor got = modality_slice(s, m).value();
        expect_same(got, b[index(m)].tokens.value(), 0.0);
    }
}

TEST(TopK, LowerIndexWinsTies) {
    const std::vector<double> row{0.2, 0.4, 0.4, 0.1};
    EXPECT_EQ(top_k_indices(row, 1), (std::vector<std::size_t>{1}));
    EXPECT_EQ(top_k_indices(row, 2), (std::vector<std::size_t>{1, 2}));
    const std::vector<double> flat{0.25, 0.25, 0.25, 0.25};
    EXPECT_EQ(top_k_indices(flat, 3), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Moe, SingleExpertIsPlainFeedForward) {
    MoeLayer moe = make_moe(4, 1, 1);
    Rng rng = make_rng(5);
    ad::Tape t(false);
    const ad::Var x = t.constant(normal_tensor(rng, {6, 4}, 1.0));
    const auto labels = labels_for(2);
    const Tensor got = moe(t, x, labels, nullptr).value();
    const Tensor want = moe.expert_ffns()[0](t, x).value();
    expect_same(got, want, 1e-14);
}

TEST(Moe, DenseTopKMatchesWeightedSum) {
    const std::size_t D = 4, E = 3;
    MoeLayer moe = make_moe(D, E, E);
    Rng rng = make_rng(6);
    const Tensor xv = normal_tensor(rng, {6, D}, 1.0);
    const auto labels = labels_for(2);
    ad::Tape t(false);
    const ad::Var x = t.constant(xv);
    const Tensor got = moe(t, x, labels, nullptr).value();

    const Tensor& W = moe.gate_weight().value;
    const Tensor& b = moe.modality_embedding().value;
    std::vector<Tensor> expert_out;
    for (std::size_t e = 0; e < E; ++e) expert_out.push_back(moe.expert_ffns()[e](t, x).value());
    for (std::size_t r = 0; r < 6; ++r) {
        std::vector<double> logit(E, 0.0);
        for (std::size_t e = 0; e < E; ++e)
            for (std::size_t d = 0; d < D; ++d) logit[e] += (xv(r, d) + b(index(labels[r]), d)) * W(d, e);
        double mx = *std::max_element(logit.begin(), logit.end()), z = 0.0;
        for (double& l : logit) z += (l = std::exp(l - mx));
        for (std::size_t d = 0; d < D; ++d) {
            double want = 0.0;
            for (std::size_t e = 0; e < E; ++e) want += logit[e] / z * expert_out[e](r, d);
            EXPECT_NEAR(got(r, d), want, 1e-12);
        }
    }
}

TEST(Moe, ModalityEmbeddingSteersRouting) {
    Rng rng = make_rng(7);
    MoeLayer moe(2, 4, 2, 1, rng);
    moe.gate_weight().value = Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    moe.modality_embedding().value = Tensor::from_rows({{5.0, 0.0}, {0.0, 5.0}, {0.0, 0.0}});
    ad::Tape t(false);
    const ad::Var x = t.constant(Tensor::matrix(2, 2));
    const std::vector<Modality> labels{Modality::Image, Modality::Rna};
    RouterRecord rec;
    const Tensor out = moe(t, x, labels, &rec).value();
    EXPECT_EQ(rec.top1_counts, (std::vector<double>{1.0, 1.0}));
    const Tensor e0 = moe.expert_ffns()[0](t, t.constant(Tensor::matrix(1, 2))).value();
    const Tensor e1 = moe.expert_ffns()[1](t, t.constant(Tensor::matrix(1, 2))).value();
    for (std::size_t d = 0; d < 2; ++d) {
        EXPECT_NEAR(out(0, d), e0(0, d), 1e-15);
        EXPECT_NEAR(out(1, d), e1(0, d), 1e-15);
    }
}

TEST(Moe, SelectedWeightsSumToOne) {
    // With identical experts the mixture equals one expert only if the kept weights sum to 1.
    MoeLayer moe = make_moe(4, 4, 2);
    for (std::size_t e = 1; e < 4; ++e) moe.expert_ffns()[e] = moe.expert_ffns()[0];
    Rng rng = make_rng(8);
    ad::Tape t(false);
    const ad::Var x = t.constant(normal_tensor(rng, {9, 4}, 1.0));
    const auto labels = labels_for(3);
    RouterRecord rec;
    const Tensor got = moe(t, x, labels, &rec).value();
    const Tensor want = moe.expert_ffns()[0](t, x).value();
    expect_same(got, want, 1e-13);
    const RouterStats s = summarize(rec);
    double f = 0.0, p = 0.0;
    for (std::size_t e = 0; e < 4; ++e) {
        f += s.fraction[e];
        p += s.mean_prob[e];
    }
    EXPECT_NEAR(f, 1.0, 1e-12);
    EXPECT_NEAR(p, 1.0, 1e-12);
}

TEST(Moe, ZeroModalityEmbeddingIsLabelBlind) {
    MoeLayer moe = make_moe(4, 4, 2);
    moe.modality_embedding().value = Tensor::matrix(3, 4);
    Rng rng = make_rng(9);
    ad::Tape t(false);
    const ad::Var x = t.constant(normal_tensor(rng, {6, 4}, 1.0));
    const std::vector<Modality> a = labels_for(2);
    const std::vector<Modality> b{Modality::Text, Modality::Image, Modality::Rna,
                                  Modality::Text, Modality::Rna,   Modality::Image};
    const Tensor ya = moe(t, x, a, nullptr).value();
    const Tensor yb = moe(t, x, b, nullptr).value();
    expect_same(ya, yb, 0.0);
}

TEST(RouterLoss, UniformIsOne) {
    const std::vector<double> f(4, 0.25), p(4, 0.25);
    EXPECT_NEAR(router_loss(f, p), 1.0, 1e-15);
}

TEST(RouterLoss, OneHotIsExpertCount) {
    const std::vector<double> f{0, 1, 0, 0}, p{0, 1, 0, 0};
    EXPECT_DOUBLE_EQ(router_loss(f, p), 4.0);
}

TEST(RouterLoss, HandArithmetic) {
    const std::vector<double> f{0.5, 0.3, 0.2}, p{0.4, 0.35, 0.25};
    EXPECT_NEAR(router_loss(f, p), 3.0 * (0.2 + 0.105 + 0.05), 1e-15);
    const std::vector<double> shorter{0.5, 0.5};
    EXPECT_THROW(router_loss(shorter, p), ShapeMismatch);
}

TEST(RouterLoss, CanFallBelowOneWithConsistentRouting) {
    // Two experts, top-1. 80% of tokens go to expert 0 with p=(0.5,0.5); the rest
    // go to expert 1 with p=(0,1). Every token's choice agrees with its own argmax.
    const std::vector<double> f{0.8, 0.2};
    const std::vector<double> p{0.8 * 0.5, 0.8 * 0.5 + 0.2};
    EXPECT_NEAR(router_loss(f, p), 0.88, 1e-12);
}

TEST(RouterLoss, DifferentiableFormMatchesNumeric) {
    MoeLayer moe = make_moe(4, 3, 1);
    Rng rng = make_rng(10);
    ad::Tape t;
    const ad::Var x = t.constant(normal_tensor(rng, {12, 4}, 1.0));
    std::vector<RouterRecord> recs(1);
    const auto labels = labels_for(4);
    moe(t, x, labels, &recs[0]);
    const RouterStats s = summarize(recs[0]);
    EXPECT_NEAR(router_loss(t, recs).item(), router_loss(s.fraction, s.mean_prob), 1e-12);
}

TEST(Backbone, DepthZeroIsIdentity) {
    FusionConfig c;
    c.depth = 0;
    Rng rng = make_rng(11);
    Backbone bb(c, 4, rng);
    ad::Tape t(false);
    const FusedSequence in = fuse_concat(blocks(t, rng, 2, 4));
    const FusedSequence out = bb(t, in);
    expect_same(out.tokens.value(), in.tokens.value(), 0.0);
    EXPECT_EQ(bb.moe_blocks(), 0u);
}

TEST(Backbone, ShapeAndLabelsPreserved) {
    for (std::size_t depth : {2u, 4u}) {
        FusionConfig c;
        c.depth = depth;
        c.heads = 2;
        c.ffn_hidden = 8;
        Rng rng = make_rng(12);
        Backbone bb(c, 4, rng);
        ad::Tape t(false);
        auto b = blocks(t, rng, 3, 4);
        b[1].provenance = std::vector<Provenance>(3, Provenance::Imputed);
        const FusedSequence in = fuse_concat(b);
        std::vector<RouterRecord> recs = bb.make_records();
        EXPECT_EQ(recs.size(), depth / 2);
        const FusedSequence out = bb(t, in, &recs);
        EXPECT_EQ(out.tokens.rows(), 9u);
        EXPECT_EQ(out.tokens.cols(), 4u);
        EXPECT_EQ(out.modality_of_token, in.modality_of_token);
        EXPECT_EQ(out.reliability, in.reliability);
        for (const RouterRecord& r : recs) {
            double n = 0.0;
            for (double v : r.top1_counts) n += v;
            EXPECT_EQ(n, 9.0);
        }
        std::vector<RouterRecord> wrong(depth / 2 + 1);
        EXPECT_THROW(bb(t, in, &wrong), ShapeMismatch);
    }
}

TEST(Backbone, OddDepthRejected) {
    FusionConfig c;
    c.depth = 3;
    Rng rng = make_rng(13);
    EXPECT_THROW(Backbone(c, 4, rng), InvalidConfig);
}
