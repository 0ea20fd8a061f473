#include "prime/error.hpp"
#include "prime/rng.hpp"
#include "prime/ssl.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace prime;
using namespace oracle;

namespace {

constexpr std::size_t T = 3, D = 4, Dd = 3;

void expect_same(const Tensor& a, const Tensor& b, double tol) {
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t k = 0; k < a.data().size(); ++k) EXPECT_NEAR(a.data()[k], b.data()[k], tol) << "entry " << k;
}

Tensor unit_rows(Tensor x) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double n = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) n += x(r, c) * x(r, c);
        for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) /= std::sqrt(n);
    }
    return x;
}

std::array<ProjectionHead, kNumModalities> make_heads(std::uint64_t seed = 3) {
    Rng rng = make_rng(seed);
    std::array<ProjectionHead, kNumModalities> heads;
    for (auto& h : heads) h = ProjectionHead(D, Dd, rng);
    return heads;
}

PrototypeBank make_bank(std::size_t k) {
    BankConfig c;
    c.prototypes = k;
    Rng rng = make_rng(17);
    PrototypeBank bank(T, D, c, rng);
    bank.parameter().value = normal_tensor(rng, bank.parameter().value.shape(), 1.0);
    return bank;
}

CompletedPatient refined_patient(ad::Tape& t, Rng& rng, const Availability& observed) {
    CompletedPatient p;
    p.observed = observed;
    for (Modality m : kModalities) {
        const Provenance prov = observed[index(m)] ? Provenance::Observed : Provenance::Imputed;
        p.refined[index(m)] =
            TokenBlock{t.constant(normal_tensor(rng, {T, D}, 1.0)), m, std::vector<Provenance>(T, prov)};
    }
    return p;
}

std::array<std::vector<double>, kNumModalities> uniform_assignments(std::size_t k) {
    std::array<std::vector<double>, kNumModalities> q;
    for (auto& v : q) v.assign(k, 1.0 / k);
    return q;
}

} // namespace

TEST(InfoNce, SinglePairIsZero) {
    ad::Tape t(false);
    const ad::Var a = t.constant(unit_rows(Tensor::from_rows({{1.0, 2.0}})));
    EXPECT_EQ(info_nce(a, a, 0.1).item(), 0.0);
    EXPECT_THROW(info_nce(t.constant(Tensor::matrix(0, 2)), t.constant(Tensor::matrix(0, 2)), 0.1), EmptyBatch);
}

TEST(InfoNce, OrthogonalNegativesHandSoftmax) {
    ad::Tape t(false);
    const ad::Var a = t.constant(Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
    EXPECT_NEAR(info_nce(a, a, 1.0).item(), std::log(1.0 + std::exp(-1.0)), 1e-15);
}

TEST(InfoNce, DecreasesAsNegativesSeparate) {
    double prev = 1e9;
    for (double s = 0.9; s >= -0.9; s -= 0.1) {
        // Two unit vectors at cosine s; positives are the vectors themselves.
        const double th = std::acos(s);
        ad::Tape t(false);
        const ad::Var a = t.constant(Tensor::from_rows({{1.0, 0.0}, {std::cos(th), std::sin(th)}}));
        const double l = info_nce(a, a, 1.0).item();
        EXPECT_NEAR(l, std::log(1.0 + std::exp(s - 1.0)), 1e-12);
        EXPECT_LT(l, prev);
        prev = l;
    }
}

TEST(InfoNce, MatchesLoopOracle) {
    Rng rng = make_rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = unit_rows(normal_tensor(rng, {6, 3}, 1.0));
        const Tensor b = unit_rows(normal_tensor(rng, {6, 3}, 1.0));
        ad::Tape t(false);
        EXPECT_NEAR(info_nce(t.constant(a), t.constant(b), 0.1).item(), loop_info_nce(a, b, 0.1), 1e-12);
    }
}

TEST(Projection, OutputsUnitVectors) {
    auto heads = make_heads();
    Rng rng = make_rng(5);
    ad::Tape t(false);
    const Tensor v = heads[0](t, t.constant(normal_tensor(rng, {5, D}, 1.0))).value();
    EXPECT_EQ(v.cols(), Dd);
    for (std::size_t r = 0; r < 5; ++r) {
        double n = 0.0;
        for (std::size_t c = 0; c < Dd; ++c) n += v(r, c) * v(r, c);
        EXPECT_NEAR(n, 1.0, 1e-9);
    }
}

TEST(Alignment, ImageOnlyBatchIsZero) {
    auto heads = make_heads();
    Rng rng = make_rng(6);
    Batch b = random_batch(rng, 5, 0.0);
    for (auto& a : b.availability) a = {true, false, false};
    ad::Tape t(false);
    AlignmentReport report;
    EXPECT_EQ(alignment_loss(t, heads, b.bind(t), 0.1, &report).item(), 0.0);
    EXPECT_EQ(report.pairs_used, 0u);
}

TEST(Alignment, TriModalEqualsUnmaskedPairs) {
    auto heads = make_heads();
    Rng rng = make_rng(7);
    const Batch b = random_batch(rng, 6, 0.0);
    ad::Tape t(false);
    AlignmentReport report;
    const double got = alignment_loss(t, heads, b.bind(t), 0.1, &report).item();
    EXPECT_EQ(report.pairs_used, 3u);
    EXPECT_EQ(report.pair_sizes, (std::array<std::size_t, 3>{6, 6, 6}));
    EXPECT_NEAR(got, filtered_alignment(heads, b, 0.1), 1e-12);
}

TEST(Alignment, MixedAvailabilityMatchesFilteredSubBatches) {
    auto heads = make_heads();
    Rng rng = make_rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const Batch b = random_batch(rng, 8, 0.4);
        ad::Tape t(false);
        EXPECT_NEAR(alignment_loss(t, heads, b.bind(t), 0.1).item(), filtered_alignment(heads, b, 0.1), 1e-12);
    }
}

TEST(Alignment, ImageOnlyPatientLeavesRnaTextTermUnchanged) {
    auto heads = make_heads();
    Rng rng = make_rng(9);
    Batch b = random_batch(rng, 6, 0.3);
    for (auto& a : b.availability) a = {false, true, true};
    AlignmentReport before, after;
    ad::Tape t(false);
    alignment_loss(t, heads, b.bind(t), 0.1, &before);
    b.refined.push_back({normal_tensor(rng, {T, D}, 1.0), normal_tensor(rng, {T, D}, 1.0),
                         normal_tensor(rng, {T, D}, 1.0)});
    b.availability.push_back({true, false, false});
    alignment_loss(t, heads, b.bind(t), 0.1, &after);
    EXPECT_EQ(before.pair_losses[2], after.pair_losses[2]);
    EXPECT_EQ(after.pair_sizes[2], 6u);
}

TEST(Sparsify, KeepsTopEntries) {
    const std::vector<double> q{0.1, 0.4, 0.2, 0.3};
    const std::vector<double> s2 = sparsify_top_k(q, 2);
    EXPECT_NEAR(s2[1], 4.0 / 7.0, 1e-15);
    EXPECT_NEAR(s2[3], 3.0 / 7.0, 1e-15);
    EXPECT_EQ(s2[0], 0.0);
    EXPECT_EQ(s2[2], 0.0);
    EXPECT_EQ(sparsify_top_k(q, 1), (std::vector<double>{0, 1, 0, 0}));
}

TEST(Augment, NoDropIsIdentityView) {
    PrototypeBank bank = make_bank(5);
    Rng rng = make_rng(10);
    AugmentConfig policy;
    policy.p_mod = 0.0;
    policy.p_tok = 0.0;
    ad::Tape t(false);
    const BankView view = bank.bind(t);
    const Availability obs{true, false, true};
    const CompletedPatient p = refined_patient(t, rng, obs);
    const AugmentDraw draw = draw_augmentation(rng, obs, uniform_assignments(5), T, policy);
    const FusedSequence aug = apply_augmentation(t, view, p, draw);
    const FusedSequence plain = fuse_concat(p.refined);
    const Tensor a = aug.tokens.value();
    expect_same(a, plain.tokens.value(), 0.0);
    EXPECT_EQ(aug.reliability, plain.reliability);
    for (const auto& m : draw.mix) EXPECT_FALSE(m.has_value());
}

TEST(Augment, SingleTopPrototypeFillsExactly) {
    PrototypeBank bank = make_bank(5);
    Rng rng = make_rng(11);
    AugmentConfig policy;
    policy.p_mod = 0.0;
    policy.p_tok = 0.6;
    policy.top_ks = 1;
    auto q = uniform_assignments(5);
    q[0] = {0.1, 0.1, 0.5, 0.2, 0.1};
    const Availability obs{true, false, false};
    int checked = 0;
    for (int trial = 0; trial < 20; ++trial) {
        ad::Tape t(false);
        const BankView view = bank.bind(t);
        const CompletedPatient p = refined_patient(t, rng, obs);
        const AugmentDraw draw = draw_augmentation(rng, obs, q, T, policy);
        if (!draw.mix[0]) continue;
        const FusedSequence aug = apply_augmentation(t, view, p, draw);
        const Tensor c2 = bank.prototype(2);
        const Tensor x = aug.tokens.value();
        const Tensor z = p.refined[0].tokens.value();
        for (std::size_t r = 0; r < T; ++r)
            for (std::size_t d = 0; d < D; ++d) {
                if (draw.keep_token[r])
                    EXPECT_EQ(x(r, d), z(r, d));
                else
                    EXPECT_EQ(x(r, d), c2(r, d));
            }
        ++checked;
    }
    EXPECT_GT(checked, 5);
}

TEST(Augment, ZeroFillChangesOnlyReplacement) {
    PrototypeBank bank = make_bank(5);
    Rng rng = make_rng(12);
    AugmentConfig policy;
    policy.p_tok = 0.5;
    const Availability obs{true, true, false};
    ad::Tape t(false);
    const BankView view = bank.bind(t);
    const CompletedPatient p = refined_patient(t, rng, obs);
    const AugmentDraw draw = draw_augmentation(rng, obs, uniform_assignments(5), T, policy);
    const FusedSequence a = apply_augmentation(t, view, p, draw, FillMode::Prototype);
    const FusedSequence z = apply_augmentation(t, view, p, draw, FillMode::Zeros);
    EXPECT_EQ(a.reliability, z.reliability);
    const Tensor av = a.tokens.value(), zv = z.tokens.value();
    for (std::size_t r = 0; r < 3 * T; ++r)
        for (std::size_t d = 0; d < D; ++d) {
            const bool replaced = obs[r / T] && draw.mix[r / T] && !draw.keep_token[r];
            if (replaced)
                EXPECT_EQ(zv(r, d), 0.0);
            else
                EXPECT_EQ(zv(r, d), av(r, d));
        }
}

TEST(Augment, DirichletMeanMatchesSparsifiedAssignment) {
    Rng rng = make_rng(13);
    AugmentConfig policy;
    policy.p_mod = 0.0;
    policy.p_tok = 0.9;
    policy.top_ks = 3;
    policy.alpha = 50.0;
    auto q = uniform_assignments(6);
    q[1] = {0.05, 0.3, 0.1, 0.25, 0.2, 0.1};
    const std::vector<double> target = sparsify_top_k(q[1], 3);
    std::vector<double> mean(6, 0.0);
    std::size_t draws = 0;
    while (draws < 10000) {
        const AugmentDraw d = draw_augmentation(rng, {false, true, false}, q, T, policy);
        if (!d.mix[1]) continue;
        for (std::size_t k = 0; k < 6; ++k) mean[k] += (*d.mix[1])(0, k);
        ++draws;
    }
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(mean[k] / draws, target[k], 0.02);
}

TEST(Augment, ViewAlwaysKeepsAToken) {
    Rng rng = make_rng(14);
    AugmentConfig policy;
    policy.p_mod = 0.9;
    policy.p_tok = 0.95;
    for (int trial = 0; trial < 2000; ++trial) {
        Availability obs{trial % 2 == 0, trial % 3 == 0, true};
        const AugmentDraw d = draw_augmentation(rng, obs, uniform_assignments(4), T, policy);
        std::size_t kept = 0;
        for (std::size_t i = 0; i < d.keep_token.size(); ++i) {
            kept += d.keep_token[i];
            if (d.keep_token[i]) EXPECT_TRUE(obs[i / T]);
        }
        EXPECT_GE(kept, 1u);
    }
    EXPECT_THROW(draw_augmentation(rng, {false, false, false}, uniform_assignments(4), T, policy),
                 NoObservedModality);
}

TEST(MaskedPool, PlainMeanSingleTokenAndOracle) {
    Rng rng = make_rng(15);
    for (int trial = 0; trial < 50; ++trial) {
        ad::Tape t(false);
        FusedSequence s;
        const Tensor x = normal_tensor(rng, {3 * T, D}, 1.0);
        s.tokens = t.constant(x);
        std::bernoulli_distribution keep(trial == 0 ? 1.0 : 0.5);
        for (Modality m : kModalities)
            for (std::size_t j = 0; j < T; ++j) {
                s.modality_of_token.push_back(m);
                s.reliability.push_back(keep(rng));
            }
        if (trial == 1) {
            s.reliability.assign(3 * T, false);
            s.reliability[4] = true;
        }
        const std::size_t n = static_cast<std::size_t>(std::count(s.reliability.begin(), s.reliability.end(), true));
        if (n == 0) {
            EXPECT_THROW(masked_pool(t, s), NoReliableToken);
            continue;
        }
        const Tensor got = masked_pool(t, s).value();
        for (std::size_t d = 0; d < D; ++d) {
            double want = 0.0;
            for (std::size_t r = 0; r < 3 * T; ++r)
                if (s.reliability[r]) want += x(r, d);
            EXPECT_NEAR(got(0, d), want / n, 1e-12);
        }
    }
}

TEST(MaskedPool, GradientOnlyReachesReliableTokens) {
    Rng rng = make_rng(16);
    ad::Parameter x(normal_tensor(rng, {3 * T, D}, 1.0));
    ad::Tape t;
    FusedSequence s;
    s.tokens = t.param(x);
    for (std::size_t r = 0; r < 3 * T; ++r) {
        s.modality_of_token.push_back(kModalities[r / T]);
        s.reliability.push_back(r % 4 == 1);
    }
    t.backward(ad::sum_all(masked_pool(t, s)));
    for (std::size_t r = 0; r < 3 * T; ++r)
        for (std::size_t d = 0; d < D; ++d) {
            if (s.reliability[r])
                EXPECT_NEAR(x.grad(r, d), 1.0 / 2.0, 1e-15);
            else
                EXPECT_EQ(x.grad(r, d), 0.0);
        }
}

TEST(FusionLoss, IdenticalViewsClosedForm) {
    Rng rng = make_rng(18);
    ProjectionHead head(D, Dd, rng);
    ad::Tape t(false);
    std::vector<ad::Var> pooled{t.constant(normal_tensor(rng, {1, D}, 1.0)), t.constant(normal_tensor(rng, {1, D}, 1.0))};
    const double loss = fusion_loss(t, head, pooled, pooled, 1.0).item();
    const Tensor h0 = head(t, pooled[0]).value();
    const Tensor h1 = head(t, pooled[1]).value();
    double s = 0.0;
    for (std::size_t c = 0; c < Dd; ++c) s += h0(0, c) * h1(0, c);
    EXPECT_NEAR(loss, std::log(1.0 + std::exp(s - 1.0)), 1e-12);
    const std::vector<ad::Var> one{pooled[0]};
    EXPECT_EQ(fusion_loss(t, head, one, one, 0.1).item(), 0.0);
}

TEST(TotalLoss, EndpointsDropTermsFromGraph) {
    ad::Parameter a(Tensor::scalar(1.3)), f(Tensor::scalar(0.7)), r(Tensor::scalar(1.1));
    for (double lambda : {0.0, 0.3, 1.0}) {
        a.zero_grad();
        f.zero_grad();
        r.zero_grad();
        ad::Tape t;
        const LossComponents c = total_loss(t, t.param(a), t.param(f), t.param(r), lambda, 0.01);
        EXPECT_NEAR(c.total.item(), lambda * 1.3 + (1 - lambda) * 0.7 + 0.01 * 1.1, 1e-12);
        EXPECT_NEAR(c.total.item(), lambda * c.align + (1 - lambda) * c.fusion + 0.01 * c.router, 1e-12);
        t.backward(c.total);
        EXPECT_NEAR(a.grad[0], lambda, 1e-15);
        EXPECT_NEAR(f.grad[0], 1 - lambda, 1e-15);
        EXPECT_NEAR(r.grad[0], 0.01, 1e-15);
    }
}

TEST(TotalLoss, AbsentTermsAreSkipped) {
    ad::Tape t(false);
    const LossComponents c = total_loss(t, std::nullopt, t.constant(Tensor::scalar(2.0)), std::nullopt, 0.0, 0.01);
    EXPECT_NEAR(c.total.item(), 2.0, 1e-15);
    EXPECT_EQ(c.align, 0.0);
}
