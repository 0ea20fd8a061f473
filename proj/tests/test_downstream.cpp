#include "prime/cohort.hpp"
#include "prime/downstream.hpp"
#include "prime/error.hpp"
#include "prime/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace prime;

namespace {

double log_sig(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

double hand_nll(const Tensor& logits, const std::vector<std::size_t>& bin, const std::vector<bool>& censored) {
    double total = 0.0;
    for (std::size_t i = 0; i < bin.size(); ++i) {
        double l = 0.0;
        for (std::size_t u = 0; u < bin[i]; ++u) l -= log_sig(-logits(i, u));
        l -= censored[i] ? log_sig(-logits(i, bin[i])) : log_sig(logits(i, bin[i]));
        total += l;
    }
    return total / static_cast<double>(bin.size());
}

double nll(const Tensor& logits, const std::vector<std::size_t>& bin, const std::vector<bool>& censored) {
    ad::Tape t(false);
    std::unique_ptr<bool[]> c(new bool[censored.size()]);
    for (std::size_t i = 0; i < censored.size(); ++i) c[i] = censored[i];
    return survival_nll(t.constant(logits), bin, {c.get(), censored.size()}).item();
}

// Latent ground truth as features: the head sees the signal directly.
FeatureFn latent_features(const Cohort& c) {
    return [&c](std::size_t i, const Availability&) {
        const auto& z = c.patients[i].latent;
        return Tensor({1, z.size()}, z);
    };
}

double latent_probe_c_index(double coupling) {
    SyntheticConfig sc;
    sc.n_patients = 1000;
    sc.lengths = {2, 1, 2};
    sc.dims = {2, 2, 2};
    sc.hazard_coupling = coupling;
    sc.seed = 41;
    static Cohort cohort;
    cohort = generate_synthetic_cohort(sc);
    const FoldSplit f = make_folds(cohort.patients.size(), 5, 3).front();
    TrainRequest req;
    req.task = Task::Survival;
    req.patients = cohort.patients;
    req.train = f.train;
    req.val = f.val;
    req.seed = 5;
    DownstreamConfig dc;
    const FeatureFn fn = latent_features(cohort);
    const DownstreamResult r = train_linear_probe(req, fn, sc.latent_dim, dc);
    const std::vector<double> s = predict(r.head, fn, cohort.patients, f.test, kAllAvailable);
    return task_metric(Task::Survival, cohort.patients, f.test, s);
}

} // namespace

TEST(Bins, SingleBinHoldsEveryone) {
    const std::vector<double> t{1, 5, 3, 9};
    const std::unique_ptr<bool[]> e(new bool[4]{true, false, true, true});
    const TimeBins b = discretize_time(t, {e.get(), 4}, 1);
    EXPECT_EQ(b.bins(), 1u);
    EXPECT_EQ(b.index, (std::vector<std::size_t>{0, 0, 0, 0}));
}

TEST(Bins, MedianEdgeForFourEvents) {
    const std::vector<double> t{1, 2, 3, 4};
    const std::unique_ptr<bool[]> e(new bool[4]{true, true, true, true});
    const TimeBins b = discretize_time(t, {e.get(), 4}, 2);
    ASSERT_EQ(b.edges.size(), 1u);
    EXPECT_DOUBLE_EQ(b.edges[0], 2.5);
    EXPECT_EQ(b.index, (std::vector<std::size_t>{0, 0, 1, 1}));
    EXPECT_EQ(b.bin_of(2.5), 0u);
    EXPECT_EQ(b.bin_of(100.0), 1u);
}

TEST(Bins, EventCountsBalanced) {
    Rng rng = make_rng(2);
    std::exponential_distribution<double> ex(0.05);
    std::bernoulli_distribution ev(0.7);
    std::vector<double> t(403);
    std::unique_ptr<bool[]> e(new bool[t.size()]);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = ex(rng);
        e[i] = ev(rng);
    }
    const TimeBins b = discretize_time(t, {e.get(), t.size()}, 8);
    std::vector<int> counts(8, 0);
    for (std::size_t i = 0; i < t.size(); ++i)
        if (e[i]) ++counts[b.index[i]];
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    EXPECT_LE(*hi - *lo, 1);
}

TEST(Bins, TooFewDistinctEventsThrows) {
    const std::vector<double> t{1, 1, 2, 5};
    const std::unique_ptr<bool[]> e(new bool[4]{true, true, true, false});
    EXPECT_THROW(discretize_time(t, {e.get(), 4}, 3), DegenerateBins);
}

TEST(SurvivalNll, EventInFirstBinAtHalfHazard) {
    EXPECT_NEAR(nll(Tensor::from_rows({{0.0, 3.0}}), {0}, {false}), std::log(2.0), 1e-15);
}

TEST(SurvivalNll, CensoredAtLastBinWithVanishingHazards) {
    EXPECT_LT(nll(Tensor::from_rows({{-40.0, -40.0, -40.0}}), {2}, {true}), 1e-15);
}

TEST(SurvivalNll, MatchesHandExpansion) {
    Rng rng = make_rng(3);
    std::uniform_int_distribution<std::size_t> bin(0, 3);
    std::bernoulli_distribution cens(0.4);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor logits = normal_tensor(rng, {5, 4}, 2.0);
        std::vector<std::size_t> b(5);
        std::vector<bool> c(5);
        for (std::size_t i = 0; i < 5; ++i) {
            b[i] = bin(rng);
            c[i] = cens(rng);
        }
        EXPECT_NEAR(nll(logits, b, c), hand_nll(logits, b, c), 1e-12);
    }
}

TEST(SurvivalNll, DirectionalPerturbation) {
    Rng rng = make_rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const Tensor base = normal_tensor(rng, {1, 4}, 1.0);
        for (bool censored : {false, true}) {
            const double l0 = nll(base, {2}, {censored});
            Tensor pre = base;
            pre(0, 0) -= 0.3;
            EXPECT_LT(nll(pre, {2}, {censored}), l0);
            if (!censored) {
                Tensor own = base;
                own(0, 2) += 0.3;
                EXPECT_LT(nll(own, {2}, {censored}), l0);
            }
        }
    }
}

TEST(RiskScore, Bounds) {
    const std::vector<double> low(8, -40.0), high(8, 40.0);
    EXPECT_NEAR(risk_score(low), -8.0, 1e-12);
    EXPECT_NEAR(risk_score(high), 0.0, 1e-12);
}

TEST(RiskScore, MonotoneInEveryHazard) {
    Rng rng = make_rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = normal_tensor(rng, {1, 6}, 1.5);
        const std::vector<double> base(x.data().begin(), x.data().end());
        for (std::size_t j = 0; j < 6; ++j) {
            std::vector<double> up = base;
            up[j] += 0.5;
            EXPECT_GE(risk_score(up), risk_score(base));
        }
    }
}

TEST(Labels, TaskLabelsFollowExclusion) {
    PatientRecord p;
    p.time_months = 20;
    p.censored = true;
    EXPECT_TRUE(task_label(p, Task::Survival).has_value());
    EXPECT_FALSE(task_label(p, Task::Mortality3y).has_value());
    p.censored = false;
    EXPECT_EQ(task_label(p, Task::Mortality3y)->binary, 1);
    EXPECT_EQ(parse_task(task_name(Task::Recurrence3y)), Task::Recurrence3y);
    EXPECT_THROW(parse_task("overall"), InvalidConfig);
    EXPECT_EQ(parse_mode("ft"), AdaptationMode::FullFineTune);
}

TEST(DropoutAvailability, KeepsSubsetAndOneModality) {
    for (std::size_t i = 0; i < 500; ++i) {
        const Availability a{true, i % 2 == 0, true};
        const Availability d = dropout_availability(a, 0.7, 9, i, i % 7);
        EXPECT_GE(count(d), 1u);
        for (std::size_t m = 0; m < 3; ++m) EXPECT_TRUE(!d[m] || a[m]);
        EXPECT_EQ(d, dropout_availability(a, 0.7, 9, i, i % 7));
    }
}

TEST(Predict, OverrideRemovesModalitiesAndSkipsEmpty) {
    std::vector<PatientRecord> ps(3);
    ps[0].availability = {true, true, true};
    ps[1].availability = {false, true, false};
    ps[2].availability = {true, false, true};
    std::vector<Availability> seen;
    const FeatureFn fn = [&](std::size_t i, const Availability& use) {
        seen.push_back(use);
        return Tensor::from_rows({{static_cast<double>(i), static_cast<double>(count(use))}});
    };
    HeadState head;
    head.task = Task::Mortality3y;
    Rng rng = make_rng(1);
    head.linear = nn::Linear(2, 1, rng);
    head.linear.weight.value = Tensor::from_rows({{1.0}, {10.0}});
    head.linear.bias.value = Tensor::from_rows({{0.0}});
    const std::vector<std::size_t> idx{0, 1, 2};

    std::vector<std::size_t> kept;
    const std::vector<double> full = predict(head, fn, ps, idx, kAllAvailable, &kept);
    EXPECT_EQ(kept, idx);
    EXPECT_EQ(full, (std::vector<double>{30.0, 11.0, 22.0}));

    seen.clear();
    const std::vector<double> oi = predict(head, fn, ps, idx, {true, false, false}, &kept);
    EXPECT_EQ(kept, (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(oi, (std::vector<double>{10.0, 12.0}));
    for (const Availability& a : seen) EXPECT_EQ(a, (Availability{true, false, false}));
}

TEST(LinearProbe, LearnsPlantedSignal) { EXPECT_GT(latent_probe_c_index(1.0), 0.60); }

TEST(LinearProbe, NullSignalStaysNearChance) {
    const double c = latent_probe_c_index(0.0);
    EXPECT_GE(c, 0.45);
    EXPECT_LE(c, 0.55);
}
