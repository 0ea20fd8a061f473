#include "prime/autodiff.hpp"
#include "prime/error.hpp"
#include "prime/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

using namespace prime;
using namespace prime::ad;

namespace {

Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data()) v = n(rng);
    return t;
}

// Contract an op output against a fixed random weight so every output entry
// contributes a distinct gradient.
Var contract(Tape& t, Var y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum_all(mul(y, t.constant(random_matrix(rng, y.rows(), y.cols()))));
}

} // namespace

TEST(Matmul, IdentityTimesIdentity) {
    Tape t;
    Var i = t.constant(Tensor::from_rows({{1, 0}, {0, 1}}));
    const Tensor& out = matmul(i, i).value();
    EXPECT_EQ(out(0, 0), 1.0);
    EXPECT_EQ(out(0, 1), 0.0);
    EXPECT_EQ(out(1, 0), 0.0);
    EXPECT_EQ(out(1, 1), 1.0);
}

TEST(Matmul, HandArithmetic) {
    Tape t;
    Var a = t.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
    Var b = t.constant(Tensor::from_rows({{1}, {1}}));
    const Tensor& out = matmul(a, b).value();
    ASSERT_EQ(out.rows(), 2u);
    ASSERT_EQ(out.cols(), 1u);
    EXPECT_EQ(out(0, 0), 3.0);
    EXPECT_EQ(out(1, 0), 7.0);
}

TEST(Matmul, ShapeMismatchThrows) {
    Tape t;
    Var a = t.constant(Tensor::matrix(2, 3));
    Var b = t.constant(Tensor::matrix(2, 3));
    EXPECT_THROW(matmul(a, b), ShapeMismatch);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(11);
    Parameter a(random_matrix(rng, 5, 4));
    Parameter b(random_matrix(rng, 4, 3));
    auto report = grad_check([&](Tape& t) { return contract(t, matmul(t.param(a), t.param(b)), 5); },
                             {{"a", &a}, {"b", &b}});
    EXPECT_LT(report.max_rel_err, 1e-6);
}

TEST(Softmax, UniformOnEqualLogits) {
    Tape t;
    const Tensor& out = softmax_rows(t.constant(Tensor::from_rows({{0, 0, 0}}))).value();
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out(0, c), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    Tape t;
    const Tensor& out = softmax_rows(t.constant(Tensor::from_rows({{1000, 0}}))).value();
    EXPECT_DOUBLE_EQ(out(0, 0), 1.0);
    EXPECT_GE(out(0, 1), 0.0);
    EXPECT_LT(out(0, 1), 1e-300);
}

TEST(Softmax, NllGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    Parameter x(random_matrix(rng, 4, 5));
    const std::vector<std::size_t> target{0, 3, 2, 4};
    auto report = grad_check(
        [&](Tape& t) {
            Var p = softmax_rows(t.param(x));
            // NLL built from the softmax output, not the fused op.
            Tensor pick = Tensor::matrix(4, 5);
            for (std::size_t r = 0; r < 4; ++r) pick(r, target[r]) = -1.0;
            Var logp = log_softmax_rows(t.param(x));
            return add(sum_all(mul(logp, t.constant(pick))), scale(sum_all(p), 0.0));
        },
        {{"x", &x}});
    EXPECT_LT(report.max_rel_err, 1e-6);
}

TEST(Softmax, RowsSumToOneAndArePositive) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        Tape t;
        const Tensor& p = softmax_rows(t.constant(random_matrix(rng, 3, 7, 5.0))).value();
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < p.cols(); ++c) {
                EXPECT_GT(p(r, c), 0.0);
                s += p(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    Tape t;
    Var x = t.constant(Tensor::from_rows({{2.5, 2.5, 2.5, 2.5}}));
    Var g = t.constant(Tensor::from_rows({{1, 1, 1, 1}}));
    Var b = t.constant(Tensor::from_rows({{0, 0, 0, 0}}));
    const Tensor& out = layer_norm_rows(x, g, b, 1e-5).value();
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ClosedFormStandardisation) {
    Tape t;
    Var x = t.constant(Tensor::from_rows({{1, 2, 3}}));
    Var g = t.constant(Tensor::from_rows({{1, 1, 1}}));
    Var b = t.constant(Tensor::from_rows({{0, 0, 0}}));
    const Tensor& out = layer_norm_rows(x, g, b, 0.0).value();
    // population std of {1,2,3} is sqrt(2/3)
    const double z = 1.0 / std::sqrt(2.0 / 3.0);
    EXPECT_NEAR(out(0, 0), -z, 1e-12);
    EXPECT_NEAR(out(0, 1), 0.0, 1e-12);
    EXPECT_NEAR(out(0, 2), z, 1e-12);
    EXPECT_NEAR(z, 1.2247, 1e-4);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(23);
    Parameter x(random_matrix(rng, 3, 6));
    Parameter g(random_matrix(rng, 1, 6));
    Parameter b(random_matrix(rng, 1, 6));
    auto report = grad_check(
        [&](Tape& t) { return contract(t, layer_norm_rows(t.param(x), t.param(g), t.param(b), 1e-5), 9); },
        {{"x", &x}, {"gamma", &g}, {"beta", &b}});
    EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(CrossAttention, SingleValidKeyReturnsItsValue) {
    std::mt19937_64 rng(5);
    Tape t;
    Var q = t.constant(random_matrix(rng, 4, 8));
    Var k = t.constant(random_matrix(rng, 3, 8));
    Var v = t.constant(random_matrix(rng, 3, 8));
    const std::vector<bool> mask_v{false, true, false};
    const bool mask[] = {false, true, false};
    const Tensor& out = cross_attention(q, k, v, 2, mask).value();
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out(r, c), v.value()(1, c), 1e-15);
}

TEST(CrossAttention, IdenticalKeysAverageValues) {
    std::mt19937_64 rng(6);
    Tape t;
    Tensor krow = random_matrix(rng, 1, 8);
    Tensor keys = Tensor::matrix(5, 8);
    for (std::size_t r = 0; r < 5; ++r) keys.mat().row(r) = krow.mat().row(0);
    Var q = t.constant(random_matrix(rng, 3, 8));
    Var v = t.constant(random_matrix(rng, 5, 8));
    const Tensor& out = cross_attention(q, t.constant(keys), v, 4).value();
    const auto mean = v.value().mat().colwise().mean();
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out(r, c), mean(c), 1e-14);
}

TEST(CrossAttention, MaskedKeysEquivalentToTruncation) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tape t;
        Tensor q = random_matrix(rng, 4, 8);
        Tensor k = random_matrix(rng, 6, 8);
        Tensor v = random_matrix(rng, 6, 8);
        bool mask[6];
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < 6; ++i) {
            mask[i] = (rng() % 3) != 0 || i == 0;
            if (mask[i]) keep.push_back(i);
        }
        Var qv = t.constant(q);
        Var masked = cross_attention(qv, t.constant(k), t.constant(v), 2, mask);
        Var kt = gather_rows(t.constant(k), keep);
        Var vt = gather_rows(t.constant(v), keep);
        Var truncated = cross_attention(qv, kt, vt, 2);
        for (std::size_t i = 0; i < masked.value().numel(); ++i)
            EXPECT_NEAR(masked.value()[i], truncated.value()[i], 1e-12);
    }
}

TEST(CrossAttention, AllKeysMaskedThrows) {
    Tape t;
    Var q = t.constant(Tensor::matrix(2, 4, 0.1));
    Var k = t.constant(Tensor::matrix(3, 4, 0.2));
    const bool mask[] = {false, false, false};
    EXPECT_THROW(cross_attention(q, k, k, 2, mask), AllKeysMasked);
}

TEST(CrossAttention, HeadsMustDivideModelDim) {
    Tape t;
    Var q = t.constant(Tensor::matrix(2, 6, 0.1));
    EXPECT_THROW(cross_attention(q, q, q, 4), ShapeMismatch);
}

TEST(GradCheck, QuadraticIsExact) {
    Parameter x(Tensor::from_rows({{0.3, -1.2, 2.0, 0.7}}));
    auto report = grad_check([&](Tape& t) { return scale(sum_all(mul(t.param(x), t.param(x))), 0.5); },
                             {{"x", &x}});
    EXPECT_LT(report.max_rel_err, 1e-8);
}

TEST(GradCheck, NonFiniteLossIsReported) {
    Parameter x(Tensor::from_rows({{0.0, 0.0}}));
    EXPECT_THROW(grad_check([&](Tape& t) { return sum_all(l2_normalize_rows(t.param(x))); }, {{"x", &x}}),
                 ZeroVector);
    Parameter y(Tensor::from_rows({{1e300, 1e300}}));
    EXPECT_THROW(grad_check([&](Tape& t) { return sum_all(mul(t.param(y), t.param(y))); }, {{"y", &y}}),
                 NonFiniteLoss);
}

TEST(Tape, ParameterAppearsOnceAndAccumulates) {
    Parameter x(Tensor::from_rows({{2.0}}));
    Tape t;
    Var a = t.param(x);
    Var b = t.param(x);
    EXPECT_EQ(a.id, b.id);
    t.backward(mul(a, b));
    EXPECT_DOUBLE_EQ(x.grad[0], 4.0);
}

TEST(Tape, FrozenParameterReceivesNoGradient) {
    Parameter x(Tensor::from_rows({{2.0}}));
    Parameter w(Tensor::from_rows({{3.0}}));
    w.trainable = false;
    Tape t;
    t.backward(mul(t.param(x), t.param(w)));
    EXPECT_DOUBLE_EQ(x.grad[0], 3.0);
    EXPECT_DOUBLE_EQ(w.grad[0], 0.0);
}

TEST(Tape, ForwardIsBitIdentical) {
    auto run = [] {
        std::mt19937_64 rng(99);
        Tape t;
        Var q = t.constant(random_matrix(rng, 4, 8));
        Var k = t.constant(random_matrix(rng, 9, 8));
        Var g = t.constant(Tensor::matrix(1, 8, 1.0));
        Var b = t.constant(Tensor::matrix(1, 8, 0.0));
        return gelu(layer_norm_rows(cross_attention(q, k, k, 4), g, b, 1e-5)).value().vec();
    };
    EXPECT_EQ(run(), run());
}

// Every differentiable op, randomized shapes, central differences.
TEST(GradCheckProperty, EveryOpOnRandomShapes) {
    using OpCase = std::function<Var(Tape&, std::vector<Parameter>&)>;
    struct Case {
        const char* name;
        std::function<std::vector<Parameter>(std::mt19937_64&, std::size_t, std::size_t)> make;
        OpCase op;
    };
    auto mats = [](std::initializer_list<std::pair<int, int>> init) {
        std::vector<std::pair<int, int>> dims(init);
        return [dims](std::mt19937_64& rng, std::size_t r, std::size_t c) {
            std::vector<Parameter> ps;
            for (auto [dr, dc] : dims) {
                const std::size_t rr = dr < 0 ? r : static_cast<std::size_t>(dr);
                const std::size_t cc = dc < 0 ? c : static_cast<std::size_t>(dc);
                ps.emplace_back(random_matrix(rng, rr, cc));
            }
            return ps;
        };
    };
    const std::vector<std::size_t> tgt{0, 1, 0, 2, 1, 0};
    std::vector<Case> cases{
        {"matmul", mats({{-1, -1}, {-2, 3}}),
         [](Tape& t, auto& p) {
             Var b = t.param(p[1]);
             return matmul(t.param(p[0]), slice_rows(b, 0, p[0].value.cols()));
         }},
        {"matmul_nt", mats({{-1, -1}, {2, -1}}), [](Tape& t, auto& p) { return matmul_nt(t.param(p[0]), t.param(p[1])); }},
        {"transpose", mats({{-1, -1}}), [](Tape& t, auto& p) { return transpose(t.param(p[0])); }},
        {"add", mats({{-1, -1}, {-1, -1}}), [](Tape& t, auto& p) { return add(t.param(p[0]), t.param(p[1])); }},
        {"sub", mats({{-1, -1}, {-1, -1}}), [](Tape& t, auto& p) { return sub(t.param(p[0]), t.param(p[1])); }},
        {"mul", mats({{-1, -1}, {-1, -1}}), [](Tape& t, auto& p) { return mul(t.param(p[0]), t.param(p[1])); }},
        {"scale", mats({{-1, -1}}), [](Tape& t, auto& p) { return scale(t.param(p[0]), -1.7); }},
        {"add_row", mats({{-1, -1}, {1, -1}}), [](Tape& t, auto& p) { return add_row(t.param(p[0]), t.param(p[1])); }},
        {"mul_col", mats({{-1, -1}, {-1, 1}}), [](Tape& t, auto& p) { return mul_col(t.param(p[0]), t.param(p[1])); }},
        {"gelu", mats({{-1, -1}}), [](Tape& t, auto& p) { return gelu(t.param(p[0])); }},
        {"sigmoid", mats({{-1, -1}}), [](Tape& t, auto& p) { return sigmoid(t.param(p[0])); }},
        {"log_sigmoid", mats({{-1, -1}}), [](Tape& t, auto& p) { return log_sigmoid(t.param(p[0])); }},
        {"softmax_rows", mats({{-1, -1}}), [](Tape& t, auto& p) { return softmax_rows(t.param(p[0])); }},
        {"log_softmax_rows", mats({{-1, -1}}), [](Tape& t, auto& p) { return log_softmax_rows(t.param(p[0])); }},
        {"layer_norm_rows", mats({{-1, -1}, {1, -1}, {1, -1}}),
         [](Tape& t, auto& p) { return layer_norm_rows(t.param(p[0]), t.param(p[1]), t.param(p[2]), 1e-5); }},
        {"l2_normalize_rows", mats({{-1, -1}}), [](Tape& t, auto& p) { return l2_normalize_rows(t.param(p[0])); }},
        {"mean_rows", mats({{-1, -1}}), [](Tape& t, auto& p) { return mean_rows(t.param(p[0])); }},
        {"mean_all", mats({{-1, -1}}), [](Tape& t, auto& p) { return mean_all(t.param(p[0])); }},
        {"block_mean_cols", mats({{-1, 6}}), [](Tape& t, auto& p) { return block_mean_cols(t.param(p[0]), 3); }},
        {"reshape", mats({{-1, 4}}),
         [](Tape& t, auto& p) { return reshape(t.param(p[0]), p[0].value.rows() * 2, 2); }},
        {"concat_rows", mats({{-1, -1}, {2, -1}}),
         [](Tape& t, auto& p) {
             Var v[] = {t.param(p[0]), t.param(p[1])};
             return concat_rows(v);
         }},
        {"concat_cols", mats({{-1, -1}, {-1, 2}}),
         [](Tape& t, auto& p) {
             Var v[] = {t.param(p[0]), t.param(p[1])};
             return concat_cols(v);
         }},
        {"slice_cols", mats({{-1, 5}}), [](Tape& t, auto& p) { return slice_cols(t.param(p[0]), 1, 3); }},
        {"gather_scatter", mats({{-1, -1}}),
         [](Tape& t, auto& p) {
             std::vector<std::size_t> idx{0, static_cast<std::size_t>(p[0].value.rows() - 1), 0};
             return scatter_rows(gather_rows(t.param(p[0]), idx), idx, p[0].value.rows());
         }},
        {"cross_entropy_rows", mats({{6, -1}}),
         [&tgt](Tape& t, auto& p) {
             std::vector<std::size_t> tg(tgt);
             for (auto& x : tg) x %= p[0].value.cols();
             return cross_entropy_rows(t.param(p[0]), tg);
         }},
        {"bce_with_logits", mats({{-1, 1}}),
         [](Tape& t, auto& p) {
             std::vector<double> y(p[0].value.rows());
             for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<double>(i % 2);
             return bce_with_logits(t.param(p[0]), y);
         }},
        {"renormalize_selected", mats({{-1, -1}}),
         [](Tape& t, auto& p) {
             Tensor keep = Tensor::matrix(p[0].value.rows(), p[0].value.cols());
             for (std::size_t r = 0; r < keep.rows(); ++r) {
                 keep(r, r % keep.cols()) = 1.0;
                 keep(r, (r + 1) % keep.cols()) = 1.0;
             }
             return renormalize_selected(softmax_rows(t.param(p[0])), keep);
         }},
        {"cross_attention", mats({{-1, 4}, {5, 4}, {5, 4}}),
         [](Tape& t, auto& p) {
             const bool mask[] = {true, false, true, true, false};
             return cross_attention(t.param(p[0]), t.param(p[1]), t.param(p[2]), 2, mask);
         }},
    };

    std::mt19937_64 rng(2024);
    int trials = 0;
    double worst = 0.0;
    std::string worst_case;
    for (int round = 0; round < 4; ++round) {
        for (const auto& c : cases) {
            const std::size_t r = 2 + rng() % 4;
            const std::size_t cc = 2 + rng() % 4;
            std::vector<Parameter> ps = c.make(rng, r, cc);
            std::vector<NamedParameter> named;
            for (std::size_t i = 0; i < ps.size(); ++i) named.emplace_back(std::to_string(i), &ps[i]);
            const auto seed = rng();
            auto report = grad_check([&](Tape& t) { return contract(t, c.op(t, ps), seed); }, named);
            ++trials;
            if (report.max_rel_err > worst) {
                worst = report.max_rel_err;
                worst_case = c.name;
            }
            EXPECT_LT(report.max_rel_err, 1e-4) << c.name << " round " << round << " param " << report.worst_parameter << " a=" << report.per_parameter[std::stoul(report.worst_parameter)].analytic << " n=" << report.per_parameter[std::stoul(report.worst_parameter)].numeric;
        }
    }
    EXPECT_GE(trials, 100);
    RecordProperty("worst_op", worst_case);
}
