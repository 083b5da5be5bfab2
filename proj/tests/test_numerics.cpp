#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gcg/autodiff.hpp"
#include "gcg/errors.hpp"
#include "gcg/gradcheck.hpp"
#include "gcg/gradcheck_suite.hpp"
#include "gcg/ops.hpp"
#include "gcg/optim.hpp"
#include "gcg/tensor.hpp"

using namespace gcg;
using ad::Tape;

TEST(Tensor, RejectsZeroExtent) {
    EXPECT_THROW(TensorD({2, 0}), ShapeError);
    EXPECT_THROW(TensorD({3}, std::vector<double>{1, 2}), ShapeError);
}

TEST(Tensor, RankOneIsARow) {
    const TensorD v = TensorD::vector({1, 2, 3});
    EXPECT_EQ(v.rows(), 1u);
    EXPECT_EQ(v.cols(), 3u);
}

TEST(Matmul, IdentityAndHandExample) {
    Tape<double> t;
    auto I = t.constant(TensorD::matrix({{1, 0}, {0, 1}}));
    auto B = t.constant(TensorD::matrix({{2, -1}, {0.5, 7}}));
    EXPECT_EQ(ad::matmul(I, B).value(), B.value());
    auto A = t.constant(TensorD::matrix({{1, 2}, {3, 4}}));
    auto ones = t.constant(TensorD::matrix({{1}, {1}}));
    EXPECT_EQ(ad::matmul(A, ones).value(), TensorD::matrix({{3}, {7}}));
}

TEST(Matmul, ShapeErrorNamesBothExtents) {
    Tape<double> t;
    auto a = t.constant(TensorD({2, 3}));
    auto b = t.constant(TensorD({4, 5}));
    try {
        ad::matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    std::mt19937_64 rng(11);
    const TensorD A = gc::random_tensor({3, 3}, rng), B = gc::random_tensor({3, 3}, rng);
    Tape<double> t;
    auto a = t.variable(A);
    auto loss = ad::sum(ad::matmul(a, t.constant(B)));
    t.backward(loss);
    const TensorD numeric = finite_diff_grad(
        [&](const TensorD& x) {
            Tape<double> u;
            return ad::sum(ad::matmul(u.constant(x), u.constant(B))).value().item();
        },
        A);
    const auto cmp = compare_gradients(t.grad(a.id), numeric, 1e-6, 1e-9);
    EXPECT_TRUE(cmp.ok) << cmp.max_rel_error;
}

TEST(Pointwise, KnownValues) {
    Tape<double> t;
    EXPECT_DOUBLE_EQ(ad::sigmoid(t.constant(TensorD::scalar(0))).value().item(), 0.5);
    EXPECT_DOUBLE_EQ(ad::exp(t.constant(TensorD::scalar(0))).value().item(), 1.0);
    EXPECT_DOUBLE_EQ(ad::relu(t.constant(TensorD::vector({-1, 2}))).value()[0], 0.0);
}

TEST(Pointwise, SigmoidDerivativeAtOnePointThree) {
    Tape<double> t;
    auto x = t.variable(TensorD::scalar(1.3));
    t.backward(ad::sigmoid(x));
    const double numeric = finite_diff_grad(
        [](const TensorD& v) {
            Tape<double> u;
            return ad::sigmoid(u.constant(v)).value().item();
        },
        TensorD::scalar(1.3))[0];
    EXPECT_NEAR(t.grad(x.id)[0], numeric, 1e-6);
}

TEST(Pointwise, ExpAtSinglePrecisionNarrowsFromDouble) {
    Tape<float> t;
    EXPECT_NEAR(ad::exp(t.constant(TensorF::scalar(10.0f))).value().item(), std::exp(10.0), 1e-2);
    // exp(100) overflows float, which is a non-finite result.
    EXPECT_THROW(ad::exp(t.constant(TensorF::scalar(100.0f))), NumericError);
}

TEST(Pointwise, NonFiniteResultIsNumericError) {
    Tape<double> t;
    EXPECT_THROW(ad::log(t.constant(TensorD::scalar(0.0))), NumericError);
}

TEST(Softmax, KnownRows) {
    Tape<double> t;
    const auto& a = ad::softmax_rows(t.constant(TensorD::matrix({{0, 0, 0}}))).value();
    for (double v : a.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    const auto& b = ad::softmax_rows(t.constant(TensorD::matrix({{1000, 0}}))).value();
    EXPECT_EQ(b[0], 1.0);
    EXPECT_EQ(b[1], 0.0);
    const auto& c = ad::softmax_rows(t.constant(TensorD::matrix({{1, 2, 3}}))).value();
    EXPECT_NEAR(c[0], 0.09003, 1e-5);
    EXPECT_NEAR(c[1], 0.24473, 1e-5);
    EXPECT_NEAR(c[2], 0.66524, 1e-5);
}

TEST(Softmax, MaskedEntriesAreExactlyZero) {
    Tape<double> t;
    const std::vector<bool> mask{true, false, true, false, true, true};
    const auto& y = ad::softmax_rows(t.constant(TensorD::matrix({{1, 5, 2}, {9, 1, 1}})), &mask).value();
    EXPECT_EQ(y[1], 0.0);
    EXPECT_EQ(y[3], 0.0);
    EXPECT_NEAR(y[0] + y[2], 1.0, 1e-12);
    EXPECT_NEAR(y[4] + y[5], 1.0, 1e-12);
}

TEST(Softmax, FullyMaskedRowIsInvalid) {
    Tape<double> t;
    const std::vector<bool> mask{true, true, false, false};
    EXPECT_THROW(ad::softmax_rows(t.constant(TensorD::matrix({{1, 2}, {3, 4}})), &mask), InvalidMaskError);
}

TEST(Softmax, RowsSumToOneOnRandomInputs) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
        Tape<double> t;
        const auto& y = ad::softmax_rows(t.constant(gc::random_tensor({4, 7}, rng, -30, 30))).value();
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (double v : y.row(r)) {
                EXPECT_GE(v, 0.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(LayerNorm, ConstantAndSymmetricRows) {
    Tape<double> t;
    auto gain = t.constant(TensorD::vector({1, 1}));
    auto bias = t.constant(TensorD::vector({0, 0}));
    const auto& z = ad::layer_norm(t.constant(TensorD::matrix({{3, 3}})), gain, bias).value();
    EXPECT_EQ(z[0], 0.0);
    EXPECT_EQ(z[1], 0.0);
    const auto& y = ad::layer_norm(t.constant(TensorD::matrix({{1, -1}})), gain, bias).value();
    EXPECT_NEAR(y[0], 1.0, 1e-4);
    EXPECT_NEAR(y[1], -1.0, 1e-4);
}

TEST(LayerNorm, NormalizedMoments) {
    std::mt19937_64 rng(9);
    Tape<double> t;
    const std::size_t c = 16;
    auto y = ad::layer_norm(t.constant(gc::random_tensor({5, c}, rng, -4, 4)), t.constant(TensorD({c}, 1.0)),
                            t.constant(TensorD({c})));
    for (std::size_t r = 0; r < 5; ++r) {
        double mean = 0, var = 0;
        for (double v : y.value().row(r)) mean += v / double(c);
        for (double v : y.value().row(r)) var += (v - mean) * (v - mean) / double(c);
        EXPECT_LT(std::abs(mean), 1e-6);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(L2Normalize, ZeroRowIsDegenerate) {
    Tape<double> t;
    EXPECT_THROW(ad::l2_normalize_rows(t.constant(TensorD::matrix({{1, 0}, {0, 0}}))), DegenerateInputError);
}

TEST(CrossEntropy, UniformLogitsAndBadTarget) {
    Tape<double> t;
    auto logits = t.constant(TensorD::matrix({{0, 0, 0, 0, 0}}));
    EXPECT_NEAR(ad::cross_entropy(logits, 2).value().item(), std::log(5.0), 1e-12);
    EXPECT_THROW(ad::cross_entropy(logits, 5), ContractError);
}

// Every differentiable op against central differences, 20+ random instances each.
TEST(Gradients, EveryOpMatchesFiniteDifferences) {
    GradcheckOptions opt;
    opt.instances = 25;
    std::mt19937_64 rng(2024);
    for (const auto& c : gc::op_cases()) {
        CheckResult res{"op", c.name};
        for (std::size_t i = 0; i < opt.instances; ++i) {
            auto [inputs, build] = c.draw(rng);
            gc::check_instance(res, inputs, build, opt, rng);
        }
        EXPECT_EQ(res.instances, 25u);
        EXPECT_TRUE(res.ok) << c.name << " max rel error " << res.max_rel_error;
    }
}

TEST(Tape, InputsPrecedeNodes) {
    std::mt19937_64 rng(1);
    Tape<double> t;
    auto x = t.variable(gc::random_tensor({3, 4}, rng));
    auto w = t.variable(gc::random_tensor({4, 2}, rng));
    auto y = ad::sum(ad::gelu(ad::matmul(x, w)));
    for (std::size_t id = 0; id < t.size(); ++id)
        for (std::size_t in : t.node(id).inputs) EXPECT_LT(in, id);
    t.backward(y);
    EXPECT_TRUE(t.has_grad(x.id));
}

TEST(Backward, NonScalarLossIsContractError) {
    Tape<double> t;
    auto x = t.variable(TensorD::vector({1, 2}));
    EXPECT_THROW(t.backward(ad::scale(x, 2.0)), ContractError);
}

TEST(Backward, LinearAndQuadraticCases) {
    ParamStore<double> store;
    store.add("theta", TensorD::vector({3, 3, 3}));
    {
        Tape<double> t;
        backward(ad::sum(store.bind(t, "theta")), store);
    }
    for (double g : store.grad("theta").data()) EXPECT_EQ(g, 1.0);
    store.zero_grad();
    {
        Tape<double> t;
        auto th = store.bind(t, "theta");
        backward(ad::sum(ad::mul(th, th)), store);
    }
    for (double g : store.grad("theta").data()) EXPECT_EQ(g, 6.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
    ParamStore<double> store;
    store.add("theta", TensorD::vector({1, 2}));
    for (int i = 0; i < 3; ++i) {
        Tape<double> t;
        backward(ad::sum(store.bind(t, "theta")), store);
    }
    for (double g : store.grad("theta").data()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, TwoLayerNetworkAgreesWithFiniteDifferences) {
    std::mt19937_64 rng(77);
    const TensorD X = gc::random_tensor({5, 4}, rng), W1 = gc::random_tensor({4, 6}, rng),
                  W2 = gc::random_tensor({6, 1}, rng);
    auto net = [&](Tape<double>& t, ad::Var<double> w1) {
        return ad::sum(ad::matmul(ad::gelu(ad::matmul(t.constant(X), w1)), t.constant(W2)));
    };
    Tape<double> t;
    auto w1 = t.variable(W1);
    t.backward(net(t, w1));
    const TensorD numeric = finite_diff_grad(
        [&](const TensorD& w) {
            Tape<double> u;
            return net(u, u.constant(w)).value().item();
        },
        W1);
    EXPECT_TRUE(compare_gradients(t.grad(w1.id), numeric, 1e-5, 1e-9).ok);
}

TEST(FiniteDiff, LinearAndQuadratic) {
    const TensorD x = TensorD::vector({0.3, -2, 5});
    const TensorD g = finite_diff_grad(
        [](const TensorD& v) {
            double s = 0;
            for (double e : v.data()) s += e;
            return s;
        },
        x);
    for (double e : g.data()) EXPECT_NEAR(e, 1.0, 1e-9);
    const TensorD q = finite_diff_grad([](const TensorD& v) { return v[0] * v[0]; }, TensorD::scalar(2.0));
    EXPECT_NEAR(q[0], 4.0, 1e-8);
}

TEST(AdamW, ZeroGradientZeroDecayIsIdentity) {
    ParamStore<double> store;
    store.add("w", TensorD::vector({1.5, -2}));
    store.zero_grad();
    adamw_step(store, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.0});
    EXPECT_EQ(store.value("w"), TensorD::vector({1.5, -2}));
    EXPECT_EQ(store.step(), 1u);
}

TEST(AdamW, OneStepClosedForm) {
    ParamStore<double> store;
    store.add("w", TensorD::scalar(1.0));
    store.grad("w")[0] = 1.0;
    adamw_step(store, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.0});
    EXPECT_NEAR(store.value("w")[0], 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)), 1e-12);
}

TEST(AdamW, DecayOnly) {
    ParamStore<double> store;
    store.add("w", TensorD::scalar(1.0));
    store.zero_grad();
    adamw_step(store, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.01});
    EXPECT_NEAR(store.value("w")[0], 0.999, 1e-15);
}

TEST(AdamW, StepCounterIncrementsByOne) {
    ParamStore<float> store;
    store.add("w", TensorF::scalar(1.0f));
    for (int i = 1; i <= 4; ++i) {
        adamw_step(store, AdamWOptions{});
        EXPECT_EQ(store.step(), std::uint64_t(i));
    }
}

TEST(ParamStore, UnknownNameIsNotFound) {
    ParamStore<double> store;
    EXPECT_THROW(store.slot_of("missing"), NotFoundError);
}

TEST(Determinism, RepeatedForwardIsBitwiseIdentical) {
    std::mt19937_64 rng(3);
    const TensorD X = gc::random_tensor({6, 5}, rng);
    auto run = [&] {
        Tape<float> t;
        auto x = t.constant(X.cast<float>());
        return ad::softmax_rows(ad::gelu(ad::matmul(x, ad::transpose(x)))).value();
    };
    EXPECT_EQ(run(), run());
}
