#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "gcg/errors.hpp"
#include "gcg/gradcheck_suite.hpp"
#include "gcg/grounder.hpp"
#include "gcg/model.hpp"

using namespace gcg;
using TapeD = ad::Tape<double>;

namespace {

TensorD random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    TensorD t({r, c});
    for (auto& v : t.storage()) v = n(rng);
    return t;
}

struct Fixture {
    RunConfig cfg;
    Model<double> model;

    explicit Fixture(std::size_t layers = 2) {
        cfg.T = 8;
        cfg.K = 2;
        cfg.D_I = 8;
        cfg.D_G = 16;
        cfg.layers = layers;
        cfg.N_intra = 4;
        cfg.precision = PrecisionMode::FP64;
        model = make_model<double>(cfg, cfg.D_I);
    }
};

std::vector<double> masks_for(std::vector<double> mu, double sigma, std::size_t T) {
    TapeD t;
    const std::size_t K = mu.size();
    TensorD m({K}, std::move(mu));
    return gaussian_masks(t.constant(m), sigma, T).value().storage();
}

std::vector<double> p_for(std::vector<double> mu, double sigma, std::size_t T) {
    TapeD t;
    const std::size_t K = mu.size();
    TensorD m({K}, std::move(mu));
    return combine_masks(gaussian_masks(t.constant(m), sigma, T)).value().storage();
}

} // namespace

TEST(GaussianMasks, PeakValue) {
    const auto g = masks_for({0.5}, 0.2, 32);
    EXPECT_NEAR(g[15], 1.994711, 1e-5);
    EXPECT_NEAR(g[15], 1.0 / (std::sqrt(2 * std::numbers::pi) * 0.2), 1e-12);
}

TEST(GaussianMasks, SymmetricAroundCenter) {
    const auto g = masks_for({0.5}, 0.2, 32);
    for (std::size_t d = 1; d < 16; ++d) EXPECT_NEAR(g[15 - d], g[15 + d], 1e-9) << d;
}

TEST(GaussianMasks, WiderSigmaHalvesPeakAndRaisesTail) {
    const auto narrow = masks_for({0.5}, 0.2, 32);
    const auto wide = masks_for({0.5}, 0.4, 32);
    EXPECT_NEAR(wide[15], narrow[15] / 2, 1e-12);
    EXPECT_GT(wide[31] / wide[15], narrow[31] / narrow[15]);
}

TEST(GaussianMasks, RowMaximumAtNearestFrame) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.001, 0.999);
    for (int trial = 0; trial < 100; ++trial) {
        const double mu = u(rng);
        const auto g = masks_for({mu}, 0.1, 20);
        std::size_t best = 0;
        for (std::size_t t = 1; t < 20; ++t)
            if (std::abs((t + 1) / 20.0 - mu) < std::abs((best + 1) / 20.0 - mu)) best = t;
        EXPECT_EQ(std::max_element(g.begin(), g.end()) - g.begin(), std::ptrdiff_t(best)) << mu;
        for (double v : g) EXPECT_GT(v, 0.0);
    }
}

TEST(CombineMasks, SingleCenteredMask) {
    const auto p = p_for({0.5}, 0.2, 32);
    EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin() + 1, 16);
    EXPECT_EQ(p[15], 1.0);
    EXPECT_EQ(p[31], 0.0);
}

TEST(CombineMasks, MinZeroMaxOne) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = p_for({u(rng), u(rng), u(rng)}, 0.2, 16);
        EXPECT_EQ(*std::min_element(p.begin(), p.end()), 0.0);
        EXPECT_EQ(*std::max_element(p.begin(), p.end()), 1.0);
    }
}

TEST(CombineMasks, TwoSeparatedPeaks) {
    const auto p = p_for({0.25, 0.75}, 0.05, 32);
    std::vector<std::size_t> maxima;
    for (std::size_t t = 0; t < 32; ++t) {
        const bool left = t == 0 || p[t] > p[t - 1];
        const bool right = t == 31 || p[t] > p[t + 1];
        if (left && right) maxima.push_back(t + 1);
    }
    EXPECT_EQ(maxima, (std::vector<std::size_t>{8, 24}));
}

TEST(CombineMasks, FlatCurveIsOneHalfWithNoGradient) {
    TapeD t;
    auto g = t.variable(TensorD({2, 4}, 0.7));
    auto p = combine_masks(g);
    for (double v : p.value().storage()) EXPECT_EQ(v, 0.5);
    t.backward_from(p, TensorD({4}, 1.0));
    if (t.has_grad(g.id))
        for (double v : t.grad(g.id).storage()) EXPECT_EQ(v, 0.0);
}

TEST(CombineMasks, TopKAtNearestFramesForSeparatedCenters) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        // Four centers at least 0.2 apart, sigma 0.05.
        std::uniform_real_distribution<double> jitter(-0.04, 0.04);
        std::vector<double> mu = {0.12 + jitter(rng), 0.37 + jitter(rng), 0.62 + jitter(rng), 0.87 + jitter(rng)};
        const std::size_t T = 32;
        const auto p = p_for(mu, 0.05, T);
        std::vector<std::size_t> expected;
        for (double m : mu) {
            std::size_t best = 1;
            for (std::size_t t = 2; t <= T; ++t)
                if (std::abs(double(t) / T - m) < std::abs(double(best) / T - m)) best = t;
            expected.push_back(best);
        }
        EXPECT_EQ(top_k_timestamps(std::span<const double>(p), 4), expected);
    }
}

TEST(PoolAndPredict, ZeroHeadGivesOneHalf) {
    Fixture f;
    f.model.params.value("head.weight").fill(0.0);
    f.model.params.value("head.bias").fill(0.0);
    TapeD t;
    BoundParams<double> P(f.model.params, t);
    const auto mu = pool_and_predict_centers(t.constant(random_matrix(8, 16, 1)), P);
    for (double v : mu.value().storage()) EXPECT_EQ(v, 0.5);
}

TEST(PoolAndPredict, IdenticalRowsPoolToThatRow) {
    Fixture f;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n;
    for (auto& v : f.model.params.value("pool.query").storage()) v = n(rng);
    const TensorD row = random_matrix(1, 16, 3);
    TensorD M({8, 16});
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t j = 0; j < 16; ++j) M.at(t, j) = row[j];
    TapeD t;
    BoundParams<double> P(f.model.params, t);
    const auto mu = pool_and_predict_centers(t.constant(M), P).value();
    const auto expected = pool_and_predict_centers(t.constant(row), P).value();
    for (std::size_t k = 0; k < mu.size(); ++k) EXPECT_NEAR(mu[k], expected[k], 1e-12);
}

TEST(PoolAndPredict, LargeBiasSaturatesBelowOne) {
    Fixture f;
    f.model.params.value("head.weight").fill(0.0);
    f.model.params.value("head.bias").fill(20.0);
    TapeD t;
    BoundParams<double> P(f.model.params, t);
    const auto mu = pool_and_predict_centers(t.constant(random_matrix(8, 16, 4)), P).value();
    for (double v : mu.storage()) {
        EXPECT_GE(v, 1.0 - 1e-8);
        EXPECT_LT(v, 1.0);
    }
}

TEST(EmbedInputs, PositionOnlyOnVisualRows) {
    Fixture f;
    TapeD t;
    BoundParams<double> P(f.model.params, t);
    const TensorD frames({8, 8}), question({4, 8});
    const auto m = embed_inputs(t.constant(frames), t.constant(question), P, 64).value();
    ASSERT_EQ(m.extents(), (Extents{12, 16}));
    const auto& pos = f.model.params.value("embed.pos");
    const auto& tv = f.model.params.value("embed.type_visual");
    const auto& tt = f.model.params.value("embed.type_text");
    for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_DOUBLE_EQ(m.at(3, j), pos.at(3, j) + tv[j]);
        EXPECT_DOUBLE_EQ(m.at(9, j), tt[j]);
        EXPECT_DOUBLE_EQ(m.at(10, j), tt[j]);
    }
}

TEST(EmbedInputs, TooManyFramesIsCapacityError) {
    Fixture f;
    TapeD t;
    BoundParams<double> P(f.model.params, t);
    EXPECT_THROW(embed_inputs(t.constant(TensorD({65, 8})), t.constant(TensorD({4, 8})), P, 64), CapacityError);
}

TEST(Encode, ZeroLayersIsIdentity) {
    Fixture f(0);
    TapeD t;
    BoundParams<double> P(f.model.params, t);
    const TensorD m = random_matrix(12, 16, 6);
    const auto out = encode(t.constant(m), std::vector<bool>(12, true), 8, P, 0, 4).value();
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(out.at(r, j), m.at(r, j));
}

TEST(Encode, PaddedQuestionValuesDoNotMatter) {
    Fixture f;
    const TensorD frames = random_matrix(8, 8, 7);
    TensorD q1 = random_matrix(6, 8, 8), q2 = q1;
    for (std::size_t r = 4; r < 6; ++r)
        for (std::size_t j = 0; j < 8; ++j) q2.at(r, j) = 1000.0 * (r + j);
    std::vector<bool> mask = {true, true, true, true, false, false};
    auto run = [&](const TensorD& q) {
        TapeD t;
        BoundParams<double> P(f.model.params, t);
        return run_grounder(t.constant(frames), t.constant(q), mask, P, f.model.dims, 0.2).p.value();
    };
    EXPECT_EQ(run(q1), run(q2));
}

TEST(Grounder, CentersInsideUnitInterval) {
    Fixture f;
    for (std::uint64_t s = 0; s < 10; ++s) {
        TapeD t;
        BoundParams<double> P(f.model.params, t);
        const auto out = run_grounder(t.constant(random_matrix(8, 8, s)), t.constant(random_matrix(4, 8, 50 + s)),
                                      std::vector<bool>(4, true), P, f.model.dims, 0.2);
        for (double v : out.mu.value().storage()) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
        EXPECT_EQ(out.masks.value().extents(), (Extents{2, 8}));
    }
}

TEST(Grounder, EndToEndGradientMatchesFiniteDifferences) {
    Fixture f;
    std::mt19937_64 rng(21);
    // Non-zero pooling query so the attention pooling path is exercised.
    std::normal_distribution<double> n;
    for (auto& v : f.model.params.value("pool.query").storage()) v = n(rng);
    const TensorD frames = random_matrix(8, 8, 30), question = random_matrix(4, 8, 31);
    GradcheckOptions opt;
    auto& store = f.model.params;
    const auto res = gc::check_module(
        "grounder", store, gc::names_with_prefix(store, {"embed.", "enc", "pool.", "head."}), {frames, question},
        [&](TapeD&, const BoundParams<double>& P, const std::vector<ad::Var<double>>& in) {
            return run_grounder(in[0], in[1], std::vector<bool>(4, true), P, f.model.dims, 0.2).p;
        },
        opt, rng);
    EXPECT_TRUE(res.ok) << "max rel error " << res.max_rel_error;
    EXPECT_GT(res.entries, 1000u);
}
