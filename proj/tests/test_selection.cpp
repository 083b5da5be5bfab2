#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "gcg/errors.hpp"
#include "gcg/selection.hpp"

using namespace gcg;
using TapeD = ad::Tape<double>;

namespace {

TensorD perturbed(const std::vector<double>& p, std::size_t K, double eps, std::size_t n, std::uint64_t seed) {
    TapeD t;
    PerturbedTopKOptions opt{K, eps, n, seed};
    return perturbed_topk(t.constant(TensorD({p.size()}, p)), opt).value();
}

std::vector<double> random_distinct(std::size_t T, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> p(T);
    for (auto& v : p) v = u(rng);
    return p;
}

// Rank-ordered one-hot rows of the exact top-K.
TensorD hard_rows(const std::vector<double>& p, std::size_t K) {
    const auto idx = top_k_by_rank(std::span<const double>(p), K);
    TensorD out({K, p.size()});
    for (std::size_t k = 0; k < K; ++k) out.at(k, idx[k]) = 1.0;
    return out;
}

} // namespace

TEST(PerturbedTopK, VanishingNoiseIsExactHardTopK) {
    const std::vector<double> p = {0.3, 0.8, 0.1, 0.55, 0.9};
    EXPECT_EQ(perturbed(p, 3, 1e-6, 1, 7), hard_rows(p, 3));
}

TEST(PerturbedTopK, VanishingNoiseMatchesHardOn100RandomInputs) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t T = 4 + trial % 29;
        const std::size_t K = 1 + trial % 4;
        const auto p = random_distinct(T, rng);
        const TensorD S = perturbed(p, K, 1e-6, 3, trial);
        std::vector<std::size_t> soft;
        for (std::size_t k = 0; k < K; ++k) {
            const auto row = S.row(k);
            soft.push_back(std::max_element(row.begin(), row.end()) - row.begin() + 1);
        }
        std::sort(soft.begin(), soft.end());
        EXPECT_EQ(soft, hard_topk(std::span<const double>(p), K)) << trial;
    }
}

TEST(PerturbedTopK, SmallNoiseMonteCarloNearHardRows) {
    const std::vector<double> p = {0.9, 0.1, 0.5, 0.2};
    const TensorD S = perturbed(p, 2, 1e-3, 10000, 3);
    const TensorD H = hard_rows(p, 2);
    EXPECT_EQ(H.at(0, 0), 1.0);
    EXPECT_EQ(H.at(1, 2), 1.0);
    for (std::size_t i = 0; i < S.size(); ++i) EXPECT_LT(std::abs(S[i] - H[i]), 0.05);
}

TEST(PerturbedTopK, RowsSumToOne) {
    std::mt19937_64 rng(4);
    const auto p = random_distinct(12, rng);
    const TensorD S = perturbed(p, 4, 0.3, 500, 9);
    double total = 0;
    for (std::size_t k = 0; k < 4; ++k) {
        double row = 0;
        for (double v : S.row(k)) row += v;
        EXPECT_NEAR(row, 1.0, 1e-6);
        total += row;
    }
    EXPECT_NEAR(total, 4.0, 1e-6);
}

TEST(PerturbedTopK, DoublingSamplesDoesNotIncreaseError) {
    const std::vector<double> p = {0.2, 0.5, 0.45, 0.9, 0.1, 0.6};
    const TensorD limit = perturbed(p, 2, 0.2, 400000, 999);
    auto mean_dev = [&](std::size_t n) {
        double acc = 0;
        for (std::uint64_t seed = 0; seed < 40; ++seed) {
            const TensorD S = perturbed(p, 2, 0.2, n, seed);
            for (std::size_t i = 0; i < S.size(); ++i) acc += std::abs(S[i] - limit[i]);
        }
        return acc;
    };
    const double d1 = mean_dev(250), d2 = mean_dev(500), d4 = mean_dev(1000);
    EXPECT_LE(d2, d1 * 1.05);
    EXPECT_LE(d4, d2 * 1.05);
    EXPECT_LT(d4, d1 * 0.75);
}

TEST(PerturbedTopK, Errors) {
    TapeD t;
    auto p = t.constant(TensorD({3}, 0.5));
    EXPECT_THROW(perturbed_topk(p, PerturbedTopKOptions{4, 0.1, 10, 0}), ContractError);
    EXPECT_THROW(perturbed_topk(p, PerturbedTopKOptions{2, 0.0, 10, 0}), ContractError);
    EXPECT_THROW(perturbed_topk(p, PerturbedTopKOptions{2, 0.1, 0, 0}), ContractError);
    EXPECT_THROW(perturbed_topk(p, PerturbedTopKOptions{2, 0.1, 10, 0, SelectionMode::Replay}), ContractError);
}

TEST(PerturbedTopK, ReplayReproducesRecordedValue) {
    std::mt19937_64 rng(6);
    const auto p = random_distinct(8, rng);
    SelectionLinearization lin;
    TapeD t1;
    const TensorD rec = perturbed_topk(t1.constant(TensorD({8}, p)),
                                       PerturbedTopKOptions{3, 0.2, 300, 5, SelectionMode::Record, &lin})
                            .value();
    TapeD t2;
    const TensorD rep = perturbed_topk(t2.constant(TensorD({8}, p)),
                                       PerturbedTopKOptions{3, 0.2, 300, 5, SelectionMode::Replay, &lin})
                            .value();
    for (std::size_t i = 0; i < rec.size(); ++i) EXPECT_NEAR(rec[i], rep[i], 1e-12);
}

TEST(HardTopK, Examples) {
    std::vector<double> one(10, 0.0);
    one[6] = 1.0;
    EXPECT_EQ(hard_topk(std::span<const double>(one), 1), (std::vector<std::size_t>{7}));
    const std::vector<double> p = {0.9, 0.1, 0.5, 0.2};
    EXPECT_EQ(hard_topk(std::span<const double>(p), 2), (std::vector<std::size_t>{1, 3}));
    const std::vector<double> flat(6, 0.4);
    EXPECT_EQ(hard_topk(std::span<const double>(flat), 3), (std::vector<std::size_t>{1, 2, 3}));
}

TEST(MineNegatives, IntraHandExample) {
    const std::vector<double> p = {0.9, 0.1, 0.5, 0.2};
    const auto hard = hard_topk(std::span<const double>(p), 1);
    const auto neg = mine_negatives(std::span<const double>(p), hard, {4}, 0, 2, 0, 0);
    EXPECT_EQ(neg.intra, (std::vector<std::size_t>{2, 4}));
    EXPECT_TRUE(neg.inter.empty());
}

TEST(MineNegatives, FullComplement) {
    std::mt19937_64 rng(8);
    const auto p = random_distinct(10, rng);
    const auto hard = hard_topk(std::span<const double>(p), 3);
    const auto neg = mine_negatives(std::span<const double>(p), hard, {10}, 0, 7, 0, 0);
    std::vector<std::size_t> complement;
    for (std::size_t t = 1; t <= 10; ++t)
        if (std::find(hard.begin(), hard.end(), t) == hard.end()) complement.push_back(t);
    EXPECT_EQ(neg.intra, complement);
}

TEST(MineNegatives, IntraNeverOverlapsHardSet) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> p = random_distinct(16, rng);
        if (trial % 3 == 0) std::fill(p.begin(), p.begin() + 8, 0.5);
        const auto hard = hard_topk(std::span<const double>(p), 4);
        const auto neg = mine_negatives(std::span<const double>(p), hard, {16}, 0, 12, 0, 0);
        for (std::size_t t : neg.intra) EXPECT_EQ(std::count(hard.begin(), hard.end(), t), 0);
    }
}

TEST(MineNegatives, AnchorNeverInInter) {
    const std::vector<double> p(8, 0.5);
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto neg = mine_negatives(std::span<const double>(p), {1}, {8, 8, 8, 8}, seed % 4, 2, 5, seed);
        ASSERT_EQ(neg.inter.size(), 5u);
        for (const auto& f : neg.inter) {
            EXPECT_NE(f.sample, seed % 4);
            EXPECT_GE(f.frame, 1u);
            EXPECT_LE(f.frame, 8u);
        }
    }
}

TEST(MineNegatives, InterSamplingIsDeterministicPerSeed) {
    const std::vector<double> p(8, 0.5);
    const auto a = mine_negatives(std::span<const double>(p), {1}, {8, 8, 8}, 1, 2, 10, 42);
    const auto b = mine_negatives(std::span<const double>(p), {1}, {8, 8, 8}, 1, 2, 10, 42);
    EXPECT_EQ(a.inter, b.inter);
}

TEST(MineNegatives, Errors) {
    const std::vector<double> p(6, 0.1);
    EXPECT_THROW(mine_negatives(std::span<const double>(p), {1, 2}, {6}, 0, 5, 0, 0), ContractError);
    EXPECT_THROW(mine_negatives(std::span<const double>(p), {1}, {6}, 0, 2, 3, 0), ConfigurationError);
}

TEST(GatherSelected, OneHotRowsGiveExactRows) {
    TapeD t;
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n;
    TensorD frames({5, 3});
    for (auto& v : frames.storage()) v = n(rng);
    TensorD S({2, 5});
    S.at(0, 3) = 1.0;
    S.at(1, 0) = 1.0;
    const auto soft = gather_selected(t.constant(S), t.constant(frames)).value();
    const auto hard = gather_selected({4, 1}, t.constant(frames)).value();
    EXPECT_EQ(soft, hard);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(soft.at(0, j), frames.at(3, j));
}

TEST(GatherSelected, UniformRowsGiveFrameMean) {
    TapeD t;
    const TensorD frames = TensorD::matrix({{1, 2}, {3, 4}, {5, 9}, {7, 1}});
    const auto out = gather_selected(t.constant(TensorD({3, 4}, 0.25)), t.constant(frames)).value();
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_DOUBLE_EQ(out.at(k, 0), 4.0);
        EXPECT_DOUBLE_EQ(out.at(k, 1), 4.0);
    }
}

TEST(GatherSelected, GradientThroughSelectionIsFiniteAndDirectionConsistent) {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> n;
    const std::size_t T = 8, D = 4, K = 2;
    const double eps = 0.3;
    const std::size_t samples = 20000;
    std::vector<double> p0 = {0.2, 0.8, 0.5, 0.55, 0.1, 0.7, 0.3, 0.6};
    TensorD frames({T, D});
    for (auto& v : frames.storage()) v = n(rng);
    auto f = [&](const std::vector<double>& p, std::uint64_t seed, std::vector<double>* grad) {
        TapeD t;
        auto pv = t.variable(TensorD({T}, p));
        auto S = perturbed_topk(pv, PerturbedTopKOptions{K, eps, samples, seed});
        auto e = gather_selected(S, t.constant(frames));
        auto total = ad::sum(e);
        if (grad) {
            t.backward(total);
            grad->assign(t.grad(pv.id).data().begin(), t.grad(pv.id).data().end());
        }
        return total.value().item();
    };
    std::vector<double> g;
    f(p0, 1, &g);
    double norm = 0;
    for (double v : g) {
        EXPECT_TRUE(std::isfinite(v));
        norm += v * v;
    }
    norm = std::sqrt(norm);
    ASSERT_GT(norm, 0.0);
    const double delta = 0.05;
    std::vector<double> plus(p0), minus(p0);
    for (std::size_t j = 0; j < T; ++j) {
        plus[j] += delta * g[j] / norm;
        minus[j] -= delta * g[j] / norm;
    }
    const double fd = (f(plus, 2, nullptr) - f(minus, 3, nullptr)) / (2 * delta);
    EXPECT_GT(fd, 0.0);
    EXPECT_NEAR(fd, norm, 0.35 * norm);
}
