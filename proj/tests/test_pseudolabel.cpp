#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>
#include <utility>

#include "gcg/errors.hpp"
#include "gcg/manifest.hpp"
#include "gcg/pseudolabel.hpp"
#include "gcg/synth.hpp"

using namespace gcg;

namespace {

// Sort every (score, index) pair: score descending, index ascending.
std::vector<std::size_t> brute_force(const std::vector<double>& s, std::size_t K) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < s.size(); ++i) all.emplace_back(-s[i], i + 1);
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> w;
    for (std::size_t i = 0; i < K; ++i) w.push_back(all[i].second);
    std::sort(w.begin(), w.end());
    return w;
}

} // namespace

TEST(CosineScores, HandExample) {
    const TensorD frames = TensorD::matrix({{1, 0}, {0, 1}, {0.7071, 0.7071}});
    const auto s = cosine_scores(frames, TensorD::vector({1, 0})).s;
    ASSERT_EQ(s.size(), 3u);
    EXPECT_NEAR(s[0], 1.0, 1e-4);
    EXPECT_NEAR(s[1], 0.0, 1e-4);
    EXPECT_NEAR(s[2], 0.7071, 1e-4);
}

TEST(CosineScores, SelfSimilarityIsOne) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    TensorD frames({6, 10});
    for (auto& v : frames.storage()) v = n(rng);
    TensorD d({10});
    for (std::size_t j = 0; j < 10; ++j) d[j] = frames.at(4, j);
    EXPECT_NEAR(cosine_scores(frames, d).s[4], 1.0, 1e-12);
}

TEST(CosineScores, OrthogonalDescriptionGivesZeros) {
    const TensorD frames = TensorD::matrix({{1, 0, 0}, {0, 2, 0}, {3, -1, 0}});
    for (double v : cosine_scores(frames, TensorD::vector({0, 0, 5})).s) EXPECT_EQ(v, 0.0);
}

TEST(CosineScores, ZeroNormFrameNamesIndex) {
    const TensorD frames = TensorD::matrix({{1, 0}, {0, 0}, {1, 1}});
    try {
        cosine_scores(frames, TensorD::vector({1, 0}));
        FAIL() << "expected DegenerateInputError";
    } catch (const DegenerateInputError& e) {
        EXPECT_NE(std::string(e.what()).find("frame 2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(cosine_scores(TensorD::matrix({{1, 0}}), TensorD::vector({0, 0})), DegenerateInputError);
}

TEST(CosineScores, RangeAndScaleInvariance) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n;
    std::uniform_real_distribution<double> scale(0.01, 100.0);
    for (int trial = 0; trial < 50; ++trial) {
        TensorD frames({8, 6}), d({6});
        for (auto& v : frames.storage()) v = n(rng);
        for (auto& v : d.storage()) v = n(rng);
        const auto s = cosine_scores(frames, d).s;
        TensorD frames2 = frames, d2 = d;
        const double a = scale(rng), b = scale(rng);
        for (auto& v : frames2.storage()) v *= a;
        for (auto& v : d2.storage()) v *= b;
        const auto s2 = cosine_scores(frames2, d2).s;
        for (std::size_t t = 0; t < s.size(); ++t) {
            EXPECT_GE(s[t], -1.0);
            EXPECT_LE(s[t], 1.0);
            EXPECT_NEAR(s[t], s2[t], 1e-6);
        }
    }
}

TEST(SelectPseudoLabels, HandExample) {
    EXPECT_EQ(select_pseudo_labels({{1.0, 0.0, 0.7071}}, 2).w, (std::vector<std::size_t>{1, 3}));
}

TEST(SelectPseudoLabels, TiesGoToSmallerIndex) {
    EXPECT_EQ(select_pseudo_labels({{0.3, 0.3, 0.3, 0.3, 0.3}}, 2).w, (std::vector<std::size_t>{1, 2}));
}

TEST(SelectPseudoLabels, KEqualsT) {
    EXPECT_EQ(select_pseudo_labels({{0.1, -0.5, 0.9, 0.0}}, 4).w, (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(SelectPseudoLabels, KAboveTIsContractError) {
    EXPECT_THROW(select_pseudo_labels({{0.1, 0.2}}, 3), ContractError);
}

TEST(SelectPseudoLabels, AgreesWithBruteForceOn1000Instances) {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> n;
    std::uniform_int_distribution<std::size_t> Td(1, 40), Dd(2, 12);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t T = Td(rng), D = Dd(rng);
        const std::size_t K = std::uniform_int_distribution<std::size_t>(1, T)(rng);
        TensorD frames({T, D}), d({D});
        for (auto& v : frames.storage()) v = n(rng);
        // Every fourth instance repeats frames to force exact score ties.
        if (trial % 4 == 0 && T > 1) {
            for (std::size_t t = 1; t < T; t += 2)
                for (std::size_t j = 0; j < D; ++j) frames.at(t, j) = frames.at(t - 1, j);
        }
        for (auto& v : d.storage()) v = n(rng);
        const auto s = cosine_scores(frames, d);
        const auto w = select_pseudo_labels(s, K).w;
        ASSERT_EQ(w, brute_force(s.s, K)) << "trial " << trial;
        ASSERT_TRUE(std::is_sorted(w.begin(), w.end()));
    }
}

TEST(RefreshPseudoLabels, CachesAndInvalidatesOnDescriptionChange) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "gcg_pseudolabel_cache";
    fs::remove_all(dir);
    synth::SynthSpec spec;
    spec.train = 3;
    spec.test = 1;
    const auto ds = synth::generate_dataset(spec, dir);
    Manifest m = load_manifest(ds.manifest);
    EXPECT_EQ(refresh_pseudo_labels(m, 4), 4u);
    EXPECT_EQ(refresh_pseudo_labels(m, 4), 0u);
    EXPECT_EQ(refresh_pseudo_labels(m, 2), 4u);
    save_manifest(m, ds.manifest);
    Manifest reloaded = load_manifest(ds.manifest);
    ASSERT_TRUE(reloaded.samples[0].pseudo_labels);
    EXPECT_EQ(reloaded.samples[0].pseudo_labels->w.size(), 2u);

    TensorF d({spec.D_I}, 0.0f);
    d[0] = 1.0f;
    io::write_tensor(d, reloaded.resolve(reloaded.samples[2].description));
    EXPECT_EQ(refresh_pseudo_labels(reloaded, 2), 1u);

    std::ostringstream dump;
    refresh_pseudo_labels(reloaded, 2, &dump);
    const std::string text = dump.str();
    EXPECT_EQ(text.rfind("sample_id,t,s_t\n", 0), 0u);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + 4 * 32);
}
