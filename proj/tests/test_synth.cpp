#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gcg/errors.hpp"
#include "gcg/pseudolabel.hpp"
#include "gcg/synth.hpp"

using namespace gcg;
namespace fs = std::filesystem;

namespace {

std::size_t overlap(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::size_t n = 0;
    for (std::size_t x : a) n += std::count(b.begin(), b.end(), x) ? 1 : 0;
    return n;
}

std::vector<unsigned char> bytes_of(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace

TEST(Synth, NoiselessPseudoLabelsEqualTruth) {
    synth::SynthSpec spec;
    spec.eta = 0.0;
    spec.train = 200;
    spec.test = 50;
    for (const auto& s : synth::generate_samples(spec)) {
        const auto w = select_pseudo_labels(cosine_scores(s.frames, s.description), spec.K_star).w;
        ASSERT_EQ(w, s.truth.timestamps) << s.id;
    }
}

TEST(Synth, NoisyPseudoLabelOverlap) {
    synth::SynthSpec spec;
    spec.train = 500;
    spec.test = 0;
    double total = 0;
    const auto samples = synth::generate_samples(spec);
    for (const auto& s : samples) {
        const auto w = select_pseudo_labels(cosine_scores(s.frames, s.description), 4).w;
        total += double(overlap(w, s.truth.timestamps));
    }
    EXPECT_GE(total / double(samples.size()), 3.0);
}

TEST(Synth, SamplesSatisfyConstruction) {
    synth::SynthSpec spec;
    spec.train = 100;
    spec.test = 20;
    std::size_t contiguous = 0;
    const auto samples = synth::generate_samples(spec);
    for (const auto& s : samples) {
        ASSERT_EQ(s.frames.extents(), (Extents{32, 32}));
        ASSERT_EQ(s.question.extents(), (Extents{8, 32}));
        ASSERT_EQ(s.candidates.extents(), (Extents{5, 32}));
        const auto& ts = s.truth.timestamps;
        ASSERT_EQ(ts.size(), 4u);
        EXPECT_TRUE(std::is_sorted(ts.begin(), ts.end()));
        EXPECT_EQ(std::set<std::size_t>(ts.begin(), ts.end()).size(), 4u);
        EXPECT_GE(ts.front(), 1u);
        EXPECT_LE(ts.back(), 32u);
        if (ts.back() - ts.front() == 3) ++contiguous;
        for (std::size_t t = 0; t < 32; ++t) {
            double n = 0;
            for (float v : s.frames.row(t)) n += double(v) * v;
            EXPECT_NEAR(n, 1.0, 1e-5);
        }
        // Candidates pairwise separated; question tokens carry no answer direction at eta = 0.
        for (std::size_t a = 0; a < 5; ++a)
            for (std::size_t b = a + 1; b < 5; ++b) {
                double d = 0;
                for (std::size_t j = 0; j < 32; ++j) d += double(s.candidates.at(a, j)) * s.candidates.at(b, j);
                EXPECT_LT(std::abs(d), 0.3);
            }
    }
    EXPECT_GT(contiguous, 30u);
    EXPECT_LT(contiguous, 100u);
    EXPECT_EQ(samples.front().split, "train");
    EXPECT_EQ(samples.back().split, "test");
}

TEST(Synth, QuestionOrthogonalToAnswerWithoutNoise) {
    synth::SynthSpec spec;
    spec.eta = 0.0;
    spec.train = 20;
    spec.test = 0;
    for (const auto& s : synth::generate_samples(spec)) {
        for (std::size_t i = 0; i < spec.L_q; ++i) {
            double d = 0;
            for (std::size_t j = 0; j < spec.D_I; ++j) d += double(s.question.at(i, j)) * s.candidates.at(s.truth.answer, j);
            EXPECT_NEAR(d, 0.0, 1e-6);
        }
    }
}

TEST(Synth, GenerationIsBitwiseDeterministic) {
    synth::SynthSpec spec;
    spec.seed = 7;
    spec.train = 20;
    spec.test = 5;
    const fs::path a = fs::temp_directory_path() / "gcg_synth_det_a", b = fs::temp_directory_path() / "gcg_synth_det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    synth::generate_dataset(spec, a);
    synth::generate_dataset(spec, b);
    std::size_t files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), a);
        if (rel.filename() == "manifest.json") continue;  // holds its own directory
        ASSERT_EQ(bytes_of(entry.path()), bytes_of(b / rel)) << rel;
        ++files;
    }
    EXPECT_EQ(files, 25u * 4 + 2);
    EXPECT_EQ(to_json(load_manifest(a / "manifest.json")), to_json(load_manifest(b / "manifest.json")));
}

TEST(Synth, DifferentSeedsDiffer) {
    synth::SynthSpec a, b;
    a.train = b.train = 3;
    a.test = b.test = 0;
    b.seed = 1;
    EXPECT_NE(synth::generate_samples(a)[0].frames, synth::generate_samples(b)[0].frames);
}

TEST(Synth, GroundTruthKeptOutOfManifest) {
    synth::SynthSpec spec;
    spec.train = 4;
    spec.test = 2;
    const fs::path dir = fs::temp_directory_path() / "gcg_synth_sidecar";
    fs::remove_all(dir);
    const auto ds = synth::generate_dataset(spec, dir);
    for (const auto& r : load_manifest(ds.manifest).samples) EXPECT_FALSE(r.ground_truth.has_value());
    const auto truth = synth::load_ground_truth(ds.ground_truth);
    EXPECT_EQ(truth.size(), 6u);
    EXPECT_EQ(truth.at("test-00001").timestamps.size(), 4u);
}

TEST(Synth, CandidateCapacityIsSpecError) {
    synth::SynthSpec spec;
    spec.D_I = 2;
    spec.C = 20;
    spec.train = 1;
    spec.test = 0;
    EXPECT_THROW(synth::generate_samples(spec), SpecError);
}

TEST(Synth, SpecValidation) {
    EXPECT_THROW(synth::spec_from_json({{"K_star", 40}}), SpecError);
    EXPECT_THROW(synth::spec_from_json({{"eta", -1.0}}), SpecError);
    EXPECT_THROW(synth::spec_from_json({{"colour", 1}}), SpecError);
    EXPECT_EQ(synth::spec_from_json({{"T", 48}}).T, 48u);
}

TEST(OracleMetrics, Recall) {
    EXPECT_EQ(synth::keyframe_recall({3, 4, 10, 20}, {3, 4, 10, 20}), 1.0);
    EXPECT_EQ(synth::keyframe_recall({1, 2, 5, 6}, {3, 4, 10, 20}), 0.0);
    EXPECT_EQ(synth::keyframe_recall({1, 2, 3, 4}, {3, 4, 10, 20}), 0.5);
}

TEST(OracleMetrics, AnswerAndCenterError) {
    const std::vector<double> logits = {0.1, 2.0, 2.0, -1.0};
    EXPECT_EQ(synth::argmax(std::span<const double>(logits)), 1u);
    const std::vector<double> mu = {0.25, 0.9};
    EXPECT_NEAR(synth::center_error(std::span<const double>(mu), {8, 30}, 32), (0.0 + std::abs(0.9 - 30.0 / 32)) / 2, 1e-12);
    const auto c = synth::oracle_metrics<double>({8, 30}, {{8, 30}, 2}, logits, mu, 32);
    EXPECT_EQ(c.recall, 1.0);
    EXPECT_FALSE(c.correct);
}

TEST(OracleMetrics, UniformSelectionRecallNearKOverT) {
    synth::SynthSpec spec;
    spec.train = 0;
    spec.test = 1000;
    std::vector<std::size_t> uniform;
    for (std::size_t k = 1; k <= 4; ++k) uniform.push_back((2 * k - 1) * 32 / 8 + ((2 * k - 1) * 32 % 8 != 0));
    double total = 0;
    const auto samples = synth::generate_samples(spec);
    for (const auto& s : samples) total += synth::keyframe_recall(uniform, s.truth.timestamps);
    EXPECT_NEAR(total / double(samples.size()), 0.125, 0.05);
}
