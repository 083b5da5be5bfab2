#pragma once

// Synthetic embedding-level VideoQA benchmark with planted answer frames.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcg/errors.hpp"
#include "gcg/manifest.hpp"
#include "gcg/seed.hpp"
#include "gcg/tensor.hpp"
#include "gcg/tensor_io.hpp"

namespace gcg::synth {

struct SynthSpec {
    std::size_t D_I = 32;
    std::size_t T = 32;
    std::size_t K_star = 4;
    std::size_t C = 5;
    std::size_t L_q = 8;
    std::size_t scenes = 8;  // shared distractor-scene prototypes
    double eta = 0.5;
    std::size_t train = 2000;
    std::size_t test = 500;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw SpecError("invalid synth spec: " + m); };
        if (D_I < 2) fail("D_I must be at least 2");
        if (T < 1 || T > 64) fail("T must lie in [1, 64]");
        if (K_star < 1 || K_star > T) fail("K* must satisfy 1 <= K* <= T");
        if (C < 2) fail("C must be at least 2");
        if (L_q < 1) fail("L_q must be at least 1");
        if (scenes < 1) fail("scenes must be at least 1");
        if (!(eta >= 0)) fail("eta must be non-negative");
    }
};

inline SynthSpec spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw SpecError("synth spec must be a JSON object");
    SynthSpec s;
    for (const auto& [key, v] : j.items()) {
        if (key == "D_I") s.D_I = v.get<std::size_t>();
        else if (key == "T") s.T = v.get<std::size_t>();
        else if (key == "K_star") s.K_star = v.get<std::size_t>();
        else if (key == "C") s.C = v.get<std::size_t>();
        else if (key == "L_q") s.L_q = v.get<std::size_t>();
        else if (key == "scenes") s.scenes = v.get<std::size_t>();
        else if (key == "eta") s.eta = v.get<double>();
        else if (key == "train") s.train = v.get<std::size_t>();
        else if (key == "test") s.test = v.get<std::size_t>();
        else if (key == "seed") s.seed = v.get<std::uint64_t>();
        else throw SpecError("unknown synth spec key '" + key + "'");
    }
    s.validate();
    return s;
}

inline nlohmann::json to_json(const SynthSpec& s) {
    return {{"D_I", s.D_I},       {"T", s.T},     {"K_star", s.K_star}, {"C", s.C},       {"L_q", s.L_q},
            {"scenes", s.scenes}, {"eta", s.eta}, {"train", s.train},   {"test", s.test}, {"seed", s.seed}};
}

struct GroundTruth {
    std::vector<std::size_t> timestamps;  // 1-based, ascending
    std::size_t answer = 0;
};

struct SynthSample {
    std::string id;
    std::string split;
    TensorF frames;       // T x D_I
    TensorF question;     // L_q x D_I
    TensorF description;  // D_I
    TensorF candidates;   // C x D_I
    GroundTruth truth;
};

inline constexpr double kMaxCandidateCosine = 0.3;
inline constexpr std::size_t kMaxRejections = 10000;
inline constexpr double kContiguousProbability = 0.5;

namespace detail {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline Vec normalized(Vec v) {
    const double n = std::sqrt(dot(v, v));
    for (double& x : v) x /= n;
    return v;
}

inline Vec random_unit(std::size_t D, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec v(D);
    for (double& x : v) x = normal(rng);
    return normalized(std::move(v));
}

// Prototype plus isotropic noise of expected norm eta, renormalized.
inline Vec noisy(const Vec& proto, double eta, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(proto.size())));
    Vec v(proto);
    for (double& x : v) x += eta * normal(rng);
    return normalized(std::move(v));
}

inline void put_row(TensorF& t, std::size_t r, const Vec& v) {
    for (std::size_t j = 0; j < v.size(); ++j) t.at(r, j) = static_cast<float>(v[j]);
}

inline std::vector<Vec> scene_pool(const SynthSpec& spec) {
    std::mt19937_64 rng(derive_seed({spec.seed, kStreamSynthScenes}));
    std::vector<Vec> pool;
    for (std::size_t i = 0; i < spec.scenes; ++i) pool.push_back(random_unit(spec.D_I, rng));
    return pool;
}

inline std::vector<std::size_t> plant_timestamps(const SynthSpec& spec, std::mt19937_64& rng) {
    std::bernoulli_distribution contiguous(kContiguousProbability);
    std::vector<std::size_t> ts;
    if (contiguous(rng)) {
        std::uniform_int_distribution<std::size_t> start(1, spec.T - spec.K_star + 1);
        const std::size_t s = start(rng);
        for (std::size_t k = 0; k < spec.K_star; ++k) ts.push_back(s + k);
    } else {
        std::vector<std::size_t> all(spec.T);
        for (std::size_t t = 0; t < spec.T; ++t) all[t] = t + 1;
        std::shuffle(all.begin(), all.end(), rng);
        ts.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.K_star));
        std::sort(ts.begin(), ts.end());
    }
    return ts;
}

} // namespace detail

/// Builds sample `index` (train samples first, then test). Pure in (spec, index).
inline SynthSample make_sample(const SynthSpec& spec, const std::vector<detail::Vec>& scenes, std::size_t index) {
    using namespace detail;
    std::mt19937_64 rng(derive_seed({spec.seed, kStreamSynthSample, index}));
    const std::size_t D = spec.D_I;
    SynthSample s;
    s.split = index < spec.train ? "train" : "test";
    const std::size_t local = index < spec.train ? index : index - spec.train;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s-%05zu", s.split.c_str(), local);
    s.id = buf;

    // Answer candidates: pairwise (and scene-wise) cosine below the bound.
    std::vector<Vec> cands;
    std::size_t rejections = 0;
    while (cands.size() < spec.C) {
        Vec v = random_unit(D, rng);
        bool ok = true;
        for (const Vec& c : cands) ok = ok && std::abs(dot(v, c)) < kMaxCandidateCosine;
        for (const Vec& sc : scenes) ok = ok && std::abs(dot(v, sc)) < kMaxCandidateCosine;
        if (ok) {
            cands.push_back(std::move(v));
        } else if (++rejections >= kMaxRejections) {
            throw SpecError("synth: could not draw " + std::to_string(spec.C) + " separated candidates in D_I = " +
                            std::to_string(D) + " after 10000 rejections");
        }
    }
    std::uniform_int_distribution<std::size_t> pick_answer(0, spec.C - 1);
    s.truth.answer = pick_answer(rng);
    const Vec& answer = cands[s.truth.answer];
    s.truth.timestamps = plant_timestamps(spec, rng);

    // Question prototype with the answer direction projected out, kept away
    // from the scene prototypes so the description never prefers a distractor.
    Vec q;
    for (;;) {
        q = random_unit(D, rng);
        const double along = dot(q, answer);
        for (std::size_t j = 0; j < D; ++j) q[j] -= along * answer[j];
        q = normalized(std::move(q));
        bool ok = true;
        for (const Vec& sc : scenes) ok = ok && std::abs(dot(q, sc)) < kMaxCandidateCosine;
        if (ok) break;
        if (++rejections >= kMaxRejections) {
            throw SpecError("synth: could not draw a question prototype in D_I = " + std::to_string(D) +
                            " after 10000 rejections");
        }
    }

    // Two distractor scenes split the non-planted frames at a random cut.
    std::uniform_int_distribution<std::size_t> pick_scene(0, scenes.size() - 1);
    const std::size_t scene_a = pick_scene(rng), scene_b = pick_scene(rng);
    std::uniform_int_distribution<std::size_t> pick_cut(1, spec.T);
    const std::size_t cut = pick_cut(rng);

    s.frames = TensorF({spec.T, D});
    std::size_t next_plant = 0;
    for (std::size_t t = 1; t <= spec.T; ++t) {
        const bool planted = next_plant < s.truth.timestamps.size() && s.truth.timestamps[next_plant] == t;
        if (planted) ++next_plant;
        const Vec& proto = planted ? answer : scenes[t < cut ? scene_a : scene_b];
        put_row(s.frames, t - 1, noisy(proto, spec.eta, rng));
    }
    s.question = TensorF({spec.L_q, D});
    for (std::size_t i = 0; i < spec.L_q; ++i) put_row(s.question, i, noisy(q, spec.eta, rng));
    Vec desc(D);
    for (std::size_t j = 0; j < D; ++j) desc[j] = answer[j] + q[j];
    desc = normalized(std::move(desc));
    s.description = TensorF({D});
    for (std::size_t j = 0; j < D; ++j) s.description[j] = static_cast<float>(desc[j]);
    s.candidates = TensorF({spec.C, D});
    for (std::size_t c = 0; c < spec.C; ++c) put_row(s.candidates, c, cands[c]);
    return s;
}

inline std::vector<SynthSample> generate_samples(const SynthSpec& spec) {
    spec.validate();
    const auto scenes = detail::scene_pool(spec);
    std::vector<SynthSample> out;
    out.reserve(spec.train + spec.test);
    for (std::size_t i = 0; i < spec.train + spec.test; ++i) out.push_back(make_sample(spec, scenes, i));
    return out;
}

struct GeneratedDataset {
    std::filesystem::path manifest;
    std::filesystem::path ground_truth;
};

inline nlohmann::json ground_truth_json(const std::vector<SynthSample>& samples) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& s : samples) j[s.id] = {{"timestamps", s.truth.timestamps}, {"answer", s.truth.answer}};
    return j;
}

/// Writes tensors, manifest.json and the separate ground_truth.json sidecar.
inline GeneratedDataset generate_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
    const auto samples = generate_samples(spec);
    std::filesystem::create_directories(out_dir / "tensors");
    Manifest m;
    m.T = spec.T;
    m.L_q = spec.L_q;
    m.D_I = spec.D_I;
    m.C = spec.C;
    m.base_dir = out_dir;
    for (const auto& s : samples) {
        SampleRecord r;
        r.id = s.id;
        r.split = s.split;
        r.frames = "tensors/" + s.id + ".frames.gcgt";
        r.question = "tensors/" + s.id + ".question.gcgt";
        r.description = "tensors/" + s.id + ".description.gcgt";
        r.candidates = "tensors/" + s.id + ".candidates.gcgt";
        r.answer = s.truth.answer;
        io::write_tensor(s.frames, out_dir / r.frames);
        io::write_tensor(s.question, out_dir / r.question);
        io::write_tensor(s.description, out_dir / r.description);
        io::write_tensor(s.candidates, out_dir / r.candidates);
        m.samples.push_back(std::move(r));
    }
    GeneratedDataset out{out_dir / "manifest.json", out_dir / "ground_truth.json"};
    save_manifest(m, out.manifest);
    std::ofstream gt(out.ground_truth);
    gt << ground_truth_json(samples).dump(1) << '\n';
    std::ofstream spec_out(out_dir / "synth_spec.json");
    spec_out << to_json(spec).dump(1) << '\n';
    return out;
}

inline std::map<std::string, GroundTruth> load_ground_truth(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("ground-truth sidecar not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("ground-truth sidecar is not valid JSON: ") + e.what());
    }
    std::map<std::string, GroundTruth> out;
    for (const auto& [id, v] : j.items()) {
        out[id] = GroundTruth{v.at("timestamps").get<std::vector<std::size_t>>(), v.at("answer").get<std::size_t>()};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-sample evaluation terms

/// |selected ∩ planted| / min(|selected|, |planted|).
inline double keyframe_recall(const std::vector<std::size_t>& selected, const std::vector<std::size_t>& planted) {
    if (selected.empty() || planted.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t s : selected) hits += std::count(planted.begin(), planted.end(), s) ? 1 : 0;
    return double(hits) / double(std::min(selected.size(), planted.size()));
}

/// Index of the largest logit, ties to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

/// mean_k |mu_k - nearest planted / T|.
template <typename T>
double center_error(std::span<const T> mu, const std::vector<std::size_t>& planted, std::size_t frames) {
    if (mu.empty() || planted.empty()) return 0.0;
    double total = 0;
    for (T m : mu) {
        double best = INFINITY;
        for (std::size_t p : planted) best = std::min(best, std::abs(double(m) - double(p) / double(frames)));
        total += best;
    }
    return total / double(mu.size());
}

struct MetricsContribution {
    double recall = 0;
    bool correct = false;
    double center_error = 0;
};

template <typename T>
MetricsContribution oracle_metrics(const std::vector<std::size_t>& selected, const GroundTruth& truth,
                                   std::span<const T> logits, std::span<const T> mu, std::size_t frames) {
    MetricsContribution c;
    c.recall = keyframe_recall(selected, truth.timestamps);
    c.correct = argmax(logits) == truth.answer;
    c.center_error = center_error(mu, truth.timestamps, frames);
    return c;
}

} // namespace gcg::synth
