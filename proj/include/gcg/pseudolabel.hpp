#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gcg/errors.hpp"
#include "gcg/manifest.hpp"
#include "gcg/ranking.hpp"
#include "gcg/tensor.hpp"
#include "gcg/tensor_io.hpp"

namespace gcg {

/// Cosine similarity of each frame to the description, in [-1, 1].
struct SimilarityScores {
    std::vector<double> s;
};

/// Top-K frame timestamps, 1-based and ascending.
struct PseudoLabels {
    std::vector<std::size_t> w;
};

template <typename S>
SimilarityScores cosine_scores(const Tensor<S>& frames, const Tensor<S>& description) {
    const std::size_t T = frames.rows(), D = frames.cols();
    if (description.size() != D) {
        throw ShapeError("cosine_scores: description length " + std::to_string(description.size()) +
                         " does not match frame width " + std::to_string(D));
    }
    double dn = 0;
    for (std::size_t j = 0; j < D; ++j) dn += double(description[j]) * double(description[j]);
    dn = std::sqrt(dn);
    if (!(dn > 0)) throw DegenerateInputError("cosine_scores: description embedding has zero norm");
    SimilarityScores out;
    out.s.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        double dot = 0, en = 0;
        for (std::size_t j = 0; j < D; ++j) {
            const double e = frames.at(t, j);
            dot += e * double(description[j]);
            en += e * e;
        }
        en = std::sqrt(en);
        if (!(en > 0)) throw DegenerateInputError("cosine_scores: frame " + std::to_string(t + 1) + " has zero norm");
        out.s[t] = std::clamp(dot / (en * dn), -1.0, 1.0);
    }
    return out;
}

inline PseudoLabels select_pseudo_labels(const SimilarityScores& scores, std::size_t K) {
    if (K > scores.s.size()) {
        throw ContractError("select_pseudo_labels: K = " + std::to_string(K) + " exceeds T = " +
                            std::to_string(scores.s.size()));
    }
    return PseudoLabels{top_k_timestamps(std::span<const double>(scores.s), K)};
}

/// Fills (or refreshes) the cached pseudo-labels of every manifest record.
/// A cache entry is reused only when its K and description digest match.
/// When `dump` is set, writes "sample_id,t,s_t" rows for every frame.
inline std::size_t refresh_pseudo_labels(Manifest& manifest, std::size_t K, std::ostream* dump = nullptr) {
    if (K < 1 || K > manifest.T) {
        throw ContractError("pseudolabel: K = " + std::to_string(K) + " must lie in [1, T = " +
                            std::to_string(manifest.T) + "]");
    }
    if (dump) *dump << "sample_id,t,s_t\n";
    std::size_t recomputed = 0;
    for (SampleRecord& r : manifest.samples) {
        const auto desc_path = manifest.resolve(r.description);
        const std::string hash = io::file_hash(desc_path);
        const bool valid = r.pseudo_labels && r.pseudo_labels->k == K && r.pseudo_labels->description_hash == hash;
        if (valid && !dump) continue;
        const auto frames = io::read_tensor_as<double>(manifest.resolve(r.frames));
        const auto desc = io::read_tensor_as<double>(desc_path);
        const SimilarityScores scores = cosine_scores(frames, desc);
        if (dump) {
            for (std::size_t t = 0; t < scores.s.size(); ++t) {
                *dump << r.id << ',' << (t + 1) << ',' << scores.s[t] << '\n';
            }
        }
        if (valid) continue;
        r.pseudo_labels = PseudoLabelCache{K, hash, select_pseudo_labels(scores, K).w};
        ++recomputed;
    }
    return recomputed;
}

} // namespace gcg
