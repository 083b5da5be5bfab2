#pragma once

#include <string>
#include <vector>

#include "gcg/errors.hpp"
#include "gcg/manifest.hpp"
#include "gcg/pseudolabel.hpp"
#include "gcg/synth.hpp"
#include "gcg/tensor.hpp"
#include "gcg/tensor_io.hpp"

namespace gcg {

/// One sample held in memory at the training precision.
template <typename S>
struct SampleData {
    std::string id;
    std::string split;
    Tensor<S> frames;       // T x D_I
    Tensor<S> question;     // L_q x D_I
    Tensor<S> description;  // D_I
    Tensor<S> candidates;   // C x D_I
    std::size_t answer = 0;
    std::vector<std::size_t> pseudo_labels;  // 1-based, ascending
};

template <typename S>
struct Dataset {
    std::size_t T = 0, D_I = 0, C = 0;
    std::vector<SampleData<S>> samples;

    std::vector<std::size_t> split_indices(const std::string& split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == split) out.push_back(i);
        return out;
    }
};

/// Loads every tensor of a validated manifest. Pseudo-labels come from the
/// manifest cache when it matches K and the description digest, and are
/// recomputed otherwise.
template <typename S>
Dataset<S> load_dataset(const Manifest& manifest, std::size_t K) {
    if (K < 1 || K > manifest.T) {
        throw ValidationError("K = " + std::to_string(K) + " incompatible with manifest T = " +
                              std::to_string(manifest.T));
    }
    Dataset<S> ds;
    ds.T = manifest.T;
    ds.D_I = manifest.D_I;
    ds.C = manifest.C;
    for (const SampleRecord& r : manifest.samples) {
        SampleData<S> s;
        s.id = r.id;
        s.split = r.split;
        s.frames = io::read_tensor_as<S>(manifest.resolve(r.frames));
        s.question = io::read_tensor_as<S>(manifest.resolve(r.question));
        s.description = io::read_tensor_as<S>(manifest.resolve(r.description));
        s.candidates = io::read_tensor_as<S>(manifest.resolve(r.candidates));
        s.answer = r.answer;
        const bool cached = r.pseudo_labels && r.pseudo_labels->k == K &&
                            r.pseudo_labels->description_hash == io::file_hash(manifest.resolve(r.description));
        if (cached) {
            s.pseudo_labels = r.pseudo_labels->w;
        } else {
            const auto frames = io::read_tensor_as<double>(manifest.resolve(r.frames));
            const auto desc = io::read_tensor_as<double>(manifest.resolve(r.description));
            s.pseudo_labels = select_pseudo_labels(cosine_scores(frames, desc), K).w;
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

/// In-memory dataset straight from the synthetic generator (no files).
template <typename S>
Dataset<S> dataset_from_synth(const std::vector<synth::SynthSample>& samples, const synth::SynthSpec& spec,
                              std::size_t K) {
    if (K < 1 || K > spec.T) throw ValidationError("K incompatible with synthetic T");
    Dataset<S> ds;
    ds.T = spec.T;
    ds.D_I = spec.D_I;
    ds.C = spec.C;
    for (const auto& x : samples) {
        SampleData<S> s;
        s.id = x.id;
        s.split = x.split;
        s.frames = x.frames.cast<S>();
        s.question = x.question.cast<S>();
        s.description = x.description.cast<S>();
        s.candidates = x.candidates.cast<S>();
        s.answer = x.truth.answer;
        s.pseudo_labels =
            select_pseudo_labels(cosine_scores(x.frames.cast<double>(), x.description.cast<double>()), K).w;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace gcg
