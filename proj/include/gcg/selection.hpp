#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "gcg/autodiff.hpp"
#include "gcg/errors.hpp"
#include "gcg/ops.hpp"
#include "gcg/ranking.hpp"
#include "gcg/tensor.hpp"

namespace gcg {

/// First-order model of a perturbed top-K draw around the point it was taken at:
/// S(p) ~ s0 + J (p - p0). Gradient checks replay it so the selection is
/// smooth in p while every other op is differentiated for real.
struct SelectionLinearization {
    std::size_t K = 0, T = 0;
    std::vector<double> p0;   // [T]
    std::vector<double> s0;   // [K*T]
    std::vector<double> jac;  // [(K*T) x T]
};

enum class SelectionMode { Sample, Record, Replay };

struct PerturbedTopKOptions {
    std::size_t K = 4;
    double eps = 0.05;
    std::size_t samples = 200;
    std::uint64_t seed = 0;
    SelectionMode mode = SelectionMode::Sample;
    SelectionLinearization* linearization = nullptr;  // written in Record, read in Replay
};

/// Monte-Carlo perturbed-maximum top-K. Row k of the result averages the
/// one-hot of the k-th largest entry of p + eps * Z over `samples` standard
/// normal draws Z. The reverse pass uses the estimator
/// dS_k/dp = E[onehot_k(p + eps Z) Z^T] / eps.
template <typename S>
ad::Var<S> perturbed_topk(ad::Var<S> p, const PerturbedTopKOptions& opt) {
    const std::size_t T = p.size(), K = opt.K;
    if (K > T) throw ContractError("perturbed_topk: K = " + std::to_string(K) + " exceeds T = " + std::to_string(T));
    if (!(opt.eps > 0)) throw ContractError("perturbed_topk: eps must be positive");
    if (opt.samples < 1) throw ContractError("perturbed_topk: need at least one noise sample");
    if (opt.mode != SelectionMode::Sample && !opt.linearization) {
        throw ContractError("perturbed_topk: record/replay mode needs a linearization slot");
    }
    const Tensor<S>& P = p.value();

    if (opt.mode == SelectionMode::Replay) {
        const SelectionLinearization& lin = *opt.linearization;
        if (lin.K != K || lin.T != T) throw ShapeError("perturbed_topk: linearization extents do not match");
        Tensor<S> out({K, T});
        for (std::size_t r = 0; r < K * T; ++r) {
            double v = lin.s0[r];
            for (std::size_t j = 0; j < T; ++j) v += lin.jac[r * T + j] * (double(P[j]) - lin.p0[j]);
            out[r] = static_cast<S>(v);
        }
        return p.tape->push("perturbed_topk", {p.id}, std::move(out), [p, K, T, jac = lin.jac](ad::Tape<S>& t, std::size_t self) {
            const Tensor<S>& G = t.grad(self);
            Tensor<S>& dP = t.grad(p.id);
            for (std::size_t j = 0; j < T; ++j) {
                double acc = 0;
                for (std::size_t r = 0; r < K * T; ++r) acc += double(G[r]) * jac[r * T + j];
                dP[j] += static_cast<S>(acc);
            }
        });
    }

    const std::size_t n = opt.samples;
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> noise(n * T);
    std::vector<std::size_t> ranked(n * K);
    std::vector<double> perturbed(T);
    Tensor<S> out({K, T});
    std::vector<double> counts(K * T, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t j = 0; j < T; ++j) {
            noise[s * T + j] = normal(rng);
            perturbed[j] = double(P[j]) + opt.eps * noise[s * T + j];
        }
        const auto top = top_k_by_rank(std::span<const double>(perturbed), K);
        for (std::size_t k = 0; k < K; ++k) {
            ranked[s * K + k] = top[k];
            counts[k * T + top[k]] += 1.0;
        }
    }
    for (std::size_t r = 0; r < K * T; ++r) out[r] = static_cast<S>(counts[r] / double(n));

    const double coef = 1.0 / (double(n) * opt.eps);
    if (opt.mode == SelectionMode::Record) {
        SelectionLinearization& lin = *opt.linearization;
        lin.K = K;
        lin.T = T;
        lin.p0.assign(P.data().begin(), P.data().end());
        lin.s0.assign(out.data().begin(), out.data().end());
        lin.jac.assign(K * T * T, 0.0);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t k = 0; k < K; ++k) {
                const std::size_t row = k * T + ranked[s * K + k];
                for (std::size_t j = 0; j < T; ++j) lin.jac[row * T + j] += coef * noise[s * T + j];
            }
    }
    return p.tape->push("perturbed_topk", {p.id}, std::move(out),
                        [p, K, T, n, coef, noise = std::move(noise), ranked = std::move(ranked)](ad::Tape<S>& t,
                                                                                                 std::size_t self) {
                            const Tensor<S>& G = t.grad(self);
                            Tensor<S>& dP = t.grad(p.id);
                            std::vector<double> acc(T, 0.0);
                            for (std::size_t s = 0; s < n; ++s) {
                                double w = 0;
                                for (std::size_t k = 0; k < K; ++k) w += double(G[k * T + ranked[s * K + k]]);
                                if (w == 0) continue;
                                for (std::size_t j = 0; j < T; ++j) acc[j] += w * noise[s * T + j];
                            }
                            for (std::size_t j = 0; j < T; ++j) dP[j] += static_cast<S>(coef * acc[j]);
                        });
}

/// Discrete top-K: 1-based indices in ascending temporal order, ties to the smaller index.
template <typename T>
std::vector<std::size_t> hard_topk(std::span<const T> p, std::size_t K) {
    return top_k_timestamps(p, K);
}

template <typename S>
std::vector<std::size_t> hard_topk(const Tensor<S>& p, std::size_t K) {
    return hard_topk(std::span<const S>(p.data()), K);
}

struct FrameRef {
    std::size_t sample = 0;  // position in the batch
    std::size_t frame = 0;   // 1-based
    friend bool operator==(const FrameRef&, const FrameRef&) = default;
};

struct NegativeSet {
    std::vector<std::size_t> intra;  // 1-based, ascending
    std::vector<FrameRef> inter;
};

/// Intra negatives are the N_intra lowest-weight frames outside `hard_set`
/// (ties to the smaller index); inter negatives are N_inter uniform draws,
/// with replacement, over frames of the other batch samples.
template <typename T>
NegativeSet mine_negatives(std::span<const T> p, const std::vector<std::size_t>& hard_set,
                           const std::vector<std::size_t>& batch_frame_counts, std::size_t anchor, std::size_t N_intra,
                           std::size_t N_inter, std::uint64_t seed) {
    const std::size_t len = p.size();
    if (N_intra + hard_set.size() > len) {
        throw ContractError("mine_negatives: N_intra = " + std::to_string(N_intra) + " exceeds T - K = " +
                            std::to_string(len - std::min(len, hard_set.size())));
    }
    if (anchor >= batch_frame_counts.size()) throw ContractError("mine_negatives: anchor outside batch");
    if (N_inter > 0 && batch_frame_counts.size() < 2) {
        throw ConfigurationError("mine_negatives: N_inter > 0 needs a batch of at least two samples");
    }
    NegativeSet out;
    std::vector<bool> excluded(len, false);
    for (std::size_t h : hard_set) {
        if (h < 1 || h > len) throw ContractError("mine_negatives: hard index out of range");
        excluded[h - 1] = true;
    }
    std::vector<std::size_t> pool;
    for (std::size_t t = 0; t < len; ++t)
        if (!excluded[t]) pool.push_back(t);
    std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    pool.resize(N_intra);
    std::sort(pool.begin(), pool.end());
    for (std::size_t t : pool) out.intra.push_back(t + 1);

    if (N_inter > 0) {
        std::size_t total = 0;
        for (std::size_t b = 0; b < batch_frame_counts.size(); ++b)
            if (b != anchor) total += batch_frame_counts[b];
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> pick(0, total - 1);
        for (std::size_t i = 0; i < N_inter; ++i) {
            std::size_t r = pick(rng);
            for (std::size_t b = 0; b < batch_frame_counts.size(); ++b) {
                if (b == anchor) continue;
                if (r < batch_frame_counts[b]) {
                    out.inter.push_back({b, r + 1});
                    break;
                }
                r -= batch_frame_counts[b];
            }
        }
    }
    return out;
}

/// Soft gather: selection [K x T] times frames [T x D].
template <typename S>
ad::Var<S> gather_selected(ad::Var<S> selection, ad::Var<S> frames) {
    if (selection.cols() != frames.rows()) {
        throw ShapeError("gather_selected: selection " + format_extents(selection.extents()) +
                         " does not match frames " + format_extents(frames.extents()));
    }
    return ad::matmul(selection, frames);
}

/// Hard gather by 1-based indices.
template <typename S>
ad::Var<S> gather_selected(const std::vector<std::size_t>& indices, ad::Var<S> frames) {
    std::vector<std::size_t> zero_based(indices);
    for (auto& i : zero_based) {
        if (i < 1 || i > frames.rows()) throw ShapeError("gather_selected: index out of range");
        --i;
    }
    return ad::gather_rows(frames, zero_based);
}

} // namespace gcg
