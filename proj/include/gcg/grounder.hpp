#pragma once

// Gaussian generator: cross-modal embedding, transformer encoder, attention
// pooling, center head, Gaussian masks and the normalized weight curve.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "gcg/autodiff.hpp"
#include "gcg/errors.hpp"
#include "gcg/ops.hpp"
#include "gcg/optim.hpp"
#include "gcg/tensor.hpp"

namespace gcg {

struct GrounderDims {
    std::size_t D_I = 32;
    std::size_t D_G = 256;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t K = 4;
    std::size_t T_max = 64;
};

namespace detail {

inline std::string layer_name(std::size_t l, const char* leaf) { return "enc" + std::to_string(l) + "." + leaf; }

template <typename S>
Tensor<S> random_normal(Extents extents, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<S> t(std::move(extents));
    for (S& x : t.storage()) x = static_cast<S>(dist(rng));
    return t;
}

template <typename S>
Tensor<S> xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    return random_normal<S>({fan_in, fan_out}, std::sqrt(2.0 / double(fan_in + fan_out)), rng);
}

} // namespace detail

/// Registers every grounder parameter in `store` with a seeded initialization.
template <typename S>
void init_grounder(ParamStore<S>& store, const GrounderDims& d, std::mt19937_64& rng) {
    using detail::layer_name;
    const std::size_t G = d.D_G;
    store.add("embed.proj.weight", detail::xavier<S>(d.D_I, G, rng));
    store.add("embed.proj.bias", Tensor<S>({G}));
    store.add("embed.type_visual", detail::random_normal<S>({G}, 0.02, rng));
    store.add("embed.type_text", detail::random_normal<S>({G}, 0.02, rng));
    // Sinusoidal start for the learnable positional table.
    Tensor<S> pos({d.T_max, G});
    for (std::size_t t = 0; t < d.T_max; ++t) {
        for (std::size_t j = 0; j < G; ++j) {
            const double freq = std::pow(10000.0, -double(2 * (j / 2)) / double(G));
            pos.at(t, j) = static_cast<S>(j % 2 == 0 ? std::sin(double(t) * freq) : std::cos(double(t) * freq));
        }
    }
    store.add("embed.pos", std::move(pos));
    for (std::size_t l = 0; l < d.layers; ++l) {
        store.add(layer_name(l, "ln1.gain"), Tensor<S>({G}, S{1}));
        store.add(layer_name(l, "ln1.bias"), Tensor<S>({G}));
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
            store.add(layer_name(l, w), detail::xavier<S>(G, G, rng));
        }
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) store.add(layer_name(l, b), Tensor<S>({G}));
        store.add(layer_name(l, "ln2.gain"), Tensor<S>({G}, S{1}));
        store.add(layer_name(l, "ln2.bias"), Tensor<S>({G}));
        store.add(layer_name(l, "ff1.weight"), detail::xavier<S>(G, 4 * G, rng));
        store.add(layer_name(l, "ff1.bias"), Tensor<S>({4 * G}));
        store.add(layer_name(l, "ff2.weight"), detail::xavier<S>(4 * G, G, rng));
        store.add(layer_name(l, "ff2.bias"), Tensor<S>({G}));
    }
    store.add("pool.query", Tensor<S>({G}));
    store.add("head.weight", detail::xavier<S>(G, d.K, rng));
    store.add("head.bias", Tensor<S>({d.K}));
}

/// Parameters placed on one tape, looked up by name.
template <typename S>
class BoundParams {
public:
    BoundParams(const ParamStore<S>& store, ad::Tape<S>& tape) : store_(&store), tape_(&tape) {
        vars_.reserve(store.slots().size());
        for (const auto& slot : store.slots()) vars_.push_back(store.bind(tape, slot.name));
    }

    ad::Var<S> operator()(const std::string& name) const { return vars_[store_->slot_of(name)]; }
    ad::Tape<S>& tape() const { return *tape_; }

private:
    const ParamStore<S>* store_;
    ad::Tape<S>* tape_;
    std::vector<ad::Var<S>> vars_;
};

/// Projects [frames; question] to D_G and adds modality and position terms.
/// Only visual rows receive a positional vector.
template <typename S>
ad::Var<S> embed_inputs(ad::Var<S> frames, ad::Var<S> question, const BoundParams<S>& P, std::size_t T_max) {
    const std::size_t T = frames.rows(), Lq = question.rows();
    if (T > T_max) {
        throw CapacityError("embed_inputs: T = " + std::to_string(T) + " exceeds positional capacity " +
                            std::to_string(T_max));
    }
    if (Lq < 1) throw ShapeError("embed_inputs: question must have at least one token");
    auto& tape = P.tape();
    auto x = ad::concat_rows(frames, question);
    auto projected = ad::add_bias(ad::matmul(x, P("embed.proj.weight")), P("embed.proj.bias"));
    const std::size_t G = projected.cols();
    auto visual = ad::add_bias(ad::slice_rows(P("embed.pos"), 0, T), P("embed.type_visual"));
    auto textual = ad::add_bias(tape.constant(Tensor<S>({Lq, G})), P("embed.type_text"));
    return ad::add(projected, ad::concat_rows(visual, textual));
}

namespace detail {

template <typename S>
ad::Var<S> attention(ad::Var<S> h, const std::vector<bool>& key_mask, const BoundParams<S>& P, std::size_t l,
                     std::size_t heads) {
    const std::size_t n = h.rows(), G = h.cols(), dh = G / heads;
    auto proj = [&](const char* w, const char* b) {
        return ad::add_bias(ad::matmul(h, P(layer_name(l, w))), P(layer_name(l, b)));
    };
    auto q = proj("attn.wq", "attn.bq");
    auto k = proj("attn.wk", "attn.bk");
    auto v = proj("attn.wv", "attn.bv");
    std::vector<bool> mask2d(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) mask2d[i * n + j] = key_mask[j];
    const S inv = static_cast<S>(1.0 / std::sqrt(double(dh)));
    std::vector<ad::Var<S>> outs;
    outs.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        auto qh = ad::slice_cols(q, hd * dh, (hd + 1) * dh);
        auto kh = ad::slice_cols(k, hd * dh, (hd + 1) * dh);
        auto vh = ad::slice_cols(v, hd * dh, (hd + 1) * dh);
        auto weights = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv), &mask2d);
        outs.push_back(ad::matmul(weights, vh));
    }
    auto merged = heads == 1 ? outs[0] : ad::concat_cols(outs);
    return ad::add_bias(ad::matmul(merged, P(layer_name(l, "attn.wo"))), P(layer_name(l, "attn.bo")));
}

} // namespace detail

/// Pre-norm transformer encoder; returns the first T (visual) rows.
/// `key_mask[j]` is false for padded question tokens.
template <typename S>
ad::Var<S> encode(ad::Var<S> m, const std::vector<bool>& key_mask, std::size_t T, const BoundParams<S>& P,
                  std::size_t layers, std::size_t heads) {
    using detail::layer_name;
    if (key_mask.size() != m.rows()) throw ShapeError("encode: key mask length does not match sequence");
    for (std::size_t t = 0; t < T; ++t) {
        if (!key_mask[t]) throw ContractError("encode: visual rows must not be masked");
    }
    auto x = m;
    for (std::size_t l = 0; l < layers; ++l) {
        auto h = ad::layer_norm(x, P(layer_name(l, "ln1.gain")), P(layer_name(l, "ln1.bias")));
        x = ad::add(x, detail::attention(h, key_mask, P, l, heads));
        auto h2 = ad::layer_norm(x, P(layer_name(l, "ln2.gain")), P(layer_name(l, "ln2.bias")));
        auto ff = ad::gelu(ad::add_bias(ad::matmul(h2, P(layer_name(l, "ff1.weight"))), P(layer_name(l, "ff1.bias"))));
        ff = ad::add_bias(ad::matmul(ff, P(layer_name(l, "ff2.weight"))), P(layer_name(l, "ff2.bias")));
        x = ad::add(x, ff);
    }
    return ad::slice_rows(x, 0, T);
}

/// Single-query attention pooling over time, then sigmoid(linear) -> K centers.
template <typename S>
ad::Var<S> pool_and_predict_centers(ad::Var<S> encoded, const BoundParams<S>& P) {
    const std::size_t T = encoded.rows(), G = encoded.cols();
    auto query = ad::reshape(P("pool.query"), {G, 1});
    auto scores = ad::scale(ad::matmul(encoded, query), static_cast<S>(1.0 / std::sqrt(double(G))));
    auto weights = ad::softmax_rows(ad::reshape(scores, {1, T}));
    auto pooled = ad::matmul(weights, encoded);
    auto logits = ad::add_bias(ad::matmul(pooled, P("head.weight")), P("head.bias"));
    auto mu = ad::sigmoid(logits);
    return ad::reshape(mu, {mu.size()});
}

/// g[k][t-1] = exp(-(t/T - mu_k)^2 / (2 sigma^2)) / (sqrt(2 pi) sigma), t = 1..T.
template <typename S>
ad::Var<S> gaussian_masks(ad::Var<S> mu, double sigma, std::size_t T) {
    if (!(sigma > 0)) throw ContractError("gaussian_masks: sigma must be positive");
    const std::size_t K = mu.size();
    const Tensor<S>& M = mu.value();
    const double norm = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * sigma);
    const double two_var = 2.0 * sigma * sigma;
    Tensor<S> g({K, T});
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t t = 0; t < T; ++t) {
            const double d = double(t + 1) / double(T) - double(M[k]);
            g[k * T + t] = static_cast<S>(norm * std::exp(-d * d / two_var));
        }
    }
    return mu.tape->push("gaussian_masks", {mu.id}, std::move(g), [mu, K, T, sigma](ad::Tape<S>& tape, std::size_t self) {
        const Tensor<S>& Gr = tape.grad(self);
        const Tensor<S>& Y = tape.value(self);
        const Tensor<S>& M = tape.value(mu.id);
        Tensor<S>& dM = tape.grad(mu.id);
        const double inv_var = 1.0 / (sigma * sigma);
        for (std::size_t k = 0; k < K; ++k) {
            double acc = 0;
            for (std::size_t t = 0; t < T; ++t) {
                const double d = double(t + 1) / double(T) - double(M[k]);
                acc += double(Gr[k * T + t]) * double(Y[k * T + t]) * d * inv_var;
            }
            dM[k] += static_cast<S>(acc);
        }
    });
}

inline constexpr double kDegenerateRange = 1e-12;

/// p = minmax(sum_k g_k). A flat curve maps to 0.5 everywhere.
template <typename S>
ad::Var<S> combine_masks(ad::Var<S> g) {
    if (g.extents().size() != 2) throw ShapeError("combine_masks: expected K x T masks");
    const std::size_t K = g.rows(), T = g.cols();
    if (K < 1) throw ContractError("combine_masks: need at least one mask");
    const Tensor<S>& Gm = g.value();
    std::vector<double> raw(T, 0.0);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t t = 0; t < T; ++t) raw[t] += double(Gm[k * T + t]);
    std::size_t lo = 0, hi = 0;
    for (std::size_t t = 1; t < T; ++t) {
        if (raw[t] < raw[lo]) lo = t;
        if (raw[t] > raw[hi]) hi = t;
    }
    const double range = raw[hi] - raw[lo];
    const bool degenerate = range < kDegenerateRange;
    Tensor<S> p({T});
    for (std::size_t t = 0; t < T; ++t) p[t] = static_cast<S>(degenerate ? 0.5 : (raw[t] - raw[lo]) / range);
    // Endpoints are pinned exactly so min(p) = 0 and max(p) = 1.
    if (!degenerate) {
        p[lo] = S{0};
        p[hi] = S{1};
    }
    return g.tape->push("combine_masks", {g.id}, std::move(p),
                        [g, K, T, lo, hi, range, degenerate](ad::Tape<S>& tape, std::size_t self) {
                            if (degenerate) return;
                            const Tensor<S>& Gr = tape.grad(self);
                            const Tensor<S>& P = tape.value(self);
                            std::vector<double> draw(T);
                            double to_lo = 0, to_hi = 0;
                            for (std::size_t t = 0; t < T; ++t) {
                                draw[t] = double(Gr[t]) / range;
                                to_lo += double(Gr[t]) * (double(P[t]) - 1.0) / range;
                                to_hi -= double(Gr[t]) * double(P[t]) / range;
                            }
                            draw[lo] += to_lo;
                            draw[hi] += to_hi;
                            Tensor<S>& dG = tape.grad(g.id);
                            for (std::size_t k = 0; k < K; ++k)
                                for (std::size_t t = 0; t < T; ++t) dG[k * T + t] += static_cast<S>(draw[t]);
                        });
}

template <typename S>
struct GrounderOutput {
    ad::Var<S> mu;     // [K]
    ad::Var<S> masks;  // [K x T]
    ad::Var<S> p;      // [T]
};

/// Full generator forward for one sample.
template <typename S>
GrounderOutput<S> run_grounder(ad::Var<S> frames, ad::Var<S> question, const std::vector<bool>& question_mask,
                               const BoundParams<S>& P, const GrounderDims& dims, double sigma) {
    const std::size_t T = frames.rows();
    if (question_mask.size() != question.rows()) throw ShapeError("question mask length does not match question");
    std::vector<bool> key_mask(T, true);
    key_mask.insert(key_mask.end(), question_mask.begin(), question_mask.end());
    auto m = embed_inputs(frames, question, P, dims.T_max);
    auto encoded = encode(m, key_mask, T, P, dims.layers, dims.heads);
    auto mu = pool_and_predict_centers(encoded, P);
    auto masks = gaussian_masks(mu, sigma, T);
    auto p = combine_masks(masks);
    return {mu, masks, p};
}

} // namespace gcg
