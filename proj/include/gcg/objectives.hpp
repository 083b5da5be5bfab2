#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "gcg/autodiff.hpp"
#include "gcg/errors.hpp"
#include "gcg/grounder.hpp"
#include "gcg/ops.hpp"
#include "gcg/optim.hpp"
#include "gcg/tensor.hpp"

namespace gcg {

struct LossBreakdown {
    double l_vqa = 0;
    double l_reg = 0;
    double l_con = 0;
    double total = 0;
};

inline constexpr double kSmoothL1Beta = 1.0;

/// Center regression: both mu and w/T are sorted ascending and paired in
/// order, then summed under smooth-L1 with beta = 1.
template <typename S>
ad::Var<S> regression_loss(ad::Var<S> mu, const std::vector<std::size_t>& w, std::size_t T) {
    const std::size_t K = mu.size();
    if (w.size() != K) {
        throw ContractError("regression_loss: " + std::to_string(K) + " centers but " + std::to_string(w.size()) +
                            " pseudo-labels");
    }
    const Tensor<S>& M = mu.value();
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return M[a] < M[b]; });
    std::vector<double> target(w.begin(), w.end());
    std::sort(target.begin(), target.end());
    for (double& x : target) x /= double(T);

    std::vector<double> slope(K);
    double loss = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const double d = double(M[order[k]]) - target[k];
        if (std::abs(d) < kSmoothL1Beta) {
            loss += 0.5 * d * d / kSmoothL1Beta;
            slope[order[k]] = d / kSmoothL1Beta;
        } else {
            loss += std::abs(d) - 0.5 * kSmoothL1Beta;
            slope[order[k]] = d > 0 ? 1.0 : -1.0;
        }
    }
    return mu.tape->push("regression_loss", {mu.id}, Tensor<S>::scalar(static_cast<S>(loss)),
                         [mu, slope = std::move(slope)](ad::Tape<S>& t, std::size_t self) {
                             const double g = t.grad(self)[0];
                             Tensor<S>& dM = t.grad(mu.id);
                             for (std::size_t k = 0; k < slope.size(); ++k) dM[k] += static_cast<S>(g * slope[k]);
                         });
}

/// -(1/K) sum_k log(exp(a_k) / (exp(a_k) + sum_i exp(b_i))) for positive
/// logits a [K] and negative logits b [N], in log-sum-exp form. With no
/// negatives the loss is 0.
template <typename S>
ad::Var<S> contrastive_logits_loss(ad::Var<S> positive, std::optional<ad::Var<S>> negative) {
    const std::size_t K = positive.size();
    const Tensor<S>& A = positive.value();
    std::vector<double> b;
    if (negative) b.assign(negative->value().data().begin(), negative->value().data().end());
    double neg_max = -INFINITY;
    for (double x : b) neg_max = std::max(neg_max, x);
    double neg_sum = 0;  // sum_i exp(b_i - neg_max)
    for (double x : b) neg_sum += std::exp(x - neg_max);

    // Responsibilities: share of each positive's denominator held by the negatives.
    std::vector<double> neg_share(K, 0.0);
    double loss = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const double a = A[k];
        if (b.empty()) continue;
        const double m = std::max(a, neg_max);
        const double lse = m + std::log(std::exp(a - m) + neg_sum * std::exp(neg_max - m));
        loss += lse - a;
        neg_share[k] = std::exp(neg_max + std::log(neg_sum) - lse);
    }
    loss /= double(K);
    std::vector<std::size_t> inputs{positive.id};
    if (negative) inputs.push_back(negative->id);
    auto neg = negative;
    return positive.tape->push(
        "contrastive_loss", inputs, Tensor<S>::scalar(static_cast<S>(loss)),
        [positive, neg, K, neg_share = std::move(neg_share), neg_max, neg_sum](ad::Tape<S>& t, std::size_t self) {
            if (!neg) return;
            const double g = t.grad(self)[0] / double(K);
            if (t.requires_grad(positive.id)) {
                Tensor<S>& dA = t.grad(positive.id);
                for (std::size_t k = 0; k < K; ++k) dA[k] += static_cast<S>(-g * neg_share[k]);
            }
            if (t.requires_grad(neg->id)) {
                const Tensor<S>& B = t.value(neg->id);
                Tensor<S>& dB = t.grad(neg->id);
                double share_sum = 0;
                for (double s : neg_share) share_sum += s;
                for (std::size_t i = 0; i < B.size(); ++i) {
                    const double frac = std::exp(double(B[i]) - neg_max) / neg_sum;
                    dB[i] += static_cast<S>(g * share_sum * frac);
                }
            }
        });
}

/// InfoNCE between the description and its positive frames. All vectors are
/// L2-normalized first; every positive shares one negative sum.
template <typename S>
ad::Var<S> info_nce(ad::Var<S> description, ad::Var<S> positives, std::optional<ad::Var<S>> negatives, double tau) {
    if (!(tau > 0)) throw ContractError("info_nce: temperature must be positive");
    const std::size_t D = description.size();
    if (positives.cols() != D || (negatives && negatives->cols() != D)) {
        throw ShapeError("info_nce: embedding widths disagree");
    }
    const S inv_tau = static_cast<S>(1.0 / tau);
    auto d = ad::transpose(ad::l2_normalize_rows(ad::reshape(description, {1, D})));
    auto pos = ad::scale(ad::matmul(ad::l2_normalize_rows(positives), d), inv_tau);
    std::optional<ad::Var<S>> neg;
    if (negatives) neg = ad::scale(ad::matmul(ad::l2_normalize_rows(*negatives), d), inv_tau);
    return contrastive_logits_loss(pos, neg);
}

/// Registers the surrogate answer head: [2 D_I -> D_I] GELU [D_I -> D_I].
template <typename S>
void init_answer_head(ParamStore<S>& store, std::size_t D_I, std::mt19937_64& rng) {
    store.add("vqa.fc1.weight", detail::xavier<S>(2 * D_I, D_I, rng));
    store.add("vqa.fc1.bias", Tensor<S>({D_I}));
    store.add("vqa.fc2.weight", detail::xavier<S>(D_I, D_I, rng));
    store.add("vqa.fc2.bias", Tensor<S>({D_I}));
}

template <typename S>
struct AnswerOutput {
    ad::Var<S> loss;
    ad::Var<S> logits;  // [1 x C]
};

/// Stand-in for the language model's answer loss: an MLP over
/// [mean(selected); masked-mean(question)] scores each candidate by a scaled
/// dot product, trained with cross-entropy.
template <typename S>
AnswerOutput<S> vqa_surrogate_loss(ad::Var<S> selected, ad::Var<S> question, const std::vector<bool>& question_mask,
                                   ad::Var<S> candidates, std::size_t answer, const BoundParams<S>& P) {
    const std::size_t C = candidates.rows(), D = candidates.cols();
    if (answer >= C) {
        throw ContractError("vqa_surrogate_loss: answer index " + std::to_string(answer) + " not below C = " +
                            std::to_string(C));
    }
    auto sel = ad::reshape(ad::mean_rows(selected), {1, D});
    auto q = ad::reshape(ad::mean_rows(question, &question_mask), {1, D});
    auto x = ad::concat_cols(std::vector<ad::Var<S>>{sel, q});
    auto h = ad::gelu(ad::add_bias(ad::matmul(x, P("vqa.fc1.weight")), P("vqa.fc1.bias")));
    auto r = ad::add_bias(ad::matmul(h, P("vqa.fc2.weight")), P("vqa.fc2.bias"));
    auto logits = ad::scale(ad::matmul(r, ad::transpose(candidates)), static_cast<S>(1.0 / std::sqrt(double(D))));
    return {ad::cross_entropy(logits, answer), logits};
}

/// total = l_vqa + alpha1 * l_reg + alpha2 * l_con.
template <typename S>
ad::Var<S> joint_loss(ad::Var<S> l_vqa, ad::Var<S> l_reg, ad::Var<S> l_con, double alpha1, double alpha2) {
    if (!(alpha1 >= 0) || !(alpha2 >= 0)) throw ContractError("joint_loss: weights must be non-negative");
    return ad::add(ad::add(l_vqa, ad::scale(l_reg, static_cast<S>(alpha1))), ad::scale(l_con, static_cast<S>(alpha2)));
}

inline LossBreakdown joint_loss(double l_vqa, double l_reg, double l_con, double alpha1, double alpha2) {
    if (!(alpha1 >= 0) || !(alpha2 >= 0)) throw ContractError("joint_loss: weights must be non-negative");
    return {l_vqa, l_reg, l_con, l_vqa + alpha1 * l_reg + alpha2 * l_con};
}

} // namespace gcg
