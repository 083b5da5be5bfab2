#pragma once

// Per-sample forward pass of the full pipeline and batch gradient assembly.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "gcg/autodiff.hpp"
#include "gcg/config.hpp"
#include "gcg/dataset.hpp"
#include "gcg/grounder.hpp"
#include "gcg/objectives.hpp"
#include "gcg/ops.hpp"
#include "gcg/optim.hpp"
#include "gcg/seed.hpp"
#include "gcg/selection.hpp"

namespace gcg {

inline GrounderDims dims_from_config(const RunConfig& c, std::size_t D_I) {
    return GrounderDims{D_I, c.D_G, c.layers, c.heads, c.K, kMaxFrames};
}

/// Grounder and surrogate answer head parameters.
template <typename S>
struct Model {
    GrounderDims dims;
    ParamStore<S> params;
};

template <typename S>
Model<S> make_model(const RunConfig& cfg, std::size_t D_I) {
    Model<S> m;
    m.dims = dims_from_config(cfg, D_I);
    std::mt19937_64 rng(derive_seed({cfg.seed, kStreamInit}));
    init_grounder(m.params, m.dims, rng);
    init_answer_head(m.params, D_I, rng);
    return m;
}

/// Identifies one optimizer step so every random draw can be re-derived.
struct StepContext {
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    SelectionMode mode = SelectionMode::Sample;
    std::vector<SelectionLinearization>* linearizations = nullptr;  // one per batch position
};

template <typename S>
struct SampleForward {
    ad::Var<S> total, l_vqa, l_reg, l_con;
    GrounderOutput<S> grounder;
    std::vector<std::size_t> hard;  // 1-based
};

/// Pads the question to `length` rows with zeros; mask marks real tokens.
template <typename S>
std::pair<Tensor<S>, std::vector<bool>> padded_question(const Tensor<S>& q, std::size_t length) {
    const std::size_t L = q.rows(), D = q.cols();
    if (length < L) throw ContractError("padded_question: target length shorter than question");
    std::vector<S> data(q.storage());
    data.resize(length * D, S{0});
    std::vector<bool> mask(length, false);
    std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(L), true);
    return {Tensor<S>({length, D}, std::move(data)), std::move(mask)};
}

template <typename S>
std::size_t max_question_length(const Dataset<S>& ds, std::span<const std::size_t> batch) {
    std::size_t m = 0;
    for (std::size_t i : batch) m = std::max(m, ds.samples[i].question.rows());
    return m;
}

/// Training-path forward for batch position `pos`: grounder, perturbed
/// top-K soft gather, negative mining, and the three losses.
template <typename S>
SampleForward<S> forward_train_sample(ad::Tape<S>& tape, const BoundParams<S>& P, const Model<S>& model,
                                      const Dataset<S>& ds, std::span<const std::size_t> batch, std::size_t pos,
                                      const RunConfig& cfg, const StepContext& ctx) {
    const SampleData<S>& s = ds.samples[batch[pos]];
    const std::size_t T = s.frames.rows();
    auto [qpad, qmask] = padded_question(s.question, max_question_length(ds, batch));
    auto frames = tape.constant(s.frames);
    auto question = tape.constant(std::move(qpad));

    SampleForward<S> out;
    out.grounder = run_grounder(frames, question, qmask, P, model.dims, cfg.sigma);

    PerturbedTopKOptions sel;
    sel.K = cfg.K;
    sel.eps = cfg.eps_p;
    sel.samples = cfg.n_p;
    sel.seed = derive_seed({cfg.seed, kStreamPerturb, ctx.epoch, ctx.step, pos});
    sel.mode = ctx.mode;
    if (ctx.mode != SelectionMode::Sample) sel.linearization = &ctx.linearizations->at(pos);
    auto soft = perturbed_topk(out.grounder.p, sel);
    auto selected = gather_selected(soft, frames);

    const Tensor<S>& p = out.grounder.p.value();
    out.hard = hard_topk(p, cfg.K);
    std::vector<std::size_t> counts;
    for (std::size_t i : batch) counts.push_back(ds.samples[i].frames.rows());
    const NegativeSet neg = mine_negatives(std::span<const S>(p.data()), out.hard, counts, pos, cfg.N_intra,
                                           cfg.N_inter, derive_seed({cfg.seed, kStreamInter, ctx.epoch, ctx.step, pos}));
    std::optional<ad::Var<S>> negatives;
    const std::size_t n_neg = neg.intra.size() + neg.inter.size();
    if (n_neg > 0) {
        const std::size_t D = s.frames.cols();
        Tensor<S> rows({n_neg, D});
        std::size_t r = 0;
        for (std::size_t t : neg.intra) {
            std::copy_n(s.frames.row(t - 1).begin(), D, rows.row(r++).begin());
        }
        for (const FrameRef& f : neg.inter) {
            const auto src = ds.samples[batch[f.sample]].frames.row(f.frame - 1);
            std::copy_n(src.begin(), D, rows.row(r++).begin());
        }
        negatives = tape.constant(std::move(rows));
    }

    out.l_reg = regression_loss(out.grounder.mu, s.pseudo_labels, T);
    out.l_con = info_nce(tape.constant(s.description), selected, negatives, cfg.tau);
    out.l_vqa = vqa_surrogate_loss(selected, question, qmask, tape.constant(s.candidates), s.answer, P).loss;
    out.total = joint_loss(out.l_vqa, out.l_reg, out.l_con, cfg.alpha1, cfg.alpha2);
    return out;
}

/// Forward + backward over a batch; gradients of the mean loss accumulate in
/// model.params. Returns the mean loss breakdown.
template <typename S>
LossBreakdown accumulate_batch_gradients(Model<S>& model, const Dataset<S>& ds, std::span<const std::size_t> batch,
                                         const RunConfig& cfg, const StepContext& ctx) {
    LossBreakdown mean;
    const S inv = S{1} / static_cast<S>(batch.size());
    for (std::size_t pos = 0; pos < batch.size(); ++pos) {
        ad::Tape<S> tape;
        BoundParams<S> P(model.params, tape);
        auto f = forward_train_sample(tape, P, model, ds, batch, pos, cfg, ctx);
        backward(f.total, model.params, inv);
        mean.l_vqa += f.l_vqa.value()[0];
        mean.l_reg += f.l_reg.value()[0];
        mean.l_con += f.l_con.value()[0];
        mean.total += f.total.value()[0];
    }
    const double n = double(batch.size());
    mean.l_vqa /= n;
    mean.l_reg /= n;
    mean.l_con /= n;
    mean.total /= n;
    return mean;
}

/// Mean joint loss of a batch without touching gradients.
template <typename S>
double batch_loss(const Model<S>& model, const Dataset<S>& ds, std::span<const std::size_t> batch,
                  const RunConfig& cfg, const StepContext& ctx) {
    double total = 0;
    for (std::size_t pos = 0; pos < batch.size(); ++pos) {
        ad::Tape<S> tape;
        BoundParams<S> P(model.params, tape);
        total += forward_train_sample(tape, P, model, ds, batch, pos, cfg, ctx).total.value()[0];
    }
    return total / double(batch.size());
}

/// Evenly spaced baseline frames: ceil((2k - 1) T / 2K), k = 1..K.
inline std::vector<std::size_t> uniform_selection(std::size_t T, std::size_t K) {
    std::vector<std::size_t> out;
    for (std::size_t k = 1; k <= K; ++k) {
        const std::size_t num = (2 * k - 1) * T;
        out.push_back(std::clamp<std::size_t>((num + 2 * K - 1) / (2 * K), 1, T));
    }
    return out;
}

/// Answer logits from the surrogate head for a hard frame selection.
template <typename S>
std::vector<S> answer_logits(ad::Tape<S>& tape, const BoundParams<S>& P, ad::Var<S> frames, ad::Var<S> question,
                             const std::vector<bool>& qmask, ad::Var<S> candidates, std::size_t answer,
                             const std::vector<std::size_t>& selection) {
    auto selected = gather_selected(selection, frames);
    auto out = vqa_surrogate_loss(selected, question, qmask, candidates, answer, P);
    const auto& v = out.logits.value();
    return std::vector<S>(v.data().begin(), v.data().end());
}

} // namespace gcg
