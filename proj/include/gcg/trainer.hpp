#pragma once

// Training loop, evaluation arms and metric logging.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcg/checkpoint.hpp"
#include "gcg/config.hpp"
#include "gcg/dataset.hpp"
#include "gcg/model.hpp"
#include "gcg/objectives.hpp"
#include "gcg/optim.hpp"
#include "gcg/seed.hpp"
#include "gcg/synth.hpp"

namespace gcg {

using GroundTruthMap = std::map<std::string, synth::GroundTruth>;

/// Splits `indices` into batches; a trailing batch of one joins the previous
/// batch so inter-video negatives always have another sample to draw from.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& indices,
                                                          std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < indices.size(); i += batch_size) {
        const std::size_t end = std::min(indices.size(), i + batch_size);
        out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(i),
                         indices.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (out.size() >= 2 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back()[0]);
        out.pop_back();
    }
    return out;
}

struct SampleEvaluation {
    std::string id;
    std::string split;
    std::size_t answer = 0;
    std::vector<std::size_t> gcg, uniform, oracle;  // 1-based selections
    std::size_t pred_gcg = 0, pred_uniform = 0, pred_oracle = 0;
    std::vector<double> mu, p;
    std::vector<std::size_t> pseudo_labels;
    std::optional<LossBreakdown> loss;
};

struct ArmMetrics {
    std::size_t n = 0;
    double recall = std::numeric_limits<double>::quiet_NaN();  // needs ground truth
    double accuracy = 0;
    double pseudo_agreement = 0;
};

struct SplitMetrics {
    std::string split;
    std::size_t n = 0;
    std::optional<LossBreakdown> loss;
    ArmMetrics gcg, uniform, oracle;
    double center_error = std::numeric_limits<double>::quiet_NaN();         // vs ground truth
    double center_error_pseudo = std::numeric_limits<double>::quiet_NaN();  // vs pseudo-labels
};

/// Hard-path evaluation of every index, plus the uniform and pseudo-label
/// oracle arms through the same answer head. With `with_losses`, the
/// training-path losses are computed too (batched for inter negatives).
template <typename S>
std::vector<SampleEvaluation> evaluate_samples(const Model<S>& model, const Dataset<S>& ds,
                                               const std::vector<std::size_t>& indices, const RunConfig& cfg,
                                               bool with_losses, std::uint64_t epoch = 0) {
    std::vector<SampleEvaluation> out;
    out.reserve(indices.size());
    const auto batches = make_batches(indices, std::max<std::size_t>(cfg.batch_size, 2));
    const auto uniform = uniform_selection(ds.T, cfg.K);
    // Evaluation draws use their own step range so they never collide with training draws.
    const std::uint64_t eval_tag = std::uint64_t{1} << 40;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const std::span<const std::size_t> batch(batches[b]);
        const std::size_t qlen = max_question_length(ds, batch);
        for (std::size_t pos = 0; pos < batch.size(); ++pos) {
            const SampleData<S>& s = ds.samples[batch[pos]];
            ad::Tape<S> tape;
            BoundParams<S> P(model.params, tape);
            SampleEvaluation e;
            e.id = s.id;
            e.split = s.split;
            e.answer = s.answer;
            e.pseudo_labels = s.pseudo_labels;
            GrounderOutput<S> g;
            if (with_losses && (batch.size() >= 2 || cfg.N_inter == 0)) {
                StepContext ctx{epoch, eval_tag + b, SelectionMode::Sample, nullptr};
                auto f = forward_train_sample(tape, P, model, ds, batch, pos, cfg, ctx);
                g = f.grounder;
                e.loss = LossBreakdown{f.l_vqa.value()[0], f.l_reg.value()[0], f.l_con.value()[0], f.total.value()[0]};
            }
            auto [qpad, qmask] = padded_question(s.question, qlen);
            auto frames = tape.constant(s.frames);
            auto question = tape.constant(std::move(qpad));
            auto candidates = tape.constant(s.candidates);
            if (!e.loss) g = run_grounder(frames, question, qmask, P, model.dims, cfg.sigma);
            const Tensor<S>& p = g.p.value();
            e.p.assign(p.data().begin(), p.data().end());
            e.mu.assign(g.mu.value().data().begin(), g.mu.value().data().end());
            e.gcg = hard_topk(p, cfg.K);
            e.uniform = uniform;
            e.oracle = s.pseudo_labels;
            auto pred = [&](const std::vector<std::size_t>& sel) {
                const auto logits = answer_logits(tape, P, frames, question, qmask, candidates, s.answer, sel);
                return synth::argmax(std::span<const S>(logits));
            };
            e.pred_gcg = pred(e.gcg);
            e.pred_uniform = pred(e.uniform);
            e.pred_oracle = pred(e.oracle);
            out.push_back(std::move(e));
        }
    }
    return out;
}

inline SplitMetrics summarize(const std::vector<SampleEvaluation>& evals, const std::string& split,
                              const GroundTruthMap* truth) {
    SplitMetrics m;
    m.split = split;
    LossBreakdown loss;
    std::size_t with_loss = 0;
    double recall[3] = {0, 0, 0}, agree[3] = {0, 0, 0}, correct[3] = {0, 0, 0};
    double cerr = 0, cerr_pseudo = 0;
    std::size_t with_truth = 0;
    for (const auto& e : evals) {
        if (e.split != split) continue;
        ++m.n;
        if (e.loss) {
            ++with_loss;
            loss.l_vqa += e.loss->l_vqa;
            loss.l_reg += e.loss->l_reg;
            loss.l_con += e.loss->l_con;
            loss.total += e.loss->total;
        }
        const std::vector<std::size_t>* sels[3] = {&e.gcg, &e.uniform, &e.oracle};
        const std::size_t preds[3] = {e.pred_gcg, e.pred_uniform, e.pred_oracle};
        for (int a = 0; a < 3; ++a) {
            correct[a] += preds[a] == e.answer ? 1.0 : 0.0;
            agree[a] += synth::keyframe_recall(*sels[a], e.pseudo_labels);
        }
        cerr_pseudo += synth::center_error(std::span<const double>(e.mu), e.pseudo_labels, e.p.size());
        if (truth) {
            auto it = truth->find(e.id);
            if (it != truth->end()) {
                ++with_truth;
                for (int a = 0; a < 3; ++a) recall[a] += synth::keyframe_recall(*sels[a], it->second.timestamps);
                cerr += synth::center_error(std::span<const double>(e.mu), it->second.timestamps, e.p.size());
            }
        }
    }
    if (m.n == 0) return m;
    if (with_loss == m.n) {
        const double n = double(with_loss);
        m.loss = LossBreakdown{loss.l_vqa / n, loss.l_reg / n, loss.l_con / n, loss.total / n};
    }
    ArmMetrics* arms[3] = {&m.gcg, &m.uniform, &m.oracle};
    for (int a = 0; a < 3; ++a) {
        arms[a]->n = m.n;
        arms[a]->accuracy = correct[a] / double(m.n);
        arms[a]->pseudo_agreement = agree[a] / double(m.n);
        if (with_truth == m.n) arms[a]->recall = recall[a] / double(m.n);
    }
    m.center_error_pseudo = cerr_pseudo / double(m.n);
    if (with_truth == m.n) m.center_error = cerr / double(m.n);
    return m;
}

inline std::string format_number(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

struct EpochMetrics {
    std::size_t epoch = 0;
    SplitMetrics train, test;
};

inline const char* kMetricsHeader =
    "epoch,split,l_vqa,l_reg,l_con,total,accuracy,pseudo_agreement,center_error_pseudo,recall,center_error,"
    "uniform_accuracy,oracle_accuracy\n";

inline std::string metrics_row(std::size_t epoch, const SplitMetrics& m) {
    const LossBreakdown l = m.loss.value_or(LossBreakdown{NAN, NAN, NAN, NAN});
    std::string row = std::to_string(epoch) + "," + m.split;
    for (double v : {l.l_vqa, l.l_reg, l.l_con, l.total, m.gcg.accuracy, m.gcg.pseudo_agreement, m.center_error_pseudo,
                     m.gcg.recall, m.center_error, m.uniform.accuracy, m.oracle.accuracy}) {
        row += "," + format_number(v);
    }
    return row + "\n";
}

struct TrainOptions {
    std::filesystem::path out_dir;  // empty: keep everything in memory
    bool evaluate_each_epoch = true;
    std::ostream* progress = nullptr;
    nlohmann::json metadata = nlohmann::json::object();  // merged into run.json
};

template <typename S>
struct TrainResult {
    Model<S> model;
    std::vector<EpochMetrics> history;
    std::vector<LossBreakdown> steps;
};

/// Runs the joint objective with AdamW. Only manifest data is visible here;
/// ground-truth timestamps never reach this function.
template <typename S>
TrainResult<S> train_model(const RunConfig& cfg, const Dataset<S>& ds, const TrainOptions& opt = {}) {
    namespace fs = std::filesystem;
    cfg.validate();
    if (cfg.batch_size == 1 && cfg.N_inter > 0) {
        throw ConfigurationError("batch_size 1 leaves no other video for N_inter > 0 inter negatives");
    }
    if (ds.D_I != cfg.D_I) {
        throw ValidationError("config D_I = " + std::to_string(cfg.D_I) + " but data has D_I = " +
                              std::to_string(ds.D_I));
    }
    if (ds.T != cfg.T) {
        throw ValidationError("config T = " + std::to_string(cfg.T) + " but data has T = " + std::to_string(ds.T));
    }
    const auto train_idx = ds.split_indices("train");
    const auto test_idx = ds.split_indices("test");
    if (train_idx.empty() && cfg.epochs > 0) throw ValidationError("no training samples in dataset");

    TrainResult<S> result{make_model<S>(cfg, ds.D_I), {}, {}};
    Model<S>& model = result.model;
    const AdamWOptions adam{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};

    std::ofstream steps_csv, metrics_csv;
    if (!opt.out_dir.empty()) {
        fs::create_directories(opt.out_dir);
        steps_csv.open(opt.out_dir / "steps.csv");
        steps_csv << "step,l_vqa,l_reg,l_con,total\n";
        metrics_csv.open(opt.out_dir / "metrics.csv");
        metrics_csv << kMetricsHeader;
    }

    std::uint64_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order = train_idx;
        std::mt19937_64 shuffle_rng(derive_seed({cfg.seed, kStreamShuffle, epoch}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        LossBreakdown epoch_loss;
        std::size_t epoch_samples = 0;
        for (const auto& batch : make_batches(order, cfg.batch_size)) {
            model.params.zero_grad();
            StepContext ctx{epoch, step, SelectionMode::Sample, nullptr};
            const LossBreakdown l = accumulate_batch_gradients(model, ds, std::span<const std::size_t>(batch), cfg, ctx);
            adamw_step(model.params, adam);
            ++step;
            result.steps.push_back(l);
            const double n = double(batch.size());
            epoch_loss.l_vqa += l.l_vqa * n;
            epoch_loss.l_reg += l.l_reg * n;
            epoch_loss.l_con += l.l_con * n;
            epoch_loss.total += l.total * n;
            epoch_samples += batch.size();
            if (steps_csv.is_open()) {
                steps_csv << step << ',' << format_number(l.l_vqa) << ',' << format_number(l.l_reg) << ','
                          << format_number(l.l_con) << ',' << format_number(l.total) << '\n';
            }
        }
        EpochMetrics em;
        em.epoch = epoch + 1;
        if (opt.evaluate_each_epoch || epoch + 1 == cfg.epochs) {
            em.train = summarize(evaluate_samples(model, ds, train_idx, cfg, false), "train", nullptr);
            const double n = double(std::max<std::size_t>(epoch_samples, 1));
            em.train.loss = LossBreakdown{epoch_loss.l_vqa / n, epoch_loss.l_reg / n, epoch_loss.l_con / n,
                                          epoch_loss.total / n};
            if (!test_idx.empty()) {
                em.test = summarize(evaluate_samples(model, ds, test_idx, cfg, true, epoch), "test", nullptr);
            }
            if (metrics_csv.is_open()) {
                metrics_csv << metrics_row(em.epoch, em.train);
                if (!test_idx.empty()) metrics_csv << metrics_row(em.epoch, em.test);
            }
        }
        if (opt.progress) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            *opt.progress << "epoch " << em.epoch << "/" << cfg.epochs << " loss " << format_number(em.train.loss ? em.train.loss->total : NAN)
                          << " train_acc " << format_number(em.train.gcg.accuracy) << " train_agree "
                          << format_number(em.train.gcg.pseudo_agreement) << " test_acc "
                          << format_number(em.test.gcg.accuracy) << " (" << format_number(secs) << " s)\n";
        }
        result.history.push_back(std::move(em));
    }

    if (!opt.out_dir.empty()) {
        save_checkpoint(model, cfg, cfg.epochs, opt.out_dir / "checkpoint");
        nlohmann::json meta{{"config", to_json(cfg)},
                            {"steps", step},
                            {"train_samples", train_idx.size()},
                            {"test_samples", test_idx.size()},
                            {"parameters", model.params.parameter_count()}};
        meta.update(opt.metadata);
        std::ofstream(opt.out_dir / "run.json") << meta.dump(1) << '\n';
    }
    return result;
}

/// Writes per-sample selections: sample id, split, arm selections and predictions.
inline void write_selection_dump(const std::vector<SampleEvaluation>& evals, std::ostream& out) {
    auto join = [](const std::vector<std::size_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
        return s;
    };
    out << "sample_id,split,selected,uniform,pseudo_oracle,answer,pred_gcg,pred_uniform,pred_oracle\n";
    for (const auto& e : evals) {
        out << e.id << ',' << e.split << ',' << join(e.gcg) << ',' << join(e.uniform) << ',' << join(e.oracle) << ','
            << e.answer << ',' << e.pred_gcg << ',' << e.pred_uniform << ',' << e.pred_oracle << '\n';
    }
}

inline nlohmann::json to_json(const ArmMetrics& a) {
    nlohmann::json j{{"n", a.n}, {"accuracy", a.accuracy}, {"pseudo_agreement", a.pseudo_agreement}};
    j["recall"] = std::isnan(a.recall) ? nlohmann::json(nullptr) : nlohmann::json(a.recall);
    return j;
}

inline nlohmann::json to_json(const SplitMetrics& m) {
    nlohmann::json j{{"split", m.split},
                     {"n", m.n},
                     {"gcg", to_json(m.gcg)},
                     {"uniform", to_json(m.uniform)},
                     {"pseudo_oracle", to_json(m.oracle)}};
    j["center_error"] = std::isnan(m.center_error) ? nlohmann::json(nullptr) : nlohmann::json(m.center_error);
    j["center_error_pseudo"] = m.center_error_pseudo;
    return j;
}

inline const char* kEvalHeader = "split,arm,n,accuracy,recall,pseudo_agreement,center_error,center_error_pseudo\n";

/// One row per (split, arm). Grounding columns stay empty without ground truth.
inline void write_eval_metrics(const std::vector<SplitMetrics>& splits, std::ostream& out) {
    out << kEvalHeader;
    for (const auto& m : splits) {
        const std::pair<const char*, const ArmMetrics*> arms[] = {
            {"gcg", &m.gcg}, {"uniform", &m.uniform}, {"pseudo_oracle", &m.oracle}};
        for (const auto& [name, a] : arms) {
            const bool is_gcg = a == &m.gcg;
            out << m.split << ',' << name << ',' << m.n << ',' << format_number(a->accuracy) << ','
                << format_number(a->recall) << ',' << format_number(a->pseudo_agreement) << ','
                << (is_gcg ? format_number(m.center_error) : "") << ','
                << (is_gcg ? format_number(m.center_error_pseudo) : "") << '\n';
        }
    }
}

/// Per-frame Gaussian masks and combined weights: sample_id, t, g_1..g_K, p_t.
template <typename S>
void write_weight_dump(const Model<S>& model, const Dataset<S>& ds, const RunConfig& cfg, std::ostream& out) {
    out << "sample_id,t";
    for (std::size_t k = 1; k <= cfg.K; ++k) out << ",g_" << k;
    out << ",p_t\n";
    for (const auto& s : ds.samples) {
        ad::Tape<S> tape;
        BoundParams<S> P(model.params, tape);
        const std::vector<bool> qmask(s.question.rows(), true);
        const auto g = run_grounder(tape.constant(s.frames), tape.constant(s.question), qmask, P, model.dims, cfg.sigma);
        const Tensor<S>& masks = g.masks.value();
        const Tensor<S>& p = g.p.value();
        const std::size_t T = p.size();
        for (std::size_t t = 0; t < T; ++t) {
            out << s.id << ',' << t + 1;
            for (std::size_t k = 0; k < cfg.K; ++k) out << ',' << format_number(masks[k * T + t]);
            out << ',' << format_number(p[t]) << '\n';
        }
    }
}

} // namespace gcg
