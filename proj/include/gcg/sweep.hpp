#pragma once

// One-axis hyperparameter sweeps on the in-memory synthetic benchmark.

#include <chrono>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "gcg/config.hpp"
#include "gcg/dataset.hpp"
#include "gcg/errors.hpp"
#include "gcg/synth.hpp"
#include "gcg/trainer.hpp"

namespace gcg {

enum class SweepAxis { T, Sigma, NIntra, NInter, K };

inline SweepAxis parse_axis(const std::string& s) {
    if (s == "T") return SweepAxis::T;
    if (s == "sigma") return SweepAxis::Sigma;
    if (s == "N_intra") return SweepAxis::NIntra;
    if (s == "N_inter") return SweepAxis::NInter;
    if (s == "K") return SweepAxis::K;
    throw ValidationError("unknown sweep axis '" + s + "' (expected T, sigma, N_intra, N_inter or K)");
}

inline std::string axis_name(SweepAxis a) {
    switch (a) {
    case SweepAxis::T: return "T";
    case SweepAxis::Sigma: return "sigma";
    case SweepAxis::NIntra: return "N_intra";
    case SweepAxis::NInter: return "N_inter";
    case SweepAxis::K: return "K";
    }
    return "";
}

/// Returns `base` with the axis set to `value`; integer axes reject fractions.
inline RunConfig apply_axis(RunConfig cfg, SweepAxis axis, double value) {
    auto as_count = [&](const char* what) {
        if (!(value >= 0) || std::floor(value) != value) {
            throw ValidationError(std::string(what) + " must be a non-negative integer");
        }
        return static_cast<std::size_t>(value);
    };
    switch (axis) {
    case SweepAxis::T: cfg.T = as_count("T"); break;
    case SweepAxis::Sigma: cfg.sigma = value; break;
    case SweepAxis::NIntra: cfg.N_intra = as_count("N_intra"); break;
    case SweepAxis::NInter: cfg.N_inter = as_count("N_inter"); break;
    case SweepAxis::K: cfg.K = as_count("K"); break;
    }
    cfg.validate();
    return cfg;
}

struct SweepRow {
    std::string axis;
    double value = 0;
    std::uint64_t seed = 0;
    SplitMetrics test;
    double seconds = 0;
};

inline const char* kSweepHeader =
    "axis,value,seed,recall,accuracy,center_error,pseudo_agreement,uniform_recall,uniform_accuracy,oracle_recall,"
    "oracle_accuracy,seconds\n";

inline std::string sweep_row(const SweepRow& r) {
    std::string s = r.axis + "," + format_number(r.value) + "," + std::to_string(r.seed);
    for (double v : {r.test.gcg.recall, r.test.gcg.accuracy, r.test.center_error, r.test.gcg.pseudo_agreement,
                     r.test.uniform.recall, r.test.uniform.accuracy, r.test.oracle.recall, r.test.oracle.accuracy,
                     r.seconds}) {
        s += "," + format_number(v);
    }
    return s + "\n";
}

struct SweepOptions {
    std::vector<std::uint64_t> seeds{0};
    std::ostream* csv = nullptr;  // rows are written as they finish
    std::ostream* log = nullptr;  // skipped values and progress
};

/// Independent training runs per (value, seed). The synthetic data follow
/// `spec`, with its frame count tied to the run's T. Invalid values are
/// skipped with a logged reason.
template <typename S = float>
std::vector<SweepRow> run_sweep(const RunConfig& base, const synth::SynthSpec& spec, SweepAxis axis,
                                const std::vector<double>& values, const SweepOptions& opt) {
    std::vector<SweepRow> rows;
    if (opt.csv) *opt.csv << kSweepHeader;
    for (double value : values) {
        RunConfig cfg;
        synth::SynthSpec sp = spec;
        try {
            cfg = apply_axis(base, axis, value);
            sp.T = cfg.T;
            sp.D_I = cfg.D_I;
            sp.validate();
            if (sp.K_star > sp.T) throw ValidationError("planted count exceeds T");
            if (cfg.batch_size == 1 && cfg.N_inter > 0) throw ConfigurationError("batch_size 1 with N_inter > 0");
        } catch (const Error& e) {
            if (opt.log) *opt.log << "skipping " << axis_name(axis) << " = " << format_number(value) << ": " << e.what() << "\n";
            continue;
        }
        const auto samples = synth::generate_samples(sp);
        GroundTruthMap truth;
        for (const auto& s : samples) truth[s.id] = s.truth;
        const Dataset<S> ds = dataset_from_synth<S>(samples, sp, cfg.K);
        for (std::uint64_t seed : opt.seeds) {
            cfg.seed = seed;
            const auto t0 = std::chrono::steady_clock::now();
            TrainOptions topt;
            topt.evaluate_each_epoch = false;
            auto result = train_model(cfg, ds, topt);
            const auto evals = evaluate_samples(result.model, ds, ds.split_indices("test"), cfg, false);
            SweepRow row{axis_name(axis), value, seed, summarize(evals, "test", &truth), 0};
            row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (opt.csv) {
                *opt.csv << sweep_row(row);
                opt.csv->flush();
            }
            if (opt.log) {
                *opt.log << axis_name(axis) << " = " << format_number(value) << " seed " << seed << ": recall "
                         << format_number(row.test.gcg.recall) << " accuracy " << format_number(row.test.gcg.accuracy)
                         << "\n";
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

} // namespace gcg
