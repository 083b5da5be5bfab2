// gcg: command-line front end for data generation, training, evaluation and checks.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gcg/checkpoint.hpp"
#include "gcg/config.hpp"
#include "gcg/dataset.hpp"
#include "gcg/gradcheck_suite.hpp"
#include "gcg/manifest.hpp"
#include "gcg/pseudolabel.hpp"
#include "gcg/sweep.hpp"
#include "gcg/synth.hpp"
#include "gcg/trainer.hpp"

namespace fs = std::filesystem;
using namespace gcg;

namespace {

struct Common {
    std::string config;
    std::string manifest;
    std::string out;
    std::string checkpoint;
    std::optional<std::uint64_t> seed;
};

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    return cfg;
}

nlohmann::json read_json_arg(const std::string& arg) {
    // Inline JSON objects are accepted as well as file paths.
    if (!arg.empty() && arg.front() == '{') return nlohmann::json::parse(arg);
    std::ifstream in(arg);
    if (!in) throw NotFoundError("file not found: " + arg);
    return nlohmann::json::parse(in);
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        const double v = std::stod(item, &used);
        if (used != item.size()) throw ValidationError("not a number: '" + item + "'");
        out.push_back(v);
    }
    return out;
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << text;
    if (!out) throw Error("cannot write " + path.string());
}

template <typename S>
int train_with(const RunConfig& cfg, const Manifest& manifest, const Common& c) {
    if (manifest.T != cfg.T) {
        throw ValidationError("config T = " + std::to_string(cfg.T) + " but manifest T = " + std::to_string(manifest.T));
    }
    const Dataset<S> ds = load_dataset<S>(manifest, cfg.K);
    TrainOptions opt;
    opt.out_dir = c.out;
    opt.progress = &std::cerr;
    opt.metadata = {{"manifest", fs::absolute(c.manifest).string()}};
    train_model(cfg, ds, opt);
    return 0;
}

int cmd_train(const Common& c) {
    if (c.manifest.empty() || c.out.empty()) throw ValidationError("train needs --manifest and --out");
    const RunConfig cfg = resolve_config(c);
    const Manifest manifest = load_manifest(c.manifest);
    return cfg.precision == PrecisionMode::FP64 ? train_with<double>(cfg, manifest, c)
                                                : train_with<float>(cfg, manifest, c);
}

template <typename S>
int evaluate_with(const CheckpointInfo& info, const Common& c, const std::string& truth_path) {
    const Model<S> model = load_checkpoint<S>(c.checkpoint);
    const RunConfig& cfg = info.config;
    const Manifest manifest = load_manifest(c.manifest);
    if (manifest.D_I != info.D_I) throw ValidationError("manifest D_I does not match the checkpoint");
    const Dataset<S> ds = load_dataset<S>(manifest, cfg.K);
    std::optional<GroundTruthMap> truth;
    if (!truth_path.empty()) truth = synth::load_ground_truth(truth_path);
    std::vector<std::size_t> all(ds.samples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto evals = evaluate_samples(model, ds, all, cfg, false);
    std::vector<SplitMetrics> splits;
    for (const char* split : {"train", "test"}) {
        SplitMetrics m = summarize(evals, split, truth ? &*truth : nullptr);
        if (m.n > 0) splits.push_back(std::move(m));
    }
    const fs::path out = c.out;
    fs::create_directories(out);
    std::ostringstream metrics, selections;
    write_eval_metrics(splits, metrics);
    write_selection_dump(evals, selections);
    write_file(out / "metrics.csv", metrics.str());
    write_file(out / "selections.csv", selections.str());
    nlohmann::json meta{{"checkpoint", fs::absolute(c.checkpoint).string()},
                        {"manifest", fs::absolute(c.manifest).string()},
                        {"ground_truth", truth_path.empty() ? nlohmann::json(nullptr) : nlohmann::json(truth_path)},
                        {"splits", nlohmann::json::array()}};
    for (const auto& m : splits) meta["splits"].push_back(to_json(m));
    write_file(out / "eval.json", meta.dump(1) + "\n");
    for (const auto& m : splits) {
        std::cerr << m.split << ": accuracy " << format_number(m.gcg.accuracy) << " (uniform "
                  << format_number(m.uniform.accuracy) << ", pseudo-oracle " << format_number(m.oracle.accuracy) << ")";
        if (!std::isnan(m.gcg.recall)) std::cerr << " recall " << format_number(m.gcg.recall);
        std::cerr << "\n";
    }
    return 0;
}

int cmd_evaluate(const Common& c, const std::string& truth_path) {
    if (c.checkpoint.empty() || c.manifest.empty() || c.out.empty()) {
        throw ValidationError("evaluate needs --checkpoint, --manifest and --out");
    }
    const CheckpointInfo info = read_checkpoint_info(c.checkpoint);
    return info.precision == PrecisionMode::FP64 ? evaluate_with<double>(info, c, truth_path)
                                                 : evaluate_with<float>(info, c, truth_path);
}

template <typename S>
int dump_with(const CheckpointInfo& info, const Common& c) {
    const Model<S> model = load_checkpoint<S>(c.checkpoint);
    const Dataset<S> ds = load_dataset<S>(load_manifest(c.manifest), info.config.K);
    std::ostringstream out;
    write_weight_dump(model, ds, info.config, out);
    if (c.out.empty()) {
        std::cout << out.str();
    } else {
        write_file(c.out, out.str());
    }
    return 0;
}

int cmd_dump_weights(const Common& c) {
    if (c.checkpoint.empty() || c.manifest.empty()) throw ValidationError("dump-weights needs --checkpoint and --manifest");
    const CheckpointInfo info = read_checkpoint_info(c.checkpoint);
    return info.precision == PrecisionMode::FP64 ? dump_with<double>(info, c) : dump_with<float>(info, c);
}

int cmd_synth(const Common& c, const std::string& spec_arg) {
    if (c.out.empty()) throw ValidationError("synth needs --out");
    synth::SynthSpec spec = spec_arg.empty() ? synth::SynthSpec{} : synth::spec_from_json(read_json_arg(spec_arg));
    if (c.seed) spec.seed = *c.seed;
    const auto generated = synth::generate_dataset(spec, c.out);
    std::cerr << "wrote " << generated.manifest.string() << " and " << generated.ground_truth.string() << "\n";
    return 0;
}

int cmd_pseudolabel(const Common& c, std::size_t k) {
    if (c.manifest.empty()) throw ValidationError("pseudolabel needs --manifest");
    Manifest manifest = load_manifest(c.manifest);
    std::ostringstream dump;
    const std::size_t recomputed = refresh_pseudo_labels(manifest, k, &dump);
    save_manifest(manifest, c.manifest);
    if (c.out.empty()) {
        std::cout << dump.str();
    } else {
        write_file(c.out, dump.str());
    }
    std::cerr << "pseudo-labels recomputed for " << recomputed << " of " << manifest.samples.size() << " samples\n";
    return 0;
}

int cmd_gradcheck(const Common& c, const std::string& fault_op) {
    const RunConfig cfg = resolve_config(c);
    GradcheckOptions opt;
    opt.seed = cfg.seed;
    opt.fault_op = fault_op;
    const GradcheckReport report = run_gradcheck(cfg, opt);
    const std::string text = to_json(report).dump(1) + "\n";
    if (c.out.empty()) {
        std::cout << text;
    } else {
        write_file(fs::path(c.out) / "gradcheck.json", text);
    }
    for (const auto& chk : report.checks) {
        if (!chk.ok) {
            std::cerr << "FAIL " << chk.kind << " " << chk.name << ": max relative error "
                      << format_number(chk.max_rel_error) << "\n";
        }
    }
    std::cerr << (report.ok() ? "gradcheck passed" : "gradcheck FAILED") << " in " << format_number(report.seconds)
              << " s\n";
    return report.ok() ? 0 : 1;
}

int cmd_sweep(const Common& c, const std::string& axis, const std::string& values, const std::string& seeds,
              const std::string& spec_arg) {
    if (c.out.empty()) throw ValidationError("sweep needs --out");
    const RunConfig base = resolve_config(c);
    synth::SynthSpec spec = spec_arg.empty() ? synth::SynthSpec{} : synth::spec_from_json(read_json_arg(spec_arg));
    SweepOptions opt;
    opt.seeds.clear();
    for (double s : parse_list(seeds)) opt.seeds.push_back(static_cast<std::uint64_t>(s));
    if (opt.seeds.empty()) throw ValidationError("sweep needs at least one seed");
    const auto vals = parse_list(values);
    if (vals.empty()) throw ValidationError("sweep needs at least one value");
    fs::create_directories(c.out);
    std::ofstream csv(fs::path(c.out) / "sweep.csv");
    opt.csv = &csv;
    opt.log = &std::cerr;
    const SweepAxis ax = parse_axis(axis);
    const auto rows = base.precision == PrecisionMode::FP64 ? run_sweep<double>(base, spec, ax, vals, opt)
                                                            : run_sweep<float>(base, spec, ax, vals, opt);
    nlohmann::json meta{{"axis", axis_name(ax)},
                        {"values", vals},
                        {"seeds", opt.seeds},
                        {"base_config", to_json(base)},
                        {"synth_spec", to_json(spec)},
                        {"rows", rows.size()}};
    write_file(fs::path(c.out) / "sweep.json", meta.dump(1) + "\n");
    return 0;
}

void add_common(CLI::App* app, Common& c, bool manifest, bool checkpoint) {
    app->add_option("--config", c.config, "run configuration (JSON)");
    app->add_option("--out", c.out, "output path");
    app->add_option("--seed", c.seed, "override the seed");
    if (manifest) app->add_option("--manifest", c.manifest, "dataset manifest (JSON)");
    if (checkpoint) app->add_option("--checkpoint", c.checkpoint, "checkpoint directory");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian-based contrastive grounding: synthetic data, training and evaluation"};
    app.require_subcommand(1);
    Common common;

    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string spec_arg;
    add_common(synth_cmd, common, false, false);
    synth_cmd->add_option("--spec", spec_arg, "synthetic spec (JSON file or inline object)");

    auto* pl_cmd = app.add_subcommand("pseudolabel", "refresh cached pseudo-labels and dump similarity scores");
    std::size_t k = 4;
    add_common(pl_cmd, common, true, false);
    pl_cmd->add_option("--k", k, "number of pseudo-label timestamps");

    auto* train_cmd = app.add_subcommand("train", "train the grounder and answer head");
    add_common(train_cmd, common, true, false);

    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint with hard top-K selection");
    std::string truth_path;
    add_common(eval_cmd, common, true, true);
    eval_cmd->add_option("--ground-truth", truth_path, "ground-truth sidecar for grounding metrics");

    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    std::string fault_op;
    add_common(gc_cmd, common, false, false);
    gc_cmd->add_option("--inject-fault", fault_op, "corrupt the gradient of one op (suite self-test)");

    auto* sweep_cmd = app.add_subcommand("sweep", "one-axis sweep on synthetic data");
    std::string axis, values, seeds = "0";
    add_common(sweep_cmd, common, false, false);
    sweep_cmd->add_option("--axis", axis, "T, sigma, N_intra, N_inter or K")->required();
    sweep_cmd->add_option("--values", values, "comma-separated values")->required();
    sweep_cmd->add_option("--seeds", seeds, "comma-separated seeds");
    sweep_cmd->add_option("--spec", spec_arg, "synthetic spec (JSON file or inline object)");

    auto* dump_cmd = app.add_subcommand("dump-weights", "per-frame Gaussian masks and weights as CSV");
    add_common(dump_cmd, common, true, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth_cmd) return cmd_synth(common, spec_arg);
        if (*pl_cmd) return cmd_pseudolabel(common, k);
        if (*train_cmd) return cmd_train(common);
        if (*eval_cmd) return cmd_evaluate(common, truth_path);
        if (*gc_cmd) return cmd_gradcheck(common, fault_op);
        if (*sweep_cmd) return cmd_sweep(common, axis, values, seeds, spec_arg);
        if (*dump_cmd) return cmd_dump_weights(common);
    } catch (const gcg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
