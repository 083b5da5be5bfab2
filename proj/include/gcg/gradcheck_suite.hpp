#pragma once

// Finite-difference verification of every differentiable op, the model
// modules, and the full training objective on a small 64-bit instance.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcg/autodiff.hpp"
#include "gcg/config.hpp"
#include "gcg/dataset.hpp"
#include "gcg/gradcheck.hpp"
#include "gcg/grounder.hpp"
#include "gcg/model.hpp"
#include "gcg/objectives.hpp"
#include "gcg/ops.hpp"
#include "gcg/selection.hpp"
#include "gcg/synth.hpp"

namespace gcg {

struct GradcheckOptions {
    std::uint64_t seed = 0;
    std::size_t instances = 20;  // random instances per op
    double rel_tol = 1e-4;
    double abs_floor = 1e-6;
    double step = 1e-5;
    std::string fault_op;  // empty: no fault
    double fault_factor = 1.5;
};

struct CheckResult {
    std::string kind;   // op, module, chain
    std::string name;
    std::string group;  // chain entries: parameter group
    std::size_t instances = 0;
    std::size_t entries = 0;
    double max_abs_error = 0;
    double max_rel_error = 0;
    bool ok = true;
};

struct GradcheckReport {
    std::vector<CheckResult> checks;
    double seconds = 0;
    std::string fault_op;

    bool ok() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.ok; });
    }

    std::vector<std::string> failed(const std::string& kind) const {
        std::vector<std::string> out;
        for (const auto& c : checks)
            if (c.kind == kind && !c.ok) out.push_back(c.name);
        return out;
    }
};

inline nlohmann::json to_json(const GradcheckReport& r) {
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& c : r.checks) {
        nlohmann::json j{{"kind", c.kind},
                         {"name", c.name},
                         {"instances", c.instances},
                         {"entries", c.entries},
                         {"max_abs_error", c.max_abs_error},
                         {"max_rel_error", c.max_rel_error},
                         {"ok", c.ok}};
        if (!c.group.empty()) j["group"] = c.group;
        checks.push_back(std::move(j));
    }
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& c : r.checks) {
        if (c.kind != "chain") continue;
        auto& g = groups[c.group];
        if (g.is_null()) g = {{"max_rel_error", 0.0}, {"max_abs_error", 0.0}, {"ok", true}};
        g["max_rel_error"] = std::max(g["max_rel_error"].get<double>(), c.max_rel_error);
        g["max_abs_error"] = std::max(g["max_abs_error"].get<double>(), c.max_abs_error);
        g["ok"] = g["ok"].get<bool>() && c.ok;
    }
    nlohmann::json j{{"ok", r.ok()},
                     {"seconds", r.seconds},
                     {"failed_ops", r.failed("op")},
                     {"failed_modules", r.failed("module")},
                     {"failed_parameters", r.failed("chain")},
                     {"parameter_groups", groups},
                     {"checks", checks}};
    j["fault_op"] = r.fault_op.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.fault_op);
    return j;
}

namespace gc {

using TapeD = ad::Tape<double>;
using VarD = ad::Var<double>;
using Rng = std::mt19937_64;

inline TensorD random_tensor(Extents e, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    TensorD t(std::move(e));
    for (double& x : t.storage()) x = u(rng);
    return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double inner(const TensorD& a, const TensorD& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline void merge(CheckResult& into, const GradComparison& c, std::size_t entries) {
    into.max_abs_error = std::max(into.max_abs_error, c.max_abs_error);
    into.max_rel_error = std::max(into.max_rel_error, c.max_rel_error);
    into.ok = into.ok && c.ok;
    into.entries += entries;
}

/// Builds an op output from input variables on a tape.
using Builder = std::function<VarD(TapeD&, const std::vector<VarD>&)>;

/// One instance: analytic vector-Jacobian product against a random upstream
/// weighting, compared with central differences of <op(x), U>.
inline void check_instance(CheckResult& res, const std::vector<TensorD>& inputs, const Builder& build,
                           const GradcheckOptions& opt, Rng& rng) {
    TapeD tape;
    if (!opt.fault_op.empty()) tape.inject_fault(opt.fault_op, opt.fault_factor);
    std::vector<VarD> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    VarD out = build(tape, vars);
    const TensorD upstream = random_tensor(out.extents(), rng);
    tape.backward_from(out, upstream);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const TensorD analytic = tape.has_grad(vars[i].id) ? tape.grad(vars[i].id) : TensorD(inputs[i].extents());
        auto f = [&](const TensorD& probe) {
            TapeD t;
            std::vector<VarD> vs;
            for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(t.variable(j == i ? probe : inputs[j]));
            return inner(build(t, vs).value(), upstream);
        };
        const TensorD numeric = finite_diff_grad(f, inputs[i], opt.step);
        merge(res, compare_gradients(analytic, numeric, opt.rel_tol, opt.abs_floor), inputs[i].size());
    }
    ++res.instances;
}

struct OpCase {
    std::string name;
    // Draws one instance: inputs plus the builder that consumes them.
    std::function<std::pair<std::vector<TensorD>, Builder>(Rng&)> draw;
};

/// Values bounded away from zero, for kinked or singular points.
inline TensorD away_from_zero(Extents e, Rng& rng, double margin) {
    TensorD t = random_tensor(std::move(e), rng);
    for (double& x : t.storage()) x = (x < 0 ? -1.0 : 1.0) * (margin + std::abs(x));
    return t;
}

inline std::vector<OpCase> op_cases() {
    using In = std::vector<TensorD>;
    std::vector<OpCase> cases;
    auto dims = [](Rng& rng) { return std::pair{pick(rng, 1, 5), pick(rng, 1, 5)}; };
    cases.push_back({"matmul", [](Rng& rng) {
                         const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
                         return std::pair{In{random_tensor({m, k}, rng), random_tensor({k, n}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::matmul(v[0], v[1]); })};
                     }});
    cases.push_back({"transpose", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::transpose(v[0]); })};
                     }});
    cases.push_back({"reshape", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng)}, Builder([r, c](TapeD&, const std::vector<VarD>& v) {
                                              return ad::reshape(v[0], {c, r});
                                          })};
                     }});
    cases.push_back({"add", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng), random_tensor({r, c}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::add(v[0], v[1]); })};
                     }});
    cases.push_back({"sub", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng), random_tensor({r, c}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::sub(v[0], v[1]); })};
                     }});
    cases.push_back({"mul", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng), random_tensor({r, c}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::mul(v[0], v[1]); })};
                     }});
    cases.push_back({"scale", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         const double f = std::uniform_real_distribution<double>(-2, 2)(rng);
                         const bool by_var = pick(rng, 0, 1) == 1;
                         In in{random_tensor({r, c}, rng)};
                         if (by_var) in.push_back(random_tensor({1}, rng));
                         return std::pair{in, Builder([f, by_var](TapeD&, const std::vector<VarD>& v) {
                                              return by_var ? ad::scale(v[0], v[1]) : ad::scale(v[0], f);
                                          })};
                     }});
    cases.push_back({"add_bias", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng), random_tensor({c}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::add_bias(v[0], v[1]); })};
                     }});
    cases.push_back({"sigmoid", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng, -4, 4)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::sigmoid(v[0]); })};
                     }});
    cases.push_back({"exp", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng, -2, 2)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::exp(v[0]); })};
                     }});
    cases.push_back({"log", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng, 0.2, 3)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::log(v[0]); })};
                     }});
    cases.push_back({"relu", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{away_from_zero({r, c}, rng, 0.05)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::relu(v[0]); })};
                     }});
    cases.push_back({"gelu", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng, -3, 3)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::gelu(v[0]); })};
                     }});
    cases.push_back({"sum", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{random_tensor({r, c}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::sum(v[0]); })};
                     }});
    cases.push_back({"mean_rows", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         std::vector<bool> mask(r);
                         for (std::size_t i = 0; i < r; ++i) mask[i] = pick(rng, 0, 2) > 0;
                         mask[pick(rng, 0, r - 1)] = true;
                         const bool masked = pick(rng, 0, 1) == 1;
                         return std::pair{In{random_tensor({r, c}, rng)}, Builder([mask, masked](TapeD&, const std::vector<VarD>& v) {
                                              return ad::mean_rows(v[0], masked ? &mask : nullptr);
                                          })};
                     }});
    cases.push_back({"concat_rows", [](Rng& rng) {
                         const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4), c = pick(rng, 1, 4);
                         return std::pair{In{random_tensor({a, c}, rng), random_tensor({b, c}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::concat_rows(v[0], v[1]); })};
                     }});
    cases.push_back({"concat_cols", [](Rng& rng) {
                         const std::size_t r = pick(rng, 1, 4), parts = pick(rng, 1, 3);
                         In in;
                         for (std::size_t i = 0; i < parts; ++i) in.push_back(random_tensor({r, pick(rng, 1, 4)}, rng));
                         return std::pair{in, Builder([](TapeD&, const std::vector<VarD>& v) { return ad::concat_cols(v); })};
                     }});
    cases.push_back({"slice_rows", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         const std::size_t b = pick(rng, 0, r - 1), e = pick(rng, b + 1, r);
                         return std::pair{In{random_tensor({r, c}, rng)}, Builder([b, e](TapeD&, const std::vector<VarD>& v) {
                                              return ad::slice_rows(v[0], b, e);
                                          })};
                     }});
    cases.push_back({"slice_cols", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         const std::size_t b = pick(rng, 0, c - 1), e = pick(rng, b + 1, c);
                         return std::pair{In{random_tensor({r, c}, rng)}, Builder([b, e](TapeD&, const std::vector<VarD>& v) {
                                              return ad::slice_cols(v[0], b, e);
                                          })};
                     }});
    cases.push_back({"gather_rows", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         std::vector<std::size_t> idx(pick(rng, 1, 5));
                         for (auto& i : idx) i = pick(rng, 0, r - 1);
                         return std::pair{In{random_tensor({r, c}, rng)}, Builder([idx](TapeD&, const std::vector<VarD>& v) {
                                              return ad::gather_rows(v[0], idx);
                                          })};
                     }});
    cases.push_back({"softmax_rows", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         std::vector<bool> mask(r * c);
                         for (std::size_t i = 0; i < r; ++i) {
                             for (std::size_t j = 0; j < c; ++j) mask[i * c + j] = pick(rng, 0, 2) > 0;
                             mask[i * c + pick(rng, 0, c - 1)] = true;
                         }
                         const bool masked = pick(rng, 0, 1) == 1;
                         return std::pair{In{random_tensor({r, c}, rng, -3, 3)},
                                          Builder([mask, masked](TapeD&, const std::vector<VarD>& v) {
                                              return ad::softmax_rows(v[0], masked ? &mask : nullptr);
                                          })};
                     }});
    cases.push_back({"layer_norm", [](Rng& rng) {
                         const std::size_t r = pick(rng, 1, 4), c = pick(rng, 2, 6);
                         return std::pair{In{random_tensor({r, c}, rng, -2, 2), random_tensor({c}, rng), random_tensor({c}, rng)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::layer_norm(v[0], v[1], v[2]); })};
                     }});
    cases.push_back({"l2_normalize_rows", [dims](Rng& rng) {
                         auto [r, c] = dims(rng);
                         return std::pair{In{away_from_zero({r, c}, rng, 0.1)},
                                          Builder([](TapeD&, const std::vector<VarD>& v) { return ad::l2_normalize_rows(v[0]); })};
                     }});
    cases.push_back({"cross_entropy", [](Rng& rng) {
                         const std::size_t c = pick(rng, 2, 6), target = pick(rng, 0, c - 1);
                         return std::pair{In{random_tensor({1, c}, rng, -3, 3)}, Builder([target](TapeD&, const std::vector<VarD>& v) {
                                              return ad::cross_entropy(v[0], target);
                                          })};
                     }});
    cases.push_back({"gaussian_masks", [](Rng& rng) {
                         const std::size_t K = pick(rng, 1, 4), T = pick(rng, K, 12);
                         const double sigma = std::uniform_real_distribution<double>(0.1, 0.7)(rng);
                         return std::pair{In{random_tensor({K}, rng, 0.02, 0.98)}, Builder([sigma, T](TapeD&, const std::vector<VarD>& v) {
                                              return gaussian_masks(v[0], sigma, T);
                                          })};
                     }});
    cases.push_back({"combine_masks", [](Rng& rng) {
                         const std::size_t K = pick(rng, 1, 4), T = pick(rng, 3, 12);
                         // Distinct sums with a clear minimum and maximum keep the arg-extrema fixed under probing.
                         TensorD g = random_tensor({K, T}, rng, 0.0, 1.0);
                         const std::size_t lo = pick(rng, 0, T - 1);
                         std::size_t hi = pick(rng, 0, T - 2);
                         if (hi >= lo) ++hi;
                         for (std::size_t k = 0; k < K; ++k) {
                             g[k * T + lo] = -1.0;
                             g[k * T + hi] = 2.0;
                         }
                         return std::pair{In{g}, Builder([](TapeD&, const std::vector<VarD>& v) { return combine_masks(v[0]); })};
                     }});
    cases.push_back({"regression_loss", [](Rng& rng) {
                         const std::size_t K = pick(rng, 1, 4), T = pick(rng, K, 16);
                         std::vector<std::size_t> all(T);
                         std::iota(all.begin(), all.end(), std::size_t{1});
                         std::shuffle(all.begin(), all.end(), rng);
                         std::vector<std::size_t> w(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(K));
                         // Centers spread apart so the sorted pairing is stable, some far enough for the linear branch.
                         TensorD mu({K});
                         for (std::size_t k = 0; k < K; ++k) mu[k] = double(k) * 0.7 + std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
                         std::shuffle(mu.storage().begin(), mu.storage().end(), rng);
                         return std::pair{In{mu}, Builder([w, T](TapeD&, const std::vector<VarD>& v) { return regression_loss(v[0], w, T); })};
                     }});
    cases.push_back({"contrastive_loss", [](Rng& rng) {
                         const std::size_t K = pick(rng, 1, 4), N = pick(rng, 0, 5);
                         In in{random_tensor({K, 1}, rng, -3, 3)};
                         if (N > 0) in.push_back(random_tensor({N, 1}, rng, -3, 3));
                         return std::pair{in, Builder([](TapeD&, const std::vector<VarD>& v) {
                                              return contrastive_logits_loss(v[0], v.size() > 1 ? std::optional<VarD>(v[1]) : std::nullopt);
                                          })};
                     }});
    cases.push_back({"perturbed_topk", [](Rng& rng) {
                         const std::size_t T = pick(rng, 2, 10), K = pick(rng, 1, T);
                         TensorD p = random_tensor({T}, rng, 0, 1);
                         // Record the Monte-Carlo linearization at p, then differentiate its replay.
                         auto lin = std::make_shared<SelectionLinearization>();
                         {
                             TapeD t;
                             PerturbedTopKOptions o{K, 0.05, 200, rng(), SelectionMode::Record, lin.get()};
                             perturbed_topk(t.constant(p), o);
                         }
                         return std::pair{In{p}, Builder([lin, K](TapeD&, const std::vector<VarD>& v) {
                                              PerturbedTopKOptions o{K, 0.05, 200, 0, SelectionMode::Replay, lin.get()};
                                              return perturbed_topk(v[0], o);
                                          })};
                     }});
    return cases;
}

/// Names of the differentiable ops covered by the per-op checks.
inline std::vector<std::string> checked_ops() {
    std::vector<std::string> out;
    for (const auto& c : op_cases()) out.push_back(c.name);
    return out;
}

/// Desk-scale instance shared by the module and chain checks.
struct DeskInstance {
    RunConfig cfg;
    Dataset<double> ds;
};

inline DeskInstance desk_instance(const RunConfig& base) {
    DeskInstance d;
    d.cfg = base;
    d.cfg.T = 8;
    d.cfg.K = 2;
    d.cfg.D_I = 8;
    d.cfg.D_G = 16;
    d.cfg.N_intra = 4;
    d.cfg.N_inter = 4;
    d.cfg.batch_size = 2;
    d.cfg.precision = PrecisionMode::FP64;
    d.cfg.validate();
    synth::SynthSpec spec;
    spec.D_I = 8;
    spec.T = 8;
    spec.K_star = 2;
    spec.C = 5;
    spec.L_q = 4;
    spec.scenes = 2;
    spec.train = 2;
    spec.test = 0;
    spec.seed = base.seed;
    d.ds = dataset_from_synth<double>(synth::generate_samples(spec), spec, d.cfg.K);
    return d;
}

using ModuleBuilder = std::function<VarD(TapeD&, const BoundParams<double>&, const std::vector<VarD>&)>;

/// Module check: gradients with respect to the listed parameters and inputs.
inline CheckResult check_module(const std::string& name, ParamStore<double>& store, const std::vector<std::string>& params,
                                const std::vector<TensorD>& inputs, const ModuleBuilder& build,
                                const GradcheckOptions& opt, Rng& rng) {
    CheckResult res{"module", name};
    TapeD tape;
    if (!opt.fault_op.empty()) tape.inject_fault(opt.fault_op, opt.fault_factor);
    BoundParams<double> P(store, tape);
    std::vector<VarD> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    VarD out = build(tape, P, vars);
    const TensorD upstream = random_tensor(out.extents(), rng);
    tape.backward_from(out, upstream);
    auto evaluate = [&]() {
        TapeD t;
        BoundParams<double> Q(store, t);
        std::vector<VarD> vs;
        for (const auto& x : inputs) vs.push_back(t.variable(x));
        return inner(build(t, Q, vs).value(), upstream);
    };
    for (const auto& pname : params) {
        const VarD v = P(pname);
        const TensorD analytic = tape.has_grad(v.id) ? tape.grad(v.id) : TensorD(v.extents());
        TensorD& value = store.slots()[store.slot_of(pname)].value;
        const TensorD numeric = finite_diff_grad(
            [&](const TensorD& probe) {
                const TensorD saved = value;
                value = probe;
                const double r = evaluate();
                value = saved;
                return r;
            },
            TensorD(value), opt.step);
        merge(res, compare_gradients(analytic, numeric, opt.rel_tol, opt.abs_floor), value.size());
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const TensorD analytic = tape.has_grad(vars[i].id) ? tape.grad(vars[i].id) : TensorD(inputs[i].extents());
        auto f = [&](const TensorD& probe) {
            TapeD t;
            BoundParams<double> Q(store, t);
            std::vector<VarD> vs;
            for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(t.variable(j == i ? probe : inputs[j]));
            return inner(build(t, Q, vs).value(), upstream);
        };
        merge(res, compare_gradients(analytic, finite_diff_grad(f, inputs[i], opt.step), opt.rel_tol, opt.abs_floor),
              inputs[i].size());
    }
    res.instances = 1;
    return res;
}

inline std::vector<std::string> names_with_prefix(const ParamStore<double>& store, const std::vector<std::string>& prefixes) {
    std::vector<std::string> out;
    for (const auto& s : store.slots())
        for (const auto& p : prefixes)
            if (s.name.rfind(p, 0) == 0) {
                out.push_back(s.name);
                break;
            }
    return out;
}

inline std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

} // namespace gc

/// Runs the whole suite. Any mismatch marks the report as failed; with a
/// fault injected, the failing per-op entry names the corrupted op.
inline GradcheckReport run_gradcheck(const RunConfig& base, const GradcheckOptions& opt = {}) {
    using namespace gc;
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckReport report;
    report.fault_op = opt.fault_op;
    Rng rng(derive_seed({opt.seed, 0x67636b}));

    for (const auto& c : op_cases()) {
        CheckResult res{"op", c.name};
        for (std::size_t i = 0; i < opt.instances; ++i) {
            auto [inputs, build] = c.draw(rng);
            check_instance(res, inputs, build, opt, rng);
        }
        report.checks.push_back(res);
    }

    DeskInstance desk = desk_instance(base);
    const RunConfig& cfg = desk.cfg;
    Model<double> model = make_model<double>(cfg, desk.ds.D_I);
    ParamStore<double>& store = model.params;
    const SampleData<double>& s0 = desk.ds.samples[0];
    const std::vector<bool> qmask(s0.question.rows(), true);
    const std::size_t T = s0.frames.rows();

    report.checks.push_back(check_module(
        "embedding", store, names_with_prefix(store, {"embed."}), {s0.frames, s0.question},
        [&](TapeD&, const BoundParams<double>& P, const std::vector<VarD>& in) {
            return embed_inputs(in[0], in[1], P, model.dims.T_max);
        },
        opt, rng));
    {
        TapeD t;
        BoundParams<double> P(store, t);
        const TensorD m = embed_inputs(t.constant(s0.frames), t.constant(s0.question), P, model.dims.T_max).value();
        std::vector<bool> key_mask(m.rows(), true);
        report.checks.push_back(check_module(
            "encoder", store, names_with_prefix(store, {"enc"}), {m},
            [&](TapeD&, const BoundParams<double>& Q, const std::vector<VarD>& in) {
                return encode(in[0], key_mask, T, Q, cfg.layers, cfg.heads);
            },
            opt, rng));
        // Non-zero query so the pooling weights are not uniform.
        TensorD& query = store.slots()[store.slot_of("pool.query")].value;
        const TensorD saved = query;
        query = random_tensor(query.extents(), rng);
        report.checks.push_back(check_module(
            "pooling_head", store, {"pool.query", "head.weight", "head.bias"},
            {random_tensor({T, cfg.D_G}, rng)},
            [&](TapeD&, const BoundParams<double>& Q, const std::vector<VarD>& in) {
                return pool_and_predict_centers(in[0], Q);
            },
            opt, rng));
        query = saved;
    }
    report.checks.push_back(check_module(
        "grounder", store, names_with_prefix(store, {"embed.", "enc", "pool.", "head."}), {},
        [&](TapeD& t, const BoundParams<double>& P, const std::vector<VarD>&) {
            return run_grounder(t.constant(s0.frames), t.constant(s0.question), qmask, P, model.dims, cfg.sigma).p;
        },
        opt, rng));
    report.checks.push_back(check_module(
        "info_nce", store, {},
        {s0.description, random_tensor({cfg.K, cfg.D_I}, rng), random_tensor({cfg.N_intra, cfg.D_I}, rng)},
        [&](TapeD&, const BoundParams<double>&, const std::vector<VarD>& in) {
            return info_nce<double>(in[0], in[1], in[2], cfg.tau);
        },
        opt, rng));
    report.checks.push_back(check_module(
        "answer_head", store, names_with_prefix(store, {"vqa."}), {random_tensor({cfg.K, cfg.D_I}, rng), s0.question},
        [&](TapeD& t, const BoundParams<double>& P, const std::vector<VarD>& in) {
            return vqa_surrogate_loss(in[0], in[1], qmask, t.constant(s0.candidates), s0.answer, P).loss;
        },
        opt, rng));

    // Full joint objective over a batch of two. The Monte-Carlo selection is
    // recorded once and replayed as its linearization, so the finite
    // differences see the same function the backward pass differentiates.
    std::vector<std::size_t> batch{0, 1};
    std::vector<SelectionLinearization> lins(batch.size());
    {
        StepContext rec{0, 0, SelectionMode::Record, &lins};
        for (std::size_t pos = 0; pos < batch.size(); ++pos) {
            TapeD t;
            BoundParams<double> P(store, t);
            forward_train_sample(t, P, model, desk.ds, std::span<const std::size_t>(batch), pos, cfg, rec);
        }
    }
    const StepContext replay{0, 0, SelectionMode::Replay, &lins};
    store.zero_grad();
    for (std::size_t pos = 0; pos < batch.size(); ++pos) {
        TapeD t;
        if (!opt.fault_op.empty()) t.inject_fault(opt.fault_op, opt.fault_factor);
        BoundParams<double> P(store, t);
        auto f = forward_train_sample(t, P, model, desk.ds, std::span<const std::size_t>(batch), pos, cfg, replay);
        backward(f.total, store, 1.0 / double(batch.size()));
    }
    for (auto& slot : store.slots()) {
        CheckResult res{"chain", slot.name, group_of(slot.name)};
        const TensorD analytic = slot.grad;
        const TensorD numeric = finite_diff_grad(
            [&](const TensorD& probe) {
                const TensorD saved = slot.value;
                slot.value = probe;
                const double l = batch_loss(model, desk.ds, std::span<const std::size_t>(batch), cfg, replay);
                slot.value = saved;
                return l;
            },
            TensorD(slot.value), opt.step);
        merge(res, compare_gradients(analytic, numeric, opt.rel_tol, opt.abs_floor), slot.value.size());
        res.instances = 1;
        report.checks.push_back(res);
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

} // namespace gcg
