#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "gcg/errors.hpp"

namespace gcg {

inline constexpr std::size_t kMaxFrames = 64;

enum class PrecisionMode { FP32, FP64 };

/// Hyperparameters of one run. Defaults follow the published setting; the
/// learning rate is usually overridden to 1e-3 for the small synthetic model.
struct RunConfig {
    std::size_t T = 32;
    std::size_t K = 4;
    std::size_t D_I = 32;
    std::size_t D_G = 256;
    std::size_t layers = 2;
    std::size_t heads = 4;
    double sigma = 0.2;
    double tau = 0.1;
    double alpha1 = 0.1;
    double alpha2 = 0.1;
    std::size_t N_intra = 16;
    std::size_t N_inter = 32;
    double lr = 1e-5;
    double weight_decay = 0.01;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double eps_p = 0.05;
    std::size_t n_p = 200;
    PrecisionMode precision = PrecisionMode::FP32;

    void validate() const {
        auto fail = [](const std::string& msg) { throw ValidationError("invalid config: " + msg); };
        if (T < 1) fail("T must be at least 1");
        if (T > kMaxFrames) fail("T = " + std::to_string(T) + " exceeds the positional table size 64");
        if (K < 1 || K > T) fail("K must satisfy 1 <= K <= T (K = " + std::to_string(K) + ", T = " + std::to_string(T) + ")");
        if (N_intra > T - K) fail("N_intra must not exceed T - K");
        if (!(sigma > 0)) fail("sigma must be positive");
        if (!(tau > 0)) fail("tau must be positive");
        if (!(alpha1 >= 0) || !(alpha2 >= 0)) fail("alpha1 and alpha2 must be non-negative");
        if (!(lr > 0)) fail("lr must be positive");
        if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
        if (D_I < 1 || D_G < 1) fail("D_I and D_G must be positive");
        if (heads < 1 || D_G % heads != 0) fail("D_G must be divisible by heads");
        if (batch_size < 1) fail("batch_size must be at least 1");
        if (!(eps_p > 0)) fail("eps_p must be positive");
        if (n_p < 1) fail("n_p must be at least 1");
    }
};

inline nlohmann::json to_json(const RunConfig& c) {
    return nlohmann::json{
        {"T", c.T},
        {"K", c.K},
        {"D_I", c.D_I},
        {"D_G", c.D_G},
        {"N", c.layers},
        {"heads", c.heads},
        {"sigma", c.sigma},
        {"tau", c.tau},
        {"alpha1", c.alpha1},
        {"alpha2", c.alpha2},
        {"N_intra", c.N_intra},
        {"N_inter", c.N_inter},
        {"lr", c.lr},
        {"weight_decay", c.weight_decay},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"seed", c.seed},
        {"eps_p", c.eps_p},
        {"n_p", c.n_p},
        {"precision", c.precision == PrecisionMode::FP32 ? "fp32" : "fp64"},
    };
}

/// Applies the keys present in `j` on top of `base`; unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    RunConfig c = base;
    auto as_count = [](const nlohmann::json& v, const std::string& key) -> std::size_t {
        if (!v.is_number_integer() || v.get<long long>() < 0) {
            throw ValidationError("config key '" + key + "' must be a non-negative integer");
        }
        return v.get<std::size_t>();
    };
    auto as_real = [](const nlohmann::json& v, const std::string& key) -> double {
        if (!v.is_number()) throw ValidationError("config key '" + key + "' must be a number");
        return v.get<double>();
    };
    for (const auto& [key, v] : j.items()) {
        if (key == "T") c.T = as_count(v, key);
        else if (key == "K") c.K = as_count(v, key);
        else if (key == "D_I") c.D_I = as_count(v, key);
        else if (key == "D_G") c.D_G = as_count(v, key);
        else if (key == "N" || key == "layers") c.layers = as_count(v, key);
        else if (key == "heads") c.heads = as_count(v, key);
        else if (key == "sigma") c.sigma = as_real(v, key);
        else if (key == "tau") c.tau = as_real(v, key);
        else if (key == "alpha1") c.alpha1 = as_real(v, key);
        else if (key == "alpha2") c.alpha2 = as_real(v, key);
        else if (key == "N_intra") c.N_intra = as_count(v, key);
        else if (key == "N_inter") c.N_inter = as_count(v, key);
        else if (key == "lr") c.lr = as_real(v, key);
        else if (key == "weight_decay") c.weight_decay = as_real(v, key);
        else if (key == "epochs") c.epochs = as_count(v, key);
        else if (key == "batch_size") c.batch_size = as_count(v, key);
        else if (key == "seed") c.seed = as_count(v, key);
        else if (key == "eps_p") c.eps_p = as_real(v, key);
        else if (key == "n_p") c.n_p = as_count(v, key);
        else if (key == "precision") {
            const std::string p = v.is_string() ? v.get<std::string>() : "";
            if (p == "fp32") c.precision = PrecisionMode::FP32;
            else if (p == "fp64") c.precision = PrecisionMode::FP64;
            else throw ValidationError("config key 'precision' must be \"fp32\" or \"fp64\"");
        } else {
            throw ValidationError("unknown config key '" + key + "'");
        }
    }
    c.validate();
    return c;
}

inline RunConfig parse_config(const std::string& text) {
    std::string trimmed = text;
    trimmed.erase(0, trimmed.find_first_not_of(" \t\r\n"));
    if (trimmed.empty()) {
        RunConfig c;
        c.validate();
        return c;
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(trimmed);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("config file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

} // namespace gcg
