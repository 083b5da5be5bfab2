#pragma once

// Checkpoint = directory with one GCGT file per parameter (plus AdamW
// moments) and an index.json listing them with the run configuration.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "gcg/config.hpp"
#include "gcg/errors.hpp"
#include "gcg/model.hpp"
#include "gcg/tensor_io.hpp"

namespace gcg {

inline constexpr const char* kCheckpointFormat = "gcg-checkpoint";

template <typename S>
void save_checkpoint(const Model<S>& model, const RunConfig& cfg, std::uint64_t epoch,
                     const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "params");
    fs::create_directories(dir / "adam_m");
    fs::create_directories(dir / "adam_v");
    nlohmann::json params = nlohmann::json::array();
    for (const auto& slot : model.params.slots()) {
        const std::string file = slot.name + ".gcgt";
        io::write_tensor(slot.value, dir / "params" / file);
        io::write_tensor(slot.m, dir / "adam_m" / file);
        io::write_tensor(slot.v, dir / "adam_v" / file);
        params.push_back({{"name", slot.name}, {"file", file}, {"extents", slot.value.extents()}});
    }
    nlohmann::json index{{"format", kCheckpointFormat},
                         {"version", 1},
                         {"precision", std::is_same_v<S, float> ? "fp32" : "fp64"},
                         {"step", model.params.step()},
                         {"epoch", epoch},
                         {"D_I", model.dims.D_I},
                         {"config", to_json(cfg)},
                         {"params", params}};
    std::ofstream out(dir / "index.json");
    out << index.dump(1) << '\n';
    if (!out) throw Error("cannot write checkpoint index in " + dir.string());
}

struct CheckpointInfo {
    RunConfig config;
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    std::size_t D_I = 0;
    PrecisionMode precision = PrecisionMode::FP32;
};

inline nlohmann::json read_checkpoint_index(const std::filesystem::path& dir) {
    std::ifstream in(dir / "index.json");
    if (!in) throw NotFoundError("checkpoint index not found in " + dir.string());
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("format", "") != kCheckpointFormat) throw FormatError("not a checkpoint: " + dir.string());
    return j;
}

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
    const nlohmann::json j = read_checkpoint_index(dir);
    CheckpointInfo info;
    info.config = config_from_json(j.at("config"));
    info.epoch = j.at("epoch").get<std::uint64_t>();
    info.step = j.at("step").get<std::uint64_t>();
    info.D_I = j.at("D_I").get<std::size_t>();
    info.precision = j.at("precision").get<std::string>() == "fp64" ? PrecisionMode::FP64 : PrecisionMode::FP32;
    return info;
}

/// Rebuilds the model layout from the stored config, then overwrites every
/// parameter and moment buffer from disk.
template <typename S>
Model<S> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info_out = nullptr) {
    const nlohmann::json j = read_checkpoint_index(dir);
    const CheckpointInfo info = read_checkpoint_info(dir);
    Model<S> model = make_model<S>(info.config, info.D_I);
    if (j.at("params").size() != model.params.slots().size()) {
        throw FormatError("checkpoint parameter count does not match the model layout: " + dir.string());
    }
    for (const auto& p : j.at("params")) {
        const std::string name = p.at("name").get<std::string>();
        const std::string file = p.at("file").get<std::string>();
        auto& slot = model.params.slots()[model.params.slot_of(name)];
        auto load = [&](const char* sub, Tensor<S>& dst) {
            Tensor<S> t = io::read_tensor_as<S>(dir / sub / file);
            if (t.extents() != dst.extents()) {
                throw ShapeError("checkpoint tensor '" + name + "' has extents " + format_extents(t.extents()) +
                                 ", model expects " + format_extents(dst.extents()));
            }
            dst = std::move(t);
        };
        load("params", slot.value);
        load("adam_m", slot.m);
        load("adam_v", slot.v);
    }
    model.params.set_step(info.step);
    if (info_out) *info_out = info;
    return model;
}

} // namespace gcg
