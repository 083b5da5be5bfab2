#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcg/errors.hpp"
#include "gcg/tensor_io.hpp"

namespace gcg {

/// Cached pseudo-labels with the digest of the description file they came from.
struct PseudoLabelCache {
    std::size_t k = 0;
    std::string description_hash;
    std::vector<std::size_t> w;  // 1-based, ascending
};

struct SampleRecord {
    std::string id;
    std::string split = "train";
    std::filesystem::path frames;       // T x D_I
    std::filesystem::path question;     // L_q x D_I
    std::filesystem::path description;  // D_I
    std::filesystem::path candidates;   // C x D_I
    std::size_t answer = 0;
    std::size_t question_length = 0;
    std::optional<std::vector<std::size_t>> ground_truth;
    std::optional<PseudoLabelCache> pseudo_labels;
};

struct Manifest {
    std::size_t T = 0;
    std::size_t L_q = 0;
    std::size_t D_I = 0;
    std::size_t C = 0;
    std::filesystem::path base_dir;  // relative sample paths resolve against this
    std::vector<SampleRecord> samples;

    std::filesystem::path resolve(const std::filesystem::path& p) const {
        return p.is_absolute() ? p : base_dir / p;
    }
};

namespace detail {

inline void check_timestamps(const std::vector<std::size_t>& ts, std::size_t T, const std::string& id,
                             const std::string& field) {
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (ts[i] < 1 || ts[i] > T) {
            throw ManifestError("sample '" + id + "' field '" + field + "': timestamp " + std::to_string(ts[i]) +
                                " outside [1, " + std::to_string(T) + "]");
        }
        if (i > 0 && ts[i] <= ts[i - 1]) {
            throw ManifestError("sample '" + id + "' field '" + field + "': timestamps must be ascending and distinct");
        }
    }
}

inline void expect_extents(const Manifest& m, const SampleRecord& r, const std::filesystem::path& rel,
                           const std::string& field, const Extents& want) {
    io::TensorFileHeader h;
    try {
        h = io::read_header(m.resolve(rel));
    } catch (const NotFoundError&) {
        throw NotFoundError("sample '" + r.id + "' field '" + field + "': file not found: " + m.resolve(rel).string());
    }
    if (h.extents != want) {
        throw ManifestError("sample '" + r.id + "' field '" + field + "': extent mismatch, file declares " +
                            format_extents(h.extents) + " but manifest expects " + format_extents(want));
    }
}

} // namespace detail

inline nlohmann::json to_json(const SampleRecord& r) {
    nlohmann::json j{{"id", r.id},
                     {"split", r.split},
                     {"frames", r.frames.generic_string()},
                     {"question", r.question.generic_string()},
                     {"description", r.description.generic_string()},
                     {"candidates", r.candidates.generic_string()},
                     {"answer", r.answer}};
    if (r.question_length) j["L_q"] = r.question_length;
    if (r.ground_truth) j["ground_truth"] = *r.ground_truth;
    if (r.pseudo_labels) {
        j["pseudo_labels"] = {{"k", r.pseudo_labels->k},
                              {"description_hash", r.pseudo_labels->description_hash},
                              {"w", r.pseudo_labels->w}};
    }
    return j;
}

inline nlohmann::json to_json(const Manifest& m) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& r : m.samples) samples.push_back(to_json(r));
    return nlohmann::json{{"T", m.T}, {"L_q", m.L_q}, {"D_I", m.D_I}, {"C", m.C}, {"samples", samples}};
}

/// Validates every record against the headers of the files it references.
inline void validate_manifest(const Manifest& m) {
    std::set<std::string> seen;
    for (const SampleRecord& r : m.samples) {
        if (r.id.empty()) throw ManifestError("sample with empty id");
        if (!seen.insert(r.id).second) throw ManifestError("duplicate sample id '" + r.id + "'");
        if (r.answer >= m.C) {
            throw ManifestError("sample '" + r.id + "' field 'answer': index " + std::to_string(r.answer) +
                                " not below C = " + std::to_string(m.C));
        }
        const std::size_t lq = r.question_length ? r.question_length : m.L_q;
        detail::expect_extents(m, r, r.frames, "frames", {m.T, m.D_I});
        detail::expect_extents(m, r, r.question, "question", {lq, m.D_I});
        detail::expect_extents(m, r, r.description, "description", {m.D_I});
        detail::expect_extents(m, r, r.candidates, "candidates", {m.C, m.D_I});
        if (r.ground_truth) detail::check_timestamps(*r.ground_truth, m.T, r.id, "ground_truth");
        if (r.pseudo_labels) {
            detail::check_timestamps(r.pseudo_labels->w, m.T, r.id, "pseudo_labels");
            if (r.pseudo_labels->w.size() != r.pseudo_labels->k) {
                throw ManifestError("sample '" + r.id + "' field 'pseudo_labels': length differs from k");
            }
        }
    }
}

inline Manifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    auto need = [&](const nlohmann::json& obj, const char* key, const std::string& where) -> const nlohmann::json& {
        if (!obj.contains(key)) throw ManifestError(where + ": missing field '" + key + "'");
        return obj.at(key);
    };
    try {
        if (!j.is_object()) throw ManifestError("manifest must be a JSON object");
        Manifest m;
        m.base_dir = base_dir;
        const auto& samples = need(j, "samples", "manifest");
        if (!samples.is_array()) throw ManifestError("manifest field 'samples' must be an array");
        m.T = j.value("T", std::size_t{0});
        m.L_q = j.value("L_q", std::size_t{0});
        m.D_I = j.value("D_I", std::size_t{0});
        m.C = j.value("C", std::size_t{0});
        if (!samples.empty() && (m.T == 0 || m.L_q == 0 || m.D_I == 0 || m.C == 0)) {
            throw ManifestError("manifest must declare positive T, L_q, D_I and C");
        }
        for (const auto& s : samples) {
            SampleRecord r;
            r.id = need(s, "id", "sample").get<std::string>();
            const std::string where = "sample '" + r.id + "'";
            r.split = s.value("split", std::string("train"));
            r.frames = need(s, "frames", where).get<std::string>();
            r.question = need(s, "question", where).get<std::string>();
            r.description = need(s, "description", where).get<std::string>();
            r.candidates = need(s, "candidates", where).get<std::string>();
            r.answer = need(s, "answer", where).get<std::size_t>();
            r.question_length = s.value("L_q", std::size_t{0});
            if (s.contains("ground_truth")) r.ground_truth = s.at("ground_truth").get<std::vector<std::size_t>>();
            if (s.contains("pseudo_labels")) {
                const auto& pl = s.at("pseudo_labels");
                PseudoLabelCache c;
                c.k = need(pl, "k", where).get<std::size_t>();
                c.description_hash = need(pl, "description_hash", where).get<std::string>();
                c.w = need(pl, "w", where).get<std::vector<std::size_t>>();
                r.pseudo_labels = std::move(c);
            }
            m.samples.push_back(std::move(r));
        }
        validate_manifest(m);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError(std::string("malformed manifest: ") + e.what());
    }
}

/// Loads and fully validates a manifest; nothing is returned on any failure.
inline Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("manifest not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ManifestError("manifest is not valid JSON: " + std::string(e.what()));
    }
    return parse_manifest(j, path.parent_path());
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw Error("cannot write manifest: " + path.string());
        out << to_json(m).dump(1) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

} // namespace gcg
