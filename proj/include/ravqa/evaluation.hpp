#pragma once

// Accuracy reports, config fingerprints and pooled-embedding dumps.

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ravqa/synthetic.hpp"
#include "ravqa/training.hpp"

namespace ravqa {

// Identifies what a report was computed from. Reports are comparable when the
// data seeds agree.
struct Fingerprint {
    std::uint64_t data_seed = 0;
    std::uint64_t config_hash = 0;
    std::uint32_t checkpoint_crc = 0;

    std::string str() const {
        char buf[64];
        std::snprintf(buf, sizeof buf, "d%llu-c%016llx-k%08x", static_cast<unsigned long long>(data_seed),
                      static_cast<unsigned long long>(config_hash), checkpoint_crc);
        return buf;
    }

    bool same_data(const Fingerprint& o) const noexcept { return data_seed == o.data_seed; }
    bool operator==(const Fingerprint&) const = default;
};

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline Fingerprint make_fingerprint(const nlohmann::json& config, std::uint64_t data_seed, const ParamStore& params) {
    return {data_seed, fnv1a(config.dump()), param_checksum(params)};
}

struct EvalReport {
    double overall = 0.0;
    std::size_t count = 0;
    std::map<std::string, double> per_type;
    std::map<std::string, std::size_t> type_counts;
    std::map<std::string, double> per_scenario;  // audio_missing / visual_missing / complete
    std::map<std::string, std::size_t> scenario_counts;
    std::array<double, 3> alpha_mean{0.0, 0.0, 0.0};  // (audio, text, visual)
    std::string fingerprint;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
    j = {{"overall", r.overall},
         {"count", r.count},
         {"per_type", r.per_type},
         {"type_counts", r.type_counts},
         {"per_scenario", r.per_scenario},
         {"scenario_counts", r.scenario_counts},
         {"alpha_mean", {{"audio", r.alpha_mean[0]}, {"text", r.alpha_mean[1]}, {"visual", r.alpha_mean[2]}}},
         {"fingerprint", r.fingerprint}};
}

inline std::string scenario_of(const ModalityBundle& s) {
    if (!s.audio) return "audio_missing";
    if (!s.visual) return "visual_missing";
    return "complete";
}

struct Prediction {
    std::size_t answer = 0;
    std::array<double, 3> alpha{0.0, 0.0, 0.0};
};

using Predictor = std::function<Prediction(const ModalityBundle&)>;

// Aggregates per-sample predictions into overall, per-question-type and
// per-scenario accuracies.
inline EvalReport evaluate(const Dataset& d, const Predictor& predict, std::string fingerprint = {}) {
    EvalReport r;
    r.fingerprint = std::move(fingerprint);
    r.count = d.size();
    std::map<std::string, std::size_t> type_hits, scen_hits;
    std::size_t hits = 0;
    for (const auto& s : d.samples) {
        const Prediction p = predict(s);
        const bool ok = p.answer == s.label;
        hits += ok;
        const std::string t = to_string(s.qtype), sc = scenario_of(s);
        ++r.type_counts[t];
        type_hits[t] += ok;
        ++r.scenario_counts[sc];
        scen_hits[sc] += ok;
        for (std::size_t k = 0; k < 3; ++k) r.alpha_mean[k] += p.alpha[k];
    }
    if (r.count == 0) return r;
    const double n = static_cast<double>(r.count);
    r.overall = static_cast<double>(hits) / n;
    for (const auto& [t, c] : r.type_counts) r.per_type[t] = static_cast<double>(type_hits[t]) / static_cast<double>(c);
    for (const auto& [sc, c] : r.scenario_counts) {
        r.per_scenario[sc] = static_cast<double>(scen_hits[sc]) / static_cast<double>(c);
    }
    for (double& a : r.alpha_mean) a /= n;
    return r;
}

// Full recovery pipeline: missing streams are recovered per the engine's variant.
inline EvalReport evaluate(RecoveryEngine& eng, const Dataset& d, std::string fingerprint = {}) {
    return evaluate(
        d,
        [&](const ModalityBundle& s) {
            const SampleCache c = eng.prepare(s);
            Graph g(false);
            PassResult p = eng.infer(g, s, c);
            Prediction out;
            out.answer = detail::argmax(p.logits.value());
            for (std::size_t k = 0; k < 3; ++k) out.alpha[k] = p.alpha.value()[k];
            return out;
        },
        std::move(fingerprint));
}

// A checkpoint only fits data with the same raw dims and answer vocabulary.
inline void check_compatible(const ModelConfig& mc, const SyntheticData& data) {
    const auto& s = data.spec;
    if (mc.audio_dim != s.audio_dim || mc.visual_dim != s.visual_dim || mc.text_dim != s.text_dim ||
        mc.seq_len != s.seq_len || mc.answers != data.answers) {
        throw CheckpointError("checkpoint configuration does not match the dataset (dims, length or answers differ)");
    }
}

// One row per sample: id, label, question type, pooled Z_joint.
inline std::vector<std::vector<double>> dump_embeddings(RecoveryEngine& eng, const Dataset& d,
                                                        const std::filesystem::path& path) {
    std::vector<std::vector<double>> rows;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    const std::size_t dm = eng.model().config.d_model;
    os << "id,label,qtype";
    for (std::size_t j = 0; j < dm; ++j) os << ",z" << j;
    os << '\n';
    char buf[32];
    for (const auto& s : d.samples) {
        const SampleCache c = eng.prepare(s);
        Graph g(false);
        PassResult p = eng.infer(g, s, c);
        const auto z = p.pooled.value().data();
        rows.emplace_back(z.begin(), z.end());
        os << s.id << ',' << s.label << ',' << to_string(s.qtype);
        for (double v : z) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            os << ',' << buf;
        }
        os << '\n';
    }
    return rows;
}

}  // namespace ravqa
