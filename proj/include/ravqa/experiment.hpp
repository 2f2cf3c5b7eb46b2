#pragma once

// Experiment runners: ablation table and parameter sweeps over seeds.
//
// An ExperimentSession owns per-seed context (data, stage I model, banks) and
// memoizes stage II runs by (seed, train config, variant), so the ablation
// and the sweeps can share work when their settings coincide.

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ravqa/evaluation.hpp"
#include "ravqa/model.hpp"
#include "ravqa/synthetic.hpp"
#include "ravqa/training.hpp"

namespace ravqa {

struct ExperimentConfig {
    SyntheticSpec data;
    ModelConfig model;
    TrainConfig train;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

    // Model config with dims and vocabulary taken from the data spec.
    ModelConfig model_for(const SyntheticSpec& s) const {
        ModelConfig m = model;
        m.seq_len = s.seq_len;
        m.text_len = s.text_len;
        m.audio_dim = s.audio_dim;
        m.visual_dim = s.visual_dim;
        m.text_dim = s.text_dim;
        m.answers = answer_vocabulary(s);
        return m;
    }

    void validate() const {
        data.validate();
        model_for(data).validate();
        train.validate();
        train.purification().validate(data.seq_len);
        if (seeds.empty()) throw ConfigError("at least one seed is required");
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    nlohmann::json m = c.model;
    m.erase("answers");
    j = {{"data", c.data}, {"model", m}, {"train", c.train}, {"seeds", c.seeds}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    ExperimentConfig d;
    c.data = j.contains("data") ? j["data"].get<SyntheticSpec>() : d.data;
    if (j.contains("model")) {
        nlohmann::json m = j["model"];
        if (!m.contains("answers")) m["answers"] = nlohmann::json::array();
        c.model = m.get<ModelConfig>();
    }
    c.train = j.contains("train") ? j["train"].get<TrainConfig>() : d.train;
    c.seeds = j.value("seeds", d.seeds);
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    try {
        ExperimentConfig c = nlohmann::json::parse(is).get<ExperimentConfig>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError("malformed config " + path.string() + ": " + ex.what());
    }
}

struct Scenario {
    std::string name;
    double rate = 1.0;
    MissingPolicy policy = MissingPolicy::audio;

    static Scenario audio_missing() { return {"audio_missing", 1.0, MissingPolicy::audio}; }
    static Scenario visual_missing() { return {"visual_missing", 1.0, MissingPolicy::visual}; }
    static Scenario complete() { return {"complete", 0.0, MissingPolicy::either}; }
    static Scenario mixed(double rate) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "rate_%.2f", rate);
        return {buf, rate, MissingPolicy::either};
    }
};

// Everything a seed's stage II runs share.
struct SeedContext {
    std::uint64_t seed = 0;
    SyntheticData data;
    Model stage1;
    TrainLog stage1_log;
    MemoryBank audio_bank, visual_bank;
    Fingerprint data_fingerprint;
};

struct AblationReport {
    std::vector<std::string> variants;
    std::vector<std::string> scenarios;
    // mean[variant][scenario] over seeds; per_seed[variant][scenario][i]
    std::map<std::string, std::map<std::string, double>> mean;
    std::map<std::string, std::map<std::string, std::vector<double>>> per_seed;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> fingerprints;  // data fingerprint per seed

    std::string csv() const;
    nlohmann::json json() const;
};

struct SweepRow {
    double value = 0.0;
    double accuracy = 0.0;           // full model
    double baseline_accuracy = 0.0;  // no-retrieval baseline (missing-rate sweeps only)
    std::vector<double> per_seed;
    std::vector<double> baseline_per_seed;
    std::vector<std::string> fingerprints;
};

struct SweepReport {
    std::string parameter;
    std::vector<SweepRow> rows;
    nlohmann::json metadata;

    std::string csv() const;
    nlohmann::json json() const;
};

class ExperimentSession {
public:
    using Progress = std::function<void(const std::string&)>;

    explicit ExperimentSession(ExperimentConfig cfg, Progress progress = {})
        : cfg_(std::move(cfg)), progress_(std::move(progress)) {
        cfg_.validate();
    }

    const ExperimentConfig& config() const noexcept { return cfg_; }

    SeedContext& context(std::uint64_t seed) {
        auto it = contexts_.find(seed);
        if (it != contexts_.end()) return *it->second;
        const auto t0 = std::chrono::steady_clock::now();
        auto ctx = std::make_unique<SeedContext>();
        ctx->seed = seed;
        SyntheticSpec spec = cfg_.data;
        spec.seed = seed;
        ctx->data = gen_synthetic(spec);
        ctx->stage1 = init_model(cfg_.model_for(spec), detail::derive_seed(seed, 10));
        TrainConfig tc = cfg_.train;
        tc.seed = seed;
        ctx->stage1_log = stage1_pretrain(ctx->stage1, ctx->data.train, &ctx->data.val, tc);
        ctx->audio_bank = build_bank(bank_records(ctx->data.train, Modality::audio), Modality::audio, "train");
        ctx->visual_bank = build_bank(bank_records(ctx->data.train, Modality::visual), Modality::visual, "train");
        nlohmann::json data_cfg = spec;
        ctx->data_fingerprint = make_fingerprint(data_cfg, seed, ctx->stage1.params);
        note("seed " + std::to_string(seed) + ": stage I done in " + seconds_since(t0));
        return *contexts_.emplace(seed, std::move(ctx)).first->second;
    }

    struct Run {
        Model model;
        TrainLog log;
        std::map<std::string, EvalReport> reports;
    };

    // Trains (or recalls) a stage II run and evaluates it on the test split
    // under each scenario.
    Run& run(std::uint64_t seed, TrainConfig tc, Variant variant, const std::vector<Scenario>& scenarios) {
        tc.seed = seed;
        const std::string key = std::to_string(seed) + "|" + nlohmann::json(tc).dump() + "|" + variant.name();
        auto it = runs_.find(key);
        if (it == runs_.end()) {
            SeedContext& ctx = context(seed);
            const auto t0 = std::chrono::steady_clock::now();
            auto r = std::make_unique<Run>();
            r->model = ctx.stage1;
            r->log = stage2_mix(r->model, ctx.data.train, nullptr, &ctx.audio_bank, &ctx.visual_bank, tc, variant);
            note("seed " + std::to_string(seed) + ": stage II " + variant.name() + " (k=" +
                 std::to_string(tc.k_purge) + ", n=" + std::to_string(tc.n_retrieve) +
                 ", p=" + std::to_string(tc.missing_rate).substr(0, 4) + ") in " + seconds_since(t0));
            it = runs_.emplace(key, std::move(r)).first;
        }
        Run& r = *it->second;
        for (const auto& sc : scenarios) {
            if (r.reports.count(sc.name)) continue;
            SeedContext& ctx = context(seed);
            const Dataset test =
                simulate_missing(ctx.data.test, sc.rate, sc.policy, detail::derive_seed(seed, 20));
            RecoveryEngine eng(r.model, &ctx.audio_bank, &ctx.visual_bank, variant, tc.purification(), false);
            r.reports.emplace(sc.name, evaluate(eng, test, ctx.data_fingerprint.str()));
        }
        return r;
    }

    AblationReport ablation() {
        AblationReport rep;
        rep.seeds = cfg_.seeds;
        const std::vector<Scenario> scen{Scenario::audio_missing(), Scenario::visual_missing(), Scenario::complete()};
        for (const auto& s : scen) rep.scenarios.push_back(s.name);
        for (const auto& v : ablation_variants()) rep.variants.push_back(v.name());
        for (std::uint64_t seed : cfg_.seeds) {
            for (const auto& v : ablation_variants()) {
                Run& r = run(seed, cfg_.train, v, scen);
                for (const auto& s : scen) {
                    rep.per_seed[v.name()][s.name].push_back(r.reports.at(s.name).overall);
                }
            }
            rep.fingerprints.push_back(context(seed).data_fingerprint.str());
        }
        for (const auto& [v, cols] : rep.per_seed) {
            for (const auto& [s, xs] : cols) rep.mean[v][s] = mean_of(xs);
        }
        return rep;
    }

    // parameter: n_retrieve | k_purge | missing_rate.
    SweepReport sweep(const std::string& parameter, const std::vector<double>& values) {
        if (values.empty()) throw ConfigError("sweep needs at least one value");
        if (parameter != "n_retrieve" && parameter != "k_purge" && parameter != "missing_rate") {
            throw ConfigError("unknown sweep parameter \"" + parameter + "\"");
        }
        SweepReport rep;
        rep.parameter = parameter;
        rep.metadata = {{"reference", {{"n_retrieve", 3}, {"k_purge", 5}}},
                        {"seeds", cfg_.seeds},
                        {"metric", parameter == "missing_rate" ? "overall accuracy at the swept rate"
                                                              : "mean of audio-missing and visual-missing accuracy"}};
        for (double value : values) {
            SweepRow row;
            row.value = value;
            TrainConfig tc = cfg_.train;
            if (parameter == "n_retrieve") tc.n_retrieve = static_cast<std::size_t>(value);
            if (parameter == "k_purge") tc.k_purge = static_cast<std::size_t>(value);
            if (parameter == "missing_rate") tc.missing_rate = value;
            tc.validate();
            tc.purification().validate(cfg_.data.seq_len);
            for (std::uint64_t seed : cfg_.seeds) {
                if (parameter == "missing_rate") {
                    const std::vector<Scenario> scen{Scenario::mixed(value)};
                    row.per_seed.push_back(run(seed, tc, {true, true}, scen).reports.at(scen[0].name).overall);
                    row.baseline_per_seed.push_back(
                        run(seed, tc, {false, false}, scen).reports.at(scen[0].name).overall);
                } else {
                    const std::vector<Scenario> scen{Scenario::audio_missing(), Scenario::visual_missing()};
                    Run& r = run(seed, tc, {true, true}, scen);
                    row.per_seed.push_back(0.5 * (r.reports.at("audio_missing").overall +
                                                  r.reports.at("visual_missing").overall));
                }
                row.fingerprints.push_back(context(seed).data_fingerprint.str());
            }
            row.accuracy = mean_of(row.per_seed);
            row.baseline_accuracy = mean_of(row.baseline_per_seed);
            rep.rows.push_back(std::move(row));
        }
        return rep;
    }

private:
    static double mean_of(const std::vector<double>& xs) {
        if (xs.empty()) return 0.0;
        double s = 0.0;
        for (double x : xs) s += x;
        return s / static_cast<double>(xs.size());
    }

    static std::string seconds_since(std::chrono::steady_clock::time_point t0) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.1fs", s);
        return buf;
    }

    void note(const std::string& msg) const {
        if (progress_) progress_(msg);
    }

    ExperimentConfig cfg_;
    Progress progress_;
    std::map<std::uint64_t, std::unique_ptr<SeedContext>> contexts_;
    std::map<std::string, std::unique_ptr<Run>> runs_;
};

inline AblationReport run_ablation(const ExperimentConfig& cfg, ExperimentSession::Progress progress = {}) {
    ExperimentSession s(cfg, std::move(progress));
    return s.ablation();
}

inline SweepReport run_sweep(const std::string& parameter, const std::vector<double>& values,
                             const ExperimentConfig& cfg, ExperimentSession::Progress progress = {}) {
    ExperimentSession s(cfg, std::move(progress));
    return s.sweep(parameter, values);
}

namespace detail {

inline std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace detail

// variant,audio_missing,visual_missing,complete,seeds
inline std::string AblationReport::csv() const {
    std::string out = "variant";
    for (const auto& s : scenarios) out += "," + s;
    out += ",seeds\n";
    for (const auto& v : variants) {
        out += v;
        for (const auto& s : scenarios) out += "," + detail::fmt6(mean.at(v).at(s));
        out += "," + std::to_string(seeds.size()) + "\n";
    }
    return out;
}

inline nlohmann::json AblationReport::json() const {
    return {{"variants", variants}, {"scenarios", scenarios},   {"mean", mean},
            {"per_seed", per_seed}, {"seeds", seeds},           {"fingerprints", fingerprints}};
}

// parameter,value,accuracy,baseline_accuracy,gap,seeds
inline std::string SweepReport::csv() const {
    std::string out = "parameter,value,accuracy,baseline_accuracy,gap,seeds\n";
    for (const auto& r : rows) {
        const bool has_base = !r.baseline_per_seed.empty();
        char value[32];
        std::snprintf(value, sizeof value, "%g", r.value);
        out += parameter + "," + value + "," + detail::fmt6(r.accuracy) + "," +
               (has_base ? detail::fmt6(r.baseline_accuracy) : "") + "," +
               (has_base ? detail::fmt6(r.accuracy - r.baseline_accuracy) : "") + "," +
               std::to_string(r.per_seed.size()) + "\n";
    }
    return out;
}

inline nlohmann::json SweepReport::json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row = {{"value", r.value},
                              {"accuracy", r.accuracy},
                              {"per_seed", r.per_seed},
                              {"fingerprints", r.fingerprints}};
        if (!r.baseline_per_seed.empty()) {
            row["baseline_accuracy"] = r.baseline_accuracy;
            row["baseline_per_seed"] = r.baseline_per_seed;
            row["gap"] = r.accuracy - r.baseline_accuracy;
        }
        rows_j.push_back(std::move(row));
    }
    return {{"parameter", parameter}, {"rows", rows_j}, {"metadata", metadata}};
}

}  // namespace ravqa
