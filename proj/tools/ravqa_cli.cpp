#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ravqa/experiment.hpp"

using namespace ravqa;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kCheckpoint = 4 };

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
};

ExperimentConfig load_config(const Globals& g) {
    ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_experiment_config(g.config);
    if (g.seed) {
        c.data.seed = *g.seed;
        c.train.seed = *g.seed;
        c.seeds = {*g.seed};
    } else {
        c.train.seed = c.data.seed;
    }
    c.validate();
    return c;
}

fs::path out_dir(const Globals& g) {
    fs::create_directories(g.out);
    return g.out;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw IoError("cannot open " + p.string() + " for writing");
    os << text;
}

// Checkpoint files map every failure to the checkpoint exit code.
Model open_checkpoint(const std::string& path, const SyntheticData& data) {
    try {
        Model m = load_checkpoint(path);
        check_compatible(m.config, data);
        return m;
    } catch (const CheckpointError&) {
        throw;
    } catch (const Error& e) {
        throw CheckpointError(std::string(e.what()));
    }
}

struct Banks {
    std::optional<MemoryBank> audio, visual;
    const MemoryBank* a() const { return audio ? &*audio : nullptr; }
    const MemoryBank* v() const { return visual ? &*visual : nullptr; }
};

Banks open_banks(const std::string& dir) {
    Banks b;
    if (dir.empty()) return b;
    for (Modality m : {Modality::audio, Modality::visual}) {
        const fs::path p = fs::path(dir) / (std::string(to_string(m)) + ".bank");
        if (!fs::exists(p)) continue;
        (m == Modality::audio ? b.audio : b.visual) = load_bank(p);
    }
    return b;
}

Dataset pick_split(const SyntheticData& d, const std::string& split) {
    if (split == "train") return d.train;
    if (split == "val") return d.val;
    if (split == "test") return d.test;
    throw ConfigError("unknown split \"" + split + "\" (expected train|val|test)");
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigError("cannot parse \"" + item + "\" as a number");
        }
    }
    return out;
}

void progress(const std::string& msg) { std::cerr << msg << std::endl; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Retrieval-augmented audio-visual QA on a synthetic benchmark"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed_value = 0;
    app.add_option("--config", g.config, "experiment config (JSON)");
    auto* seed_opt = app.add_option("--seed", seed_value, "single seed for data, init and training");
    app.add_option("--out", g.out, "output directory")->capture_default_str();

    std::string data_dir, ckpt, banks_dir, variant = "full", split = "test", policy = "either", bank_path;
    std::string modality = "audio", sample_id, key_list, param, values;
    double rate = 0.5;
    std::size_t n = 3;
    bool bottom = false;

    auto* gen = app.add_subcommand("gen", "generate the synthetic dataset into --out");

    auto* bank = app.add_subcommand("bank", "memory bank tools");
    bank->require_subcommand(1);
    auto* bank_build = bank->add_subcommand("build", "build audio and visual banks from the training split");
    bank_build->add_option("--data", data_dir, "dataset directory")->required();
    auto* bank_query = bank->add_subcommand("query", "top-n (or bottom-n) cosine retrieval");
    bank_query->add_option("--bank", bank_path, "bank file")->required();
    bank_query->add_option("--key", key_list, "comma-separated query key");
    bank_query->add_option("--data", data_dir, "dataset directory (with --sample)");
    bank_query->add_option("--sample", sample_id, "query with this sample's key from the other stream");
    bank_query->add_option("--split", split, "split holding --sample")->capture_default_str();
    bank_query->add_option("-n", n, "number of results")->capture_default_str();
    bank_query->add_flag("--bottom", bottom, "least similar entries");
    auto* bank_info = bank->add_subcommand("info", "print bank metadata");
    bank_info->add_option("--bank", bank_path, "bank file")->required();

    auto* train = app.add_subcommand("train", "training stages");
    train->require_subcommand(1);
    auto* stage1 = train->add_subcommand("stage1", "pretrain encoders, experts and decoder");
    stage1->add_option("--data", data_dir, "dataset directory")->required();
    auto* stage2 = train->add_subcommand("stage2", "train router, decoder and purification");
    stage2->add_option("--data", data_dir, "dataset directory")->required();
    stage2->add_option("--checkpoint", ckpt, "stage I checkpoint")->required();
    stage2->add_option("--banks", banks_dir, "directory with audio.bank / visual.bank");
    stage2->add_option("--variant", variant, "baseline|cap|cmr|full")->capture_default_str();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    auto add_eval_opts = [&](CLI::App* c) {
        c->add_option("--data", data_dir, "dataset directory")->required();
        c->add_option("--checkpoint", ckpt, "stage II checkpoint")->required();
        c->add_option("--banks", banks_dir, "directory with audio.bank / visual.bank");
        c->add_option("--variant", variant, "baseline|cap|cmr|full")->capture_default_str();
        c->add_option("--split", split, "train|val|test")->capture_default_str();
        c->add_option("--rate", rate, "missing rate")->capture_default_str();
        c->add_option("--policy", policy, "audio|visual|either")->capture_default_str();
    };
    add_eval_opts(eval);

    auto* ablate = app.add_subcommand("ablate", "four-variant ablation over the config seeds");
    auto* sweep = app.add_subcommand("sweep", "hyperparameter or missing-rate sweep");
    sweep->add_option("--param", param, "n_retrieve|k_purge|missing_rate")->required();
    sweep->add_option("--values", values, "comma-separated values")->required();

    auto* dump = app.add_subcommand("dump-emb", "write pooled joint embeddings as CSV");
    add_eval_opts(dump);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }
    if (*seed_opt) g.seed = seed_value;

    try {
        const ExperimentConfig cfg = load_config(g);
        const std::uint64_t seed = cfg.data.seed;

        if (*gen) {
            const SyntheticData d = gen_synthetic(cfg.data);
            save_dataset(d, out_dir(g));
            std::cout << "wrote " << d.train.size() << "/" << d.val.size() << "/" << d.test.size()
                      << " samples to " << g.out << "\n";
        } else if (*bank_build) {
            const SyntheticData d = load_dataset(data_dir);
            for (Modality m : {Modality::audio, Modality::visual}) {
                const fs::path p = out_dir(g) / (std::string(to_string(m)) + ".bank");
                save_bank(build_bank(bank_records(d.train, m), m, "train"), p);
                std::cout << "wrote " << p.string() << "\n";
            }
        } else if (*bank_query) {
            const MemoryBank b = load_bank(bank_path);
            QuerySpec q;
            q.n = n;
            if (!sample_id.empty()) {
                if (data_dir.empty()) throw ConfigError("--sample needs --data");
                const Dataset d = pick_split(load_dataset(data_dir), split);
                const ModalityBundle* s = nullptr;
                for (const auto& x : d.samples)
                    if (x.id == sample_id) s = &x;
                if (!s) throw DataError("no sample \"" + sample_id + "\" in split " + split);
                q.query = s->key(other_av(b.modality()));
                q.exclude.insert(s->id);
            } else if (!key_list.empty()) {
                q.query = parse_list(key_list);
            } else {
                throw ConfigError("bank query needs --key or --sample");
            }
            for (const auto& c : bottom ? query_bottomn(b, q) : query_topn(b, q)) {
                std::cout << nlohmann::json{{"id", c.id}, {"index", c.index}, {"score", c.score}}.dump() << "\n";
            }
        } else if (*bank_info) {
            const MemoryBank b = load_bank(bank_path);
            std::cout << nlohmann::json{{"modality", to_string(b.modality())},
                                        {"entries", b.size()},
                                        {"key_dim", b.key_dim()},
                                        {"value_len", b.value_len()},
                                        {"value_dim", b.value_dim()},
                                        {"source", b.metadata().source},
                                        {"checksum", b.metadata().checksum}}
                             .dump(2)
                      << "\n";
        } else if (*stage1) {
            const SyntheticData d = load_dataset(data_dir);
            Model m = init_model(cfg.model_for(d.spec), detail::derive_seed(seed, 10));
            const TrainLog log = stage1_pretrain(m, d.train, &d.val, cfg.train);
            const fs::path dir = out_dir(g);
            save_checkpoint(m, dir / "stage1.ckpt");
            log.write(dir / "stage1.jsonl");
            std::cout << "stage I: loss " << log.final().loss << ", val joint accuracy " << log.final().accuracy
                      << "\n";
        } else if (*stage2) {
            const SyntheticData d = load_dataset(data_dir);
            Model m = open_checkpoint(ckpt, d);
            const Banks b = open_banks(banks_dir);
            const Variant v = Variant::parse(variant);
            const TrainLog log = stage2_mix(m, d.train, &d.val, b.a(), b.v(), cfg.train, v);
            const fs::path dir = out_dir(g);
            save_checkpoint(m, dir / ("stage2_" + v.name() + ".ckpt"));
            log.write(dir / ("stage2_" + v.name() + ".jsonl"));
            std::cout << "stage II (" << v.name() << "): loss " << log.final().loss << ", val accuracy "
                      << log.final().accuracy << "\n";
        } else if (*eval || *dump) {
            const SyntheticData d = load_dataset(data_dir);
            Model m = open_checkpoint(ckpt, d);
            const Banks b = open_banks(banks_dir);
            const Dataset ds = simulate_missing(pick_split(d, split), rate, parse_policy(policy),
                                                detail::derive_seed(seed, 20));
            RecoveryEngine eng(m, b.a(), b.v(), Variant::parse(variant), cfg.train.purification(), false);
            const fs::path dir = out_dir(g);
            if (*eval) {
                const Fingerprint fp = make_fingerprint(nlohmann::json(cfg), d.spec.seed, m.params);
                const EvalReport r = evaluate(eng, ds, fp.str());
                const std::string text = nlohmann::json(r).dump(2);
                write_text(dir / "eval.json", text + "\n");
                std::cout << text << "\n";
            } else {
                const auto rows = dump_embeddings(eng, ds, dir / "embeddings.csv");
                std::cout << "wrote " << rows.size() << " rows to " << (dir / "embeddings.csv").string() << "\n";
            }
        } else if (*ablate) {
            const AblationReport r = run_ablation(cfg, progress);
            const fs::path dir = out_dir(g);
            write_text(dir / "ablation.csv", r.csv());
            write_text(dir / "ablation.json", r.json().dump(2) + "\n");
            std::cout << r.csv();
        } else if (*sweep) {
            const SweepReport r = run_sweep(param, parse_list(values), cfg, progress);
            const fs::path dir = out_dir(g);
            write_text(dir / ("sweep_" + param + ".csv"), r.csv());
            write_text(dir / ("sweep_" + param + ".json"), r.json().dump(2) + "\n");
            std::cout << r.csv();
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const BudgetError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kCheckpoint;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const DimensionError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}
