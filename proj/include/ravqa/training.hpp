#pragma once

// Two-stage curriculum.
//
// Stage I trains encoders, experts and the shared decoder on three objectives
// per sample: audio + question, visual + question, and all three streams.
// Stage II freezes encoders and experts, caches their outputs, and trains the
// router, decoder, projection and guidance block with simulated missingness,
// retrieval, purification and the margin-free ranking hinges.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ravqa/autodiff.hpp"
#include "ravqa/embedding_store.hpp"
#include "ravqa/model.hpp"
#include "ravqa/purification.hpp"
#include "ravqa/synthetic.hpp"

namespace ravqa {

struct TrainConfig {
    double lambda = 0.5;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t stage1_epochs = 20;
    std::size_t stage2_epochs = 15;
    std::size_t batch_size = 16;
    double missing_rate = 0.5;
    MissingPolicy policy = MissingPolicy::either;
    std::uint64_t seed = 0;
    std::size_t k_purge = 5;
    std::size_t n_retrieve = 3;
    bool self_exclude = true;

    void validate() const {
        if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
        if (!(missing_rate >= 0.0 && missing_rate <= 1.0)) throw ConfigError("missing rate must lie in [0, 1]");
        if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
        if (batch_size == 0) throw ConfigError("batch size must be >= 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0)) {
            throw ConfigError("invalid Adam hyperparameters");
        }
    }

    PurificationConfig purification() const {
        PurificationConfig p;
        p.k_purge = k_purge;
        p.n_retrieve = n_retrieve;
        return p;
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lambda", c.lambda},
         {"lr", c.lr},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"stage1_epochs", c.stage1_epochs},
         {"stage2_epochs", c.stage2_epochs},
         {"batch_size", c.batch_size},
         {"missing_rate", c.missing_rate},
         {"policy", to_string(c.policy)},
         {"seed", c.seed},
         {"k_purge", c.k_purge},
         {"n_retrieve", c.n_retrieve},
         {"self_exclude", c.self_exclude}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.lambda = j.value("lambda", d.lambda);
    c.lr = j.value("lr", d.lr);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.stage1_epochs = j.value("stage1_epochs", d.stage1_epochs);
    c.stage2_epochs = j.value("stage2_epochs", d.stage2_epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.missing_rate = j.value("missing_rate", d.missing_rate);
    c.policy = parse_policy(j.value("policy", std::string(to_string(d.policy))));
    c.seed = j.value("seed", d.seed);
    c.k_purge = j.value("k_purge", d.k_purge);
    c.n_retrieve = j.value("n_retrieve", d.n_retrieve);
    c.self_exclude = j.value("self_exclude", d.self_exclude);
}

// Which recovery components are active. Without retrieval the missing stream
// is the expert's response to an all-zero input.
struct Variant {
    bool retrieval = true;
    bool purification = true;

    std::string name() const {
        if (retrieval && purification) return "full";
        if (retrieval) return "cmr";
        if (purification) return "cap";
        return "baseline";
    }

    static Variant parse(const std::string& s) {
        if (s == "full") return {true, true};
        if (s == "cmr") return {true, false};
        if (s == "cap") return {false, true};
        if (s == "baseline") return {false, false};
        throw ConfigError("unknown variant \"" + s + "\" (expected baseline|cap|cmr|full)");
    }

    bool operator==(const Variant&) const = default;
};

inline const std::array<Variant, 4>& ablation_variants() {
    static const std::array<Variant, 4> v{Variant{false, false}, Variant{false, true}, Variant{true, false},
                                          Variant{true, true}};
    return v;
}

// ---- losses -------------------------------------------------------------------

inline double task_loss(const Tensor& logits, std::size_t label) {
    if (label >= logits.size()) {
        throw DataError("label " + std::to_string(label) + " outside vocabulary of " + std::to_string(logits.size()));
    }
    double mx = logits[0];
    for (double v : logits.data()) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : logits.data()) s += std::exp(v - mx);
    return mx + std::log(s) - logits[label];
}

struct RankingTriplet {
    double gt = 0.0;   // task loss on the true features
    double pos = 0.0;  // task loss on the top-n recovery
    double neg = 0.0;  // task loss on the bottom-n recovery
};

inline std::pair<double, double> ranking_loss(const RankingTriplet& t) {
    return {std::max(0.0, t.gt - t.pos), std::max(0.0, t.pos - t.neg)};
}

inline double total_loss(double task, double rank_plus, double rank_minus, double lambda) {
    return task + lambda * (rank_plus + rank_minus);
}

namespace ad {

inline std::pair<Var, Var> ranking_loss(Var gt, Var pos, Var neg) {
    return {relu(sub(gt, pos)), relu(sub(pos, neg))};
}

inline Var total_loss(Var task, Var rank_plus, Var rank_minus, double lambda) {
    return add(task, scale(add(rank_plus, rank_minus), lambda));
}

}  // namespace ad

// ---- optimizer -----------------------------------------------------------------

// Adam with bias correction. Frozen parameters are skipped entirely.
class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
    explicit Adam(const TrainConfig& c) : Adam(c.lr, c.beta1, c.beta2, c.adam_eps) {}

    void step(ParamStore& ps) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (auto& [name, p] : ps) {
            if (p.frozen) continue;
            if (p.grad.shape() != p.value.shape()) {
                throw DimensionError("gradient shape " + p.grad.shape_str() + " does not match parameter \"" + name +
                                     "\" " + p.value.shape_str());
            }
            auto [it, fresh] = state_.try_emplace(name);
            if (fresh) {
                it->second.m = Tensor::zeros(p.value.shape());
                it->second.v = Tensor::zeros(p.value.shape());
            }
            Tensor& m = it->second.m;
            Tensor& v = it->second.v;
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double gi = p.grad[i];
                m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
                v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
                p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
        }
    }

    std::size_t steps() const noexcept { return t_; }

private:
    struct Moments {
        Tensor m, v;
    };
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> state_;
};

// Copies `grads` into the store and applies one Adam step.
inline void optimizer_step(ParamStore& ps, const std::map<std::string, Tensor>& grads, Adam& opt) {
    for (const auto& [name, g] : grads) {
        Parameter& p = ps.at(name);
        if (g.shape() != p.value.shape()) {
            throw DimensionError("gradient for \"" + name + "\" has shape " + g.shape_str() + ", parameter is " +
                                 p.value.shape_str());
        }
        p.grad = g;
    }
    opt.step(ps);
}

inline void scale_grads(ParamStore& ps, double c) {
    for (auto& [_, p] : ps) {
        if (p.frozen) continue;
        for (double& v : p.grad.storage()) v *= c;
    }
}

// ---- training log ---------------------------------------------------------------

struct EpochRecord {
    std::string stage;
    std::size_t epoch = 0;
    std::size_t steps = 0;
    double loss = 0.0;
    double task = 0.0;
    double rank_plus = 0.0;
    double rank_minus = 0.0;
    std::array<double, 3> alpha{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};  // (audio, text, visual)
    double accuracy = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
    j = {{"stage", r.stage},
         {"epoch", r.epoch},
         {"steps", r.steps},
         {"loss", r.loss},
         {"task", r.task},
         {"rank_plus", r.rank_plus},
         {"rank_minus", r.rank_minus},
         {"alpha", {{"audio", r.alpha[0]}, {"text", r.alpha[1]}, {"visual", r.alpha[2]}}},
         {"accuracy", r.accuracy}};
}

struct TrainLog {
    std::vector<EpochRecord> records;

    std::string to_jsonl() const {
        std::string out;
        for (const auto& r : records) out += nlohmann::json(r).dump() + "\n";
        return out;
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw IoError("cannot open " + path.string() + " for writing");
        os << to_jsonl();
    }

    const EpochRecord& initial() const { return records.front(); }
    const EpochRecord& final() const { return records.back(); }
};

namespace detail {

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

inline std::size_t argmax(const Tensor& t) {
    return static_cast<std::size_t>(std::max_element(t.data().begin(), t.data().end()) - t.data().begin());
}

// Seed streams derived from the run seed so that each consumer is independent.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace detail

// ---- stage I ----------------------------------------------------------------------

struct Stage1Losses {
    Var total, audio, visual, joint;
    Var audio_logits, visual_logits, joint_logits;
};

// Mean of the three pretraining objectives on one complete sample.
inline Stage1Losses stage1_sample_loss(Graph& g, Model& m, const ModalityBundle& s) {
    if (!s.audio || !s.visual) {
        throw DataError("stage I needs complete samples; \"" + s.id + "\" is missing a stream");
    }
    Var pa = ad::mean_pool(represent(g, m, Modality::audio, Modality::audio, *s.audio));
    Var pv = ad::mean_pool(represent(g, m, Modality::visual, Modality::visual, *s.visual));
    Var pt = ad::mean_pool(represent(g, m, Modality::text, Modality::text, s.question));
    Stage1Losses out;
    out.audio_logits = decode_pooled(g, m, ad::scale(ad::add(pa, pt), 0.5));
    out.visual_logits = decode_pooled(g, m, ad::scale(ad::add(pv, pt), 0.5));
    out.audio = ad::cross_entropy(out.audio_logits, s.label);
    out.visual = ad::cross_entropy(out.visual_logits, s.label);
    out.joint_logits = decode_pooled(g, m, ad::scale(ad::add_n({pa, pt, pv}), 1.0 / 3.0));
    out.joint = ad::cross_entropy(out.joint_logits, s.label);
    out.total = ad::scale(ad::add_n({out.audio, out.visual, out.joint}), 1.0 / 3.0);
    return out;
}

struct Stage1Eval {
    double loss = 0.0;
    double joint_accuracy = 0.0;
    double audio_accuracy = 0.0;  // audio + question objective
    double visual_accuracy = 0.0;
};

inline Stage1Eval stage1_evaluate(Model& m, const Dataset& d) {
    Stage1Eval e;
    if (d.size() == 0) return e;
    for (const auto& s : d.samples) {
        Graph g(false);
        auto l = stage1_sample_loss(g, m, s);
        e.loss += l.total.value()[0];
        e.joint_accuracy += detail::argmax(l.joint_logits.value()) == s.label;
        e.audio_accuracy += detail::argmax(l.audio_logits.value()) == s.label;
        e.visual_accuracy += detail::argmax(l.visual_logits.value()) == s.label;
    }
    const double n = static_cast<double>(d.size());
    e.loss /= n;
    e.joint_accuracy /= n;
    e.audio_accuracy /= n;
    e.visual_accuracy /= n;
    return e;
}

// Trains encoders, experts and decoder in place. Epoch 0 of the log is the
// untrained model evaluated on the training set.
inline TrainLog stage1_pretrain(Model& m, const Dataset& train, const Dataset* val, const TrainConfig& cfg) {
    cfg.validate();
    if (train.size() == 0) {
        throw DataError("stage I received an empty dataset");
    }
    TrainLog log;
    if (cfg.stage1_epochs == 0) {
        return log;
    }
    for (const char* prefix : {"enc.", "expert.", "dec."}) m.params.set_frozen(prefix, false);
    // Router, projection and guidance are untouched in stage I.
    for (const char* prefix : {"router.", "proj.", "guide."}) m.params.set_frozen(prefix, true);

    const auto initial = stage1_evaluate(m, train);
    EpochRecord r0;
    r0.stage = "stage1";
    r0.loss = r0.task = initial.loss;
    r0.accuracy = val ? stage1_evaluate(m, *val).joint_accuracy : initial.joint_accuracy;
    log.records.push_back(r0);

    Adam opt(cfg);
    std::mt19937_64 rng(detail::derive_seed(cfg.seed, 1));
    for (std::size_t epoch = 1; epoch <= cfg.stage1_epochs; ++epoch) {
        const auto order = detail::shuffled(train.size(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            m.params.zero_grad();
            for (std::size_t j = start; j < end; ++j) {
                Graph g;
                auto l = stage1_sample_loss(g, m, train.samples[order[j]]);
                loss_sum += l.total.value()[0];
                g.backward(l.total);
            }
            scale_grads(m.params, 1.0 / static_cast<double>(end - start));
            opt.step(m.params);
        }
        EpochRecord r;
        r.stage = "stage1";
        r.epoch = epoch;
        r.steps = opt.steps();
        r.loss = r.task = loss_sum / static_cast<double>(train.size());
        r.accuracy = val ? stage1_evaluate(m, *val).joint_accuracy : 0.0;
        log.records.push_back(r);
    }
    for (const char* prefix : {"router.", "proj.", "guide."}) m.params.set_frozen(prefix, false);
    return log;
}

// ---- stage II -------------------------------------------------------------------

// Frozen expert outputs for one sample.
struct SampleCache {
    std::array<std::optional<Tensor>, 3> h;      // indexed by Modality; empty when the stream is absent
    std::array<std::optional<Tensor>, 2> h_com;  // indexed by the missing stream: E_miss(Phi_avl(F_avl))
};

struct PassResult {
    Var logits;
    Var alpha;
    Var pooled;
    std::optional<PurifyTrace> trace;
};

// Recovery + mixing forward pass over cached frozen representations. Used by
// stage II training and by evaluation, so both see the same pipeline.
class RecoveryEngine {
public:
    RecoveryEngine(Model& model, const MemoryBank* audio_bank, const MemoryBank* visual_bank, Variant variant,
                   PurificationConfig purification, bool self_exclude = true)
        : model_(model),
          banks_{audio_bank, visual_bank},
          variant_(variant),
          pcfg_(purification),
          self_exclude_(self_exclude) {
        pcfg_.validate(model.config.seq_len);
        if (variant_.retrieval) {
            for (Modality mod : {Modality::audio, Modality::visual}) {
                const MemoryBank* b = banks_[static_cast<std::size_t>(mod)];
                if (b && b->modality() != mod) {
                    throw ConfigError(std::string("bank passed for ") + to_string(mod) + " holds " +
                                      to_string(b->modality()) + " entries");
                }
            }
        }
    }

    Model& model() noexcept { return model_; }
    const Variant& variant() const noexcept { return variant_; }
    const PurificationConfig& purification() const noexcept { return pcfg_; }

    const MemoryBank& bank(Modality mod) const {
        const MemoryBank* b = banks_.at(static_cast<std::size_t>(mod));
        if (!b) {
            throw ConfigError(std::string("no memory bank available for the ") + to_string(mod) + " stream");
        }
        return *b;
    }

    SampleCache prepare(const ModalityBundle& s) {
        SampleCache c;
        Graph g(false);
        for (Modality mod : {Modality::audio, Modality::visual, Modality::text}) {
            if (s.has(mod)) c.h[idx(mod)] = represent(g, model_, mod, mod, s.features(mod)).value();
        }
        for (Modality miss : {Modality::audio, Modality::visual}) {
            const Modality avl = other_av(miss);
            if (s.has(avl)) c.h_com[idx(miss)] = represent(g, model_, avl, miss, s.features(avl)).value();
        }
        return c;
    }

    // Missing-stream representation before purification: mean of the expert
    // outputs of the top-n (or bottom-n) retrieved entries, or the expert's
    // response to zeros when retrieval is off.
    const Tensor& recovered(const ModalityBundle& s, Modality missing, bool negatives) {
        if (!variant_.retrieval) return zero_rep(missing);
        auto& memo = memo_[idx(missing)][negatives ? 1 : 0];
        auto it = memo.find(s.id);
        if (it != memo.end()) return it->second;
        const MemoryBank& b = bank(missing);
        QuerySpec q;
        q.query = s.key(other_av(missing));
        q.n = pcfg_.n_retrieve;
        q.eps = pcfg_.eps;
        if (self_exclude_) q.exclude.insert(s.id);
        const auto cands = negatives ? query_bottomn(b, q) : query_topn(b, q);
        std::vector<const Tensor*> reps;
        for (const auto& c : cands) reps.push_back(&bank_rep(missing, c.index));
        return memo.emplace(s.id, average_sequences(reps)).first->second;
    }

    const Tensor& zero_rep(Modality mod) {
        auto& z = zero_[idx(mod)];
        if (!z) {
            Graph g(false);
            z = represent(g, model_, mod, mod, Tensor::zeros({model_.config.seq_len, model_.config.raw_dim(mod)})).value();
        }
        return *z;
    }

    const Tensor& bank_rep(Modality mod, std::size_t entry) {
        auto& cache = bank_reps_[idx(mod)];
        const MemoryBank& b = bank(mod);
        if (cache.size() != b.size()) cache.assign(b.size(), std::nullopt);
        if (!cache[entry]) {
            Graph g(false);
            cache[entry] = represent(g, model_, mod, mod, b.value(entry)).value();
        }
        return *cache[entry];
    }

    // One pass. `missing` absent: all streams come from the cache. Otherwise
    // `base` stands in for the missing stream and is purified when enabled.
    PassResult forward(Graph& g, const SampleCache& c, std::optional<Modality> missing, const Tensor* base,
                       bool purify_base = true) {
        std::array<Var, 3> h;
        h[idx(Modality::text)] = g.constant(*c.h[idx(Modality::text)]);
        PassResult out;
        for (Modality mod : {Modality::audio, Modality::visual}) {
            if (missing && *missing == mod) continue;
            if (!c.h[idx(mod)]) {
                throw DataError(std::string("sample lacks the ") + to_string(mod) + " stream but none was recovered");
            }
            h[idx(mod)] = g.constant(*c.h[idx(mod)]);
        }
        if (missing) {
            const Modality miss = *missing;
            Var hm = g.constant(*base);
            if (variant_.purification && purify_base) {
                const Modality avl = other_av(miss);
                out.trace = purify(g, model_, hm, h[idx(avl)], g.constant(*c.h_com[idx(miss)]),
                                   h[idx(Modality::text)], pcfg_);
                hm = out.trace->purified;
            }
            h[idx(miss)] = hm;
        }
        const Var ha = h[idx(Modality::audio)], ht = h[idx(Modality::text)], hv = h[idx(Modality::visual)];
        out.alpha = route(g, model_, ha, ht, hv);
        FuseResult f = fuse_decode(g, model_, out.alpha, ha, ht, hv);
        out.logits = f.logits;
        out.pooled = f.pooled;
        return out;
    }

    // Inference on a sample with whatever streams it carries.
    PassResult infer(Graph& g, const ModalityBundle& s, const SampleCache& c) {
        const auto miss = s.missing();
        return forward(g, c, miss, miss ? &recovered(s, *miss, false) : nullptr);
    }

private:
    static std::size_t idx(Modality m) { return static_cast<std::size_t>(m); }

    Model& model_;
    std::array<const MemoryBank*, 2> banks_;
    Variant variant_;
    PurificationConfig pcfg_;
    bool self_exclude_;
    std::array<std::optional<Tensor>, 3> zero_;
    std::array<std::vector<std::optional<Tensor>>, 2> bank_reps_;
    std::array<std::array<std::map<std::string, Tensor>, 2>, 2> memo_;
};

struct Stage2SampleLoss {
    Var total;
    Var task;
    std::optional<Var> rank_plus, rank_minus;
};

// Stage II objective for one sample; `missing` is the simulated absent stream.
inline Stage2SampleLoss stage2_sample_loss(Graph& g, RecoveryEngine& eng, const ModalityBundle& s,
                                           const SampleCache& c, std::optional<Modality> missing, double lambda) {
    Stage2SampleLoss out;
    if (!missing) {
        out.task = ad::cross_entropy(eng.forward(g, c, std::nullopt, nullptr).logits, s.label);
        out.total = out.task;
        return out;
    }
    PassResult pos = eng.forward(g, c, missing, &eng.recovered(s, *missing, false));
    out.task = ad::cross_entropy(pos.logits, s.label);
    if (!eng.variant().retrieval) {
        out.total = out.task;
        return out;
    }
    Var gt = ad::cross_entropy(eng.forward(g, c, missing, &*c.h[static_cast<std::size_t>(*missing)], false).logits,
                               s.label);
    Var neg = ad::cross_entropy(eng.forward(g, c, missing, &eng.recovered(s, *missing, true)).logits, s.label);
    auto [rp, rm] = ad::ranking_loss(gt, out.task, neg);
    out.rank_plus = rp;
    out.rank_minus = rm;
    out.total = ad::total_loss(out.task, rp, rm, lambda);
    return out;
}

struct MixEval {
    double accuracy = 0.0;
    std::array<double, 3> alpha{0.0, 0.0, 0.0};
};

inline MixEval mix_evaluate(RecoveryEngine& eng, const Dataset& d) {
    MixEval e;
    if (d.size() == 0) return e;
    for (const auto& s : d.samples) {
        const SampleCache c = eng.prepare(s);
        Graph g(false);
        PassResult p = eng.infer(g, s, c);
        e.accuracy += detail::argmax(p.logits.value()) == s.label;
        for (std::size_t k = 0; k < 3; ++k) e.alpha[k] += p.alpha.value()[k];
    }
    const double n = static_cast<double>(d.size());
    e.accuracy /= n;
    for (double& a : e.alpha) a /= n;
    return e;
}

inline std::vector<std::string> frozen_prefixes() { return {"enc.", "expert."}; }

// Freezes encoders and experts, then trains router, decoder, projection and
// guidance block. `val` (if given) is evaluated after every epoch with
// missingness simulated at the training rate.
inline TrainLog stage2_mix(Model& m, const Dataset& train, const Dataset* val, const MemoryBank* audio_bank,
                           const MemoryBank* visual_bank, const TrainConfig& cfg, Variant variant = {}) {
    cfg.validate();
    if (train.size() == 0) {
        throw DataError("stage II received an empty dataset");
    }
    if (variant.retrieval) {
        const bool need_audio = cfg.policy != MissingPolicy::visual;
        const bool need_visual = cfg.policy != MissingPolicy::audio;
        if ((need_audio && (!audio_bank || audio_bank->modality() != Modality::audio)) ||
            (need_visual && (!visual_bank || visual_bank->modality() != Modality::visual))) {
            throw ConfigError(std::string("memory bank modality does not match the missing-modality policy \"") +
                              to_string(cfg.policy) + "\"");
        }
    }
    for (const auto& prefix : frozen_prefixes()) m.params.set_frozen(prefix, true);
    for (const char* prefix : {"router.", "dec.", "proj.", "guide."}) m.params.set_frozen(prefix, false);

    RecoveryEngine eng(m, audio_bank, visual_bank, variant, cfg.purification(), cfg.self_exclude);
    std::vector<SampleCache> caches;
    caches.reserve(train.size());
    for (const auto& s : train.samples) caches.push_back(eng.prepare(s));

    std::optional<Dataset> val_missing;
    if (val) val_missing = simulate_missing(*val, cfg.missing_rate, cfg.policy, detail::derive_seed(cfg.seed, 3));
    // The evaluation engine never self-excludes: validation ids are not in the bank.
    auto evaluate_val = [&]() {
        if (!val_missing) return MixEval{};
        RecoveryEngine ev(m, audio_bank, visual_bank, variant, cfg.purification(), false);
        return mix_evaluate(ev, *val_missing);
    };

    TrainLog log;
    {
        EpochRecord r0;
        r0.stage = "stage2";
        const MixEval e = evaluate_val();
        r0.accuracy = e.accuracy;
        if (val_missing) r0.alpha = e.alpha;
        log.records.push_back(r0);
    }
    if (cfg.stage2_epochs == 0) return log;

    Adam opt(cfg);
    std::mt19937_64 rng(detail::derive_seed(cfg.seed, 2));
    std::bernoulli_distribution drop(cfg.missing_rate);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t epoch = 1; epoch <= cfg.stage2_epochs; ++epoch) {
        const auto order = detail::shuffled(train.size(), rng);
        double loss_sum = 0.0, task_sum = 0.0, rp_sum = 0.0, rm_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            m.params.zero_grad();
            for (std::size_t j = start; j < end; ++j) {
                const auto& s = train.samples[order[j]];
                std::optional<Modality> missing;
                if (drop(rng)) {
                    missing = cfg.policy == MissingPolicy::audio    ? Modality::audio
                              : cfg.policy == MissingPolicy::visual ? Modality::visual
                              : coin(rng)                           ? Modality::audio
                                                                    : Modality::visual;
                }
                Graph g;
                auto l = stage2_sample_loss(g, eng, s, caches[order[j]], missing, cfg.lambda);
                loss_sum += l.total.value()[0];
                task_sum += l.task.value()[0];
                if (l.rank_plus) rp_sum += l.rank_plus->value()[0];
                if (l.rank_minus) rm_sum += l.rank_minus->value()[0];
                g.backward(l.total);
            }
            scale_grads(m.params, 1.0 / static_cast<double>(end - start));
            opt.step(m.params);
        }
        const double n = static_cast<double>(train.size());
        EpochRecord r;
        r.stage = "stage2";
        r.epoch = epoch;
        r.steps = opt.steps();
        r.loss = loss_sum / n;
        r.task = task_sum / n;
        r.rank_plus = rp_sum / n;
        r.rank_minus = rm_sum / n;
        const MixEval e = evaluate_val();
        r.accuracy = e.accuracy;
        if (val_missing) r.alpha = e.alpha;
        log.records.push_back(r);
    }
    return log;
}

}  // namespace ravqa
