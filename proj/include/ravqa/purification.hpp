#pragma once

// Context-aware adaptive purification of retrieved features.
//
// Three phases over the averaged candidate sequence H_miss (L x D):
//   1. noise profiling: dissonance d_i = 1 - cos(H_miss[i] W_proj, mean(H_avl));
//      the k most dissonant tokens form the noise set.
//   2. text-guided acquisition: H_com (available features through the missing
//      modality's expert) passes a self-attention -> cross-attention block with
//      the question as keys/values; per-token saliency comes from the attention
//      maps and the k most salient rows form the salient set.
//   3. injection: the j-th noisiest token is overwritten with the j-th most
//      salient guided row; all other tokens are kept.
//
// Every phase works on Graph variables so the guidance block and the decoder
// downstream can be trained through the injected rows. Index selection itself
// is piecewise constant and carries no gradient.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "ravqa/autodiff.hpp"
#include "ravqa/model.hpp"

namespace ravqa {

struct PurificationConfig {
    std::size_t k_purge = 5;
    std::size_t n_retrieve = 3;
    double eps = kDefaultCosineEps;
    bool use_projection = true;
    bool allow_zero_budget = false;  // k_purge = 0 turns purification into the identity

    void validate(std::size_t len) const {
        if (k_purge > len) {
            throw BudgetError("purification budget " + std::to_string(k_purge) + " exceeds sequence length " +
                              std::to_string(len));
        }
        if (k_purge == 0 && !allow_zero_budget) {
            throw ConfigError("purification budget must be >= 1 (set allow_zero_budget to override)");
        }
        if (n_retrieve == 0) {
            throw ConfigError("n_retrieve must be >= 1");
        }
        if (!(eps > 0.0)) {
            throw ConfigError("purification eps must be > 0");
        }
    }
};

inline void to_json(nlohmann::json& j, const PurificationConfig& c) {
    j = {{"k_purge", c.k_purge},
         {"n_retrieve", c.n_retrieve},
         {"eps", c.eps},
         {"use_projection", c.use_projection},
         {"allow_zero_budget", c.allow_zero_budget}};
}

inline void from_json(const nlohmann::json& j, PurificationConfig& c) {
    PurificationConfig d;
    c.k_purge = j.value("k_purge", d.k_purge);
    c.n_retrieve = j.value("n_retrieve", d.n_retrieve);
    c.eps = j.value("eps", d.eps);
    c.use_projection = j.value("use_projection", d.use_projection);
    c.allow_zero_budget = j.value("allow_zero_budget", d.allow_zero_budget);
}

struct NoiseProfile {
    std::vector<double> dissonance;          // length L
    std::vector<std::size_t> noise_indices;  // descending dissonance, size k
    std::vector<std::uint8_t> noise_mask;    // length L
};

struct GuidanceOutput {
    Tensor guided;       // L x D
    Tensor attn_self;    // [heads x L x L], summed over guidance blocks
    Tensor attn_cross;   // [heads x L x L_t], summed over guidance blocks
    std::vector<double> saliency;
    std::vector<std::size_t> salient_indices;
    std::vector<std::uint8_t> salient_mask;
};

inline constexpr std::int64_t kKept = -1;

struct PurifiedRepresentation {
    Tensor purified;                     // L x D
    std::vector<std::int64_t> provenance;  // kKept, or the H_guided row injected at this position
};

namespace detail {

inline std::vector<std::uint8_t> index_mask(const std::vector<std::size_t>& idx, std::size_t len) {
    std::vector<std::uint8_t> m(len, 0);
    for (std::size_t i : idx) m[i] = 1;
    return m;
}

inline void accumulate(Tensor& acc, const Tensor& t) {
    if (acc.size() == 0 || acc.shape() != t.shape()) {
        acc = t;
        return;
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t[i];
}

}  // namespace detail

// Mean over candidates, accumulated in candidate order then divided by n.
inline Tensor average_sequences(const std::vector<const Tensor*>& reps) {
    if (reps.empty()) {
        throw EmptySequenceError("no candidates to aggregate");
    }
    Tensor acc = *reps.front();
    for (std::size_t i = 1; i < reps.size(); ++i) {
        if (reps[i]->shape() != acc.shape()) {
            throw DimensionError("candidate length mismatch: " + reps[i]->shape_str() + " vs " + acc.shape_str());
        }
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += (*reps[i])[k];
    }
    const double n = static_cast<double>(reps.size());
    for (double& v : acc.storage()) v /= n;
    return acc;
}

// H_miss = mean_i E_miss(Phi_miss(r_i)).
inline Tensor aggregate_candidates(Model& m, Modality missing, const std::vector<Tensor>& candidates) {
    if (candidates.empty()) {
        throw EmptySequenceError("aggregate_candidates needs at least one candidate");
    }
    for (const auto& c : candidates) {
        if (c.shape() != candidates.front().shape()) {
            throw DimensionError("candidate length mismatch: " + c.shape_str() + " vs " +
                                 candidates.front().shape_str());
        }
    }
    std::vector<Tensor> reps;
    reps.reserve(candidates.size());
    for (const auto& c : candidates) {
        Graph g(false);
        reps.push_back(represent(g, m, missing, missing, c).value());
    }
    std::vector<const Tensor*> ptrs;
    for (const auto& r : reps) ptrs.push_back(&r);
    return average_sequences(ptrs);
}

// Per-token dissonance against the available modality's pooled anchor.
inline Var dissonance(Graph& g, Model& m, Var h_miss, Var h_avl, bool use_projection, double eps) {
    Var projected = use_projection ? ad::matmul(h_miss, g.param(m.p("proj.w"))) : h_miss;
    Var anchor = ad::mean_pool(h_avl);
    Var cos = ad::row_cosine(projected, anchor, eps);
    return ad::sub(g.constant(Tensor::full(cos.shape(), 1.0)), cos);
}

inline NoiseProfile profile_noise(Graph& g, Model& m, Var h_miss, Var h_avl, std::size_t k_purge, bool use_projection,
                                  double eps) {
    const std::size_t len = h_miss.value().rows();
    if (k_purge > len) {
        throw BudgetError("noise budget " + std::to_string(k_purge) + " exceeds length " + std::to_string(len));
    }
    Var d = dissonance(g, m, h_miss, h_avl, use_projection, eps);
    NoiseProfile np;
    np.dissonance.assign(d.value().data().begin(), d.value().data().end());
    np.noise_indices = topk_indices(np.dissonance, k_purge);
    np.noise_mask = detail::index_mask(np.noise_indices, len);
    return np;
}

inline NoiseProfile profile_noise(Model& m, const Tensor& h_miss, const Tensor& h_avl, std::size_t k_purge,
                                  bool use_projection = true, double eps = kDefaultCosineEps) {
    Graph g(false);
    return profile_noise(g, m, g.constant(h_miss), g.constant(h_avl), k_purge, use_projection, eps);
}

// Saliency: attention each H_com token receives under self-attention (summed over
// heads and query rows) plus its cross-attention row mass (summed over heads).
inline std::vector<double> saliency_scores(const Tensor& attn_self, const Tensor& attn_cross) {
    const std::size_t heads = attn_self.extent(0), len = attn_self.extent(1), lt = attn_cross.extent(2);
    std::vector<double> self_part(len, 0.0), cross_part(len, 0.0), sigma(len);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < len; ++q) {
            for (std::size_t i = 0; i < len; ++i) {
                self_part[i] += attn_self[(h * len + q) * len + i];
            }
            for (std::size_t j = 0; j < lt; ++j) {
                cross_part[q] += attn_cross[(h * len + q) * lt + j];
            }
        }
    }
    for (std::size_t i = 0; i < len; ++i) sigma[i] = cross_part[i] + self_part[i];
    return sigma;
}

struct GuidanceResult {
    Var guided;
    GuidanceOutput info;
};

inline GuidanceResult guide_semantics(Graph& g, Model& m, Var h_com, Var h_t, std::size_t k_purge) {
    const auto& c = m.config;
    const std::size_t len = h_com.value().rows();
    if (k_purge > len) {
        throw BudgetError("salient budget " + std::to_string(k_purge) + " exceeds common-knowledge length " +
                          std::to_string(len));
    }
    GuidanceResult out;
    Var x = h_com;
    for (std::size_t b = 0; b < c.guidance_blocks; ++b) {
        const std::string p = "guide.blk" + std::to_string(b);
        Tensor a_self, a_cross;
        x = norm(g, m.params, p + ".ln_sa", ad::add(x, multi_head_attention(g, m.params, p + ".sa", x, x, c.heads, &a_self)),
                 c.ln_eps);
        x = norm(g, m.params, p + ".ln_ca",
                 ad::add(x, multi_head_attention(g, m.params, p + ".ca", x, h_t, c.heads, &a_cross)), c.ln_eps);
        detail::accumulate(out.info.attn_self, a_self);
        detail::accumulate(out.info.attn_cross, a_cross);
    }
    out.guided = x;
    out.info.guided = x.value();
    if (c.guidance_blocks == 0) {
        // Without a block there is no attention evidence: uniform saliency.
        out.info.saliency.assign(len, 0.0);
    } else {
        out.info.saliency = saliency_scores(out.info.attn_self, out.info.attn_cross);
    }
    out.info.salient_indices = topk_indices(out.info.saliency, k_purge);
    out.info.salient_mask = detail::index_mask(out.info.salient_indices, len);
    return out;
}

inline std::vector<std::int64_t> provenance_of(const NoiseProfile& noise, const GuidanceOutput& guidance,
                                               std::size_t len) {
    std::vector<std::int64_t> prov(len, kKept);
    for (std::size_t j = 0; j < noise.noise_indices.size(); ++j) {
        prov[noise.noise_indices[j]] = static_cast<std::int64_t>(guidance.salient_indices[j]);
    }
    return prov;
}

inline Var inject(Var h_miss, Var guided, const NoiseProfile& noise, const GuidanceOutput& guidance) {
    if (noise.noise_indices.size() != guidance.salient_indices.size()) {
        throw DimensionError("noise set has " + std::to_string(noise.noise_indices.size()) +
                             " indices but salient set has " + std::to_string(guidance.salient_indices.size()));
    }
    return ad::overwrite_rows(h_miss, guided, noise.noise_indices, guidance.salient_indices);
}

inline PurifiedRepresentation inject(const Tensor& h_miss, const NoiseProfile& noise, const GuidanceOutput& guidance) {
    Graph g(false);
    Var out = inject(g.constant(h_miss), g.constant(guidance.guided), noise, guidance);
    return {out.value(), provenance_of(noise, guidance, h_miss.rows())};
}

struct PurifyTrace {
    Var purified;
    NoiseProfile noise;
    GuidanceOutput guidance;
    std::vector<std::int64_t> provenance;
};

// Phases 1-3 on precomputed representations. H_miss, H_avl and H_com are
// outputs of frozen experts; gradients flow into the guidance block (and
// anything upstream of h_t) through injected rows.
inline PurifyTrace purify(Graph& g, Model& m, Var h_miss, Var h_avl, Var h_com, Var h_t,
                          const PurificationConfig& cfg) {
    cfg.validate(h_miss.value().rows());
    PurifyTrace t;
    t.noise = profile_noise(g, m, h_miss, h_avl, cfg.k_purge, cfg.use_projection, cfg.eps);
    GuidanceResult gr = guide_semantics(g, m, h_com, h_t, cfg.k_purge);
    t.guidance = std::move(gr.info);
    t.purified = inject(h_miss, gr.guided, t.noise, t.guidance);
    t.provenance = provenance_of(t.noise, t.guidance, h_miss.value().rows());
    return t;
}

struct CapResult {
    PurifiedRepresentation output;
    Tensor h_miss;
    NoiseProfile noise;
    GuidanceOutput guidance;
};

// End-to-end purification for one sample with `missing` absent: available raw
// features, question features and raw retrieved candidates of the missing modality.
inline CapResult cap_purify(Model& m, Modality missing, const Tensor& f_avl, const Tensor& f_text,
                            const std::vector<Tensor>& candidates, const PurificationConfig& cfg) {
    if (missing == Modality::text) {
        throw ContractError("purification recovers audio or visual, not text");
    }
    const Modality avl = other_av(missing);
    Graph g(false);
    Var h_avl = represent(g, m, avl, avl, f_avl);
    Var h_t = represent(g, m, Modality::text, Modality::text, f_text);
    Var h_com = represent(g, m, avl, missing, f_avl);
    Tensor h_miss = aggregate_candidates(m, missing, candidates);
    PurifyTrace t = purify(g, m, g.constant(h_miss), h_avl, h_com, h_t, cfg);
    return {{t.purified.value(), t.provenance}, std::move(h_miss), std::move(t.noise), std::move(t.guidance)};
}

// Debug record consumed by audits and external plotting.
inline nlohmann::json purification_record(const std::string& sample_id, const NoiseProfile& noise,
                                          const GuidanceOutput& guidance,
                                          const std::vector<std::int64_t>& provenance) {
    nlohmann::json prov = nlohmann::json::array();
    for (std::int64_t p : provenance) {
        prov.push_back(p == kKept ? nlohmann::json("retrieved-kept") : nlohmann::json("injected-from " + std::to_string(p)));
    }
    return {{"sample_id", sample_id},
            {"dissonance", noise.dissonance},
            {"saliency", guidance.saliency},
            {"noise_indices", noise.noise_indices},
            {"salient_indices", guidance.salient_indices},
            {"noise_mask", noise.noise_mask},
            {"salient_mask", guidance.salient_mask},
            {"provenance", prov}};
}

}  // namespace ravqa
