#pragma once

// Feature encoders, modality experts (pre-LN transformer encoders), the shared
// soft router, the answer decoder and the purification parameters, all stored
// in one ParamStore under dotted names:
//
//   enc.<m>.{w,b}                        raw -> model-dim projection
//   expert.<m>.blk<i>.{ln1,attn,ln2,ff1,ff2}.*
//   guide.blk<i>.{sa,ln_sa,ca,ln_ca}.*   text-guided block used by purification
//   proj.w                               dissonance projection
//   router.{l1,l2}.{w,b}                 shared gate, one logit per modality
//   dec.{l1,l2}.{w,b}                    pooled joint representation -> answers

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ravqa/autodiff.hpp"
#include "ravqa/binary_io.hpp"
#include "ravqa/embedding_store.hpp"

namespace ravqa {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t ffn_mult = 2;
    std::size_t seq_len = 12;  // common length L for audio and visual streams
    std::size_t text_len = 4;
    std::size_t audio_dim = 16;
    std::size_t visual_dim = 16;
    std::size_t text_dim = 8;
    std::size_t router_hidden = 32;
    std::size_t decoder_hidden = 64;
    std::size_t guidance_blocks = 1;
    double ln_eps = 1e-5;
    double proj_init_noise = 0.01;
    bool tie_av_init = false;  // visual encoder/expert start as a copy of the audio ones
    std::vector<std::string> answers;

    std::size_t raw_dim(Modality m) const {
        switch (m) {
            case Modality::audio: return audio_dim;
            case Modality::visual: return visual_dim;
            case Modality::text: return text_dim;
        }
        return 0;
    }

    void validate() const {
        if (d_model == 0 || heads == 0 || d_model % heads != 0) {
            throw ConfigError("d_model must be a positive multiple of heads");
        }
        if (seq_len == 0 || text_len == 0 || audio_dim == 0 || visual_dim == 0 || text_dim == 0) {
            throw ConfigError("sequence lengths and raw dims must be positive");
        }
        if (answers.size() < 2) {
            throw ConfigError("answer vocabulary needs at least two entries");
        }
        if (ffn_mult == 0 || router_hidden == 0 || decoder_hidden == 0) {
            throw ConfigError("hidden widths must be positive");
        }
        if (tie_av_init && audio_dim != visual_dim) {
            throw ConfigError("tie_av_init requires audio_dim == visual_dim");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"d_model", c.d_model},         {"depth", c.depth},
         {"heads", c.heads},             {"ffn_mult", c.ffn_mult},
         {"seq_len", c.seq_len},         {"text_len", c.text_len},
         {"audio_dim", c.audio_dim},     {"visual_dim", c.visual_dim},
         {"text_dim", c.text_dim},       {"router_hidden", c.router_hidden},
         {"decoder_hidden", c.decoder_hidden}, {"guidance_blocks", c.guidance_blocks},
         {"ln_eps", c.ln_eps},           {"proj_init_noise", c.proj_init_noise},
         {"tie_av_init", c.tie_av_init}, {"answers", c.answers}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.d_model = j.value("d_model", d.d_model);
    c.depth = j.value("depth", d.depth);
    c.heads = j.value("heads", d.heads);
    c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
    c.seq_len = j.value("seq_len", d.seq_len);
    c.text_len = j.value("text_len", d.text_len);
    c.audio_dim = j.value("audio_dim", d.audio_dim);
    c.visual_dim = j.value("visual_dim", d.visual_dim);
    c.text_dim = j.value("text_dim", d.text_dim);
    c.router_hidden = j.value("router_hidden", d.router_hidden);
    c.decoder_hidden = j.value("decoder_hidden", d.decoder_hidden);
    c.guidance_blocks = j.value("guidance_blocks", d.guidance_blocks);
    c.ln_eps = j.value("ln_eps", d.ln_eps);
    c.proj_init_noise = j.value("proj_init_noise", d.proj_init_noise);
    c.tie_av_init = j.value("tie_av_init", d.tie_av_init);
    c.answers = j.value("answers", d.answers);
}

// Sinusoidal position table, L x D.
inline Tensor positional_table(std::size_t len, std::size_t dim) {
    Tensor p({len, dim});
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            p.at(t, i) = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
        }
    }
    return p;
}

struct Model {
    ModelConfig config;
    ParamStore params;

    Parameter& p(const std::string& name) { return params.at(name); }
};

namespace detail {

inline std::string mname(Modality m) { return to_string(m); }

inline Tensor gaussian(std::mt19937_64& rng, Tensor::Shape shape, double stddev) {
    std::normal_distribution<double> nd(0.0, stddev);
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = nd(rng);
    return t;
}

inline void add_linear(ParamStore& ps, std::mt19937_64& rng, const std::string& name, std::size_t in, std::size_t out,
                       bool bias = true) {
    ps.add(name + ".w", gaussian(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
    if (bias) ps.add(name + ".b", Tensor({out}));
}

inline void add_norm(ParamStore& ps, const std::string& name, std::size_t d) {
    ps.add(name + ".g", Tensor::full({d}, 1.0));
    ps.add(name + ".b", Tensor({d}));
}

// Key projection carries no bias: it would shift every score in a softmax row equally.
inline void add_attention(ParamStore& ps, std::mt19937_64& rng, const std::string& name, std::size_t d) {
    add_linear(ps, rng, name + ".q", d, d);
    add_linear(ps, rng, name + ".k", d, d, false);
    add_linear(ps, rng, name + ".v", d, d);
    add_linear(ps, rng, name + ".o", d, d);
}

}  // namespace detail

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m{cfg, {}};
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.d_model;
    for (Modality mod : {Modality::audio, Modality::visual, Modality::text}) {
        const std::string e = "enc." + detail::mname(mod);
        detail::add_linear(m.params, rng, e, cfg.raw_dim(mod), d);
        for (std::size_t b = 0; b < cfg.depth; ++b) {
            const std::string x = "expert." + detail::mname(mod) + ".blk" + std::to_string(b);
            detail::add_norm(m.params, x + ".ln1", d);
            detail::add_attention(m.params, rng, x + ".attn", d);
            detail::add_norm(m.params, x + ".ln2", d);
            detail::add_linear(m.params, rng, x + ".ff1", d, d * cfg.ffn_mult);
            detail::add_linear(m.params, rng, x + ".ff2", d * cfg.ffn_mult, d);
        }
    }
    for (std::size_t b = 0; b < cfg.guidance_blocks; ++b) {
        const std::string x = "guide.blk" + std::to_string(b);
        detail::add_attention(m.params, rng, x + ".sa", d);
        detail::add_norm(m.params, x + ".ln_sa", d);
        detail::add_attention(m.params, rng, x + ".ca", d);
        detail::add_norm(m.params, x + ".ln_ca", d);
    }
    Tensor proj = detail::gaussian(rng, {d, d}, cfg.proj_init_noise);
    for (std::size_t i = 0; i < d; ++i) proj.at(i, i) += 1.0;
    m.params.add("proj.w", std::move(proj));
    detail::add_linear(m.params, rng, "router.l1", d, cfg.router_hidden);
    detail::add_linear(m.params, rng, "router.l2", cfg.router_hidden, 1);
    detail::add_linear(m.params, rng, "dec.l1", d, cfg.decoder_hidden);
    detail::add_linear(m.params, rng, "dec.l2", cfg.decoder_hidden, cfg.answers.size());
    if (cfg.tie_av_init) {
        for (const auto& [from, to] : {std::pair<std::string, std::string>{"enc.audio.", "enc.visual."},
                                       {"expert.audio.", "expert.visual."}}) {
            for (const auto& name : m.params.names()) {
                if (name.rfind(from, 0) == 0) {
                    m.params.at(to + name.substr(from.size())).value = m.params.at(name).value;
                }
            }
        }
    }
    return m;
}

// ---- building blocks ----------------------------------------------------

inline Var linear(Graph& g, ParamStore& ps, const std::string& name, Var x) {
    Var y = ad::matmul(x, g.param(ps.at(name + ".w")));
    const std::string b = name + ".b";
    return ps.contains(b) ? ad::add_bias(y, g.param(ps.at(b))) : y;
}

inline Var norm(Graph& g, ParamStore& ps, const std::string& name, Var x, double eps) {
    return ad::layer_norm(x, g.param(ps.at(name + ".g")), g.param(ps.at(name + ".b")), eps);
}

// Multi-head attention block: queries from xq, keys/values from xkv, output projection.
inline Var multi_head_attention(Graph& g, ParamStore& ps, const std::string& name, Var xq, Var xkv,
                                std::size_t heads, Tensor* probs = nullptr) {
    Var q = linear(g, ps, name + ".q", xq);
    Var k = linear(g, ps, name + ".k", xkv);
    Var v = linear(g, ps, name + ".v", xkv);
    return linear(g, ps, name + ".o", ad::attention(q, k, v, heads, probs));
}

// ---- encoders_experts operations ------------------------------------------

// Linear projection of raw L x D_raw features plus the sinusoidal position table.
inline Var encode(Graph& g, Model& m, Modality mod, Var raw) {
    const Tensor& x = raw.value();
    const std::size_t want = m.config.raw_dim(mod);
    if (x.rank() != 2 || x.cols() != want) {
        throw DimensionError(std::string("encoder for ") + to_string(mod) + " expects L x " + std::to_string(want) +
                             ", got " + x.shape_str());
    }
    Var y = linear(g, m.params, "enc." + detail::mname(mod), raw);
    return ad::add(y, g.constant(positional_table(x.rows(), m.config.d_model)));
}

// Runs the modality's transformer stack. `attn` (if given) receives each block's
// attention maps [heads x L x L].
inline Var expert_forward(Graph& g, Model& m, Modality mod, Var h, std::vector<Tensor>* attn = nullptr) {
    const auto& c = m.config;
    if (h.value().rank() != 2 || h.value().cols() != c.d_model) {
        throw DimensionError("expert expects L x " + std::to_string(c.d_model) + ", got " + h.value().shape_str());
    }
    Var x = h;
    for (std::size_t b = 0; b < c.depth; ++b) {
        const std::string p = "expert." + detail::mname(mod) + ".blk" + std::to_string(b);
        Tensor probs;
        Var n1 = norm(g, m.params, p + ".ln1", x, c.ln_eps);
        x = ad::add(x, multi_head_attention(g, m.params, p + ".attn", n1, n1, c.heads, attn ? &probs : nullptr));
        if (attn) attn->push_back(std::move(probs));
        Var n2 = norm(g, m.params, p + ".ln2", x, c.ln_eps);
        Var f = linear(g, m.params, p + ".ff2", ad::gelu(linear(g, m.params, p + ".ff1", n2)));
        x = ad::add(x, f);
    }
    return x;
}

inline Tensor resample_length(const Tensor& x, std::size_t len);

// Aligns raw features to the common length, then encode and expert_forward.
inline Var represent(Graph& g, Model& m, Modality encoder, Modality expert, const Tensor& raw) {
    const std::size_t len = m.config.seq_len;
    Var x = g.constant(raw.rank() == 2 && raw.rows() != len ? resample_length(raw, len) : raw);
    return expert_forward(g, m, expert, encode(g, m, encoder, x));
}

// Gate logit for one modality representation.
inline Var gate_logit(Graph& g, Model& m, Var h) {
    Var pooled = ad::mean_pool(h);
    return linear(g, m.params, "router.l2", ad::gelu(linear(g, m.params, "router.l1", pooled)));
}

// Mixture weights alpha = softmax(g_a, g_t, g_v), in that order.
inline Var route(Graph& g, Model& m, Var h_a, Var h_t, Var h_v) {
    return ad::softmax(ad::stack({gate_logit(g, m, h_a), gate_logit(g, m, h_t), gate_logit(g, m, h_v)}));
}

struct FuseResult {
    Var joint;   // token-wise Z_joint, L x D
    Var pooled;  // mean over tokens, D
    Var logits;  // |answers|
};

inline FuseResult fuse_decode(Graph& g, Model& m, Var alpha, Var h_a, Var h_t, Var h_v) {
    const Tensor& a = alpha.value();
    if (a.size() != 3) {
        throw DimensionError("fuse_decode expects three mixture weights, got " + a.shape_str());
    }
    if (h_a.shape() != h_t.shape() || h_a.shape() != h_v.shape()) {
        throw DimensionError("modality sequences must share a shape: " + h_a.value().shape_str() + ", " +
                             h_t.value().shape_str() + ", " + h_v.value().shape_str());
    }
    Var z = ad::add_n({ad::scale_by(ad::index(alpha, 0), h_a), ad::scale_by(ad::index(alpha, 1), h_t),
                       ad::scale_by(ad::index(alpha, 2), h_v)});
    Var pooled = ad::mean_pool(z);
    Var logits = linear(g, m.params, "dec.l2", ad::gelu(linear(g, m.params, "dec.l1", pooled)));
    return {z, pooled, logits};
}

// Decoder head applied to an already pooled representation.
inline Var decode_pooled(Graph& g, Model& m, Var pooled) {
    return linear(g, m.params, "dec.l2", ad::gelu(linear(g, m.params, "dec.l1", pooled)));
}

// Linear interpolation of an L_in x D sequence to `len` rows.
inline Tensor resample_length(const Tensor& x, std::size_t len) {
    if (x.rank() != 2 || x.rows() == 0) {
        throw EmptySequenceError("cannot resample an empty sequence");
    }
    if (x.rows() == len) return x;
    Tensor y({len, x.cols()});
    for (std::size_t t = 0; t < len; ++t) {
        const double pos = len == 1 ? 0.0
                                    : static_cast<double>(t) * static_cast<double>(x.rows() - 1) /
                                          static_cast<double>(len - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, x.rows() - 1);
        const double w = pos - static_cast<double>(lo);
        for (std::size_t j = 0; j < x.cols(); ++j) {
            y.at(t, j) = (1.0 - w) * x.at(lo, j) + w * x.at(hi, j);
        }
    }
    return y;
}

// ---- checkpoints ------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "R2CK";
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::filesystem::path config_path(const std::filesystem::path& ckpt) {
    auto p = ckpt;
    p += ".config.json";
    return p;
}

inline void write_params(const ParamStore& ps, io::ByteWriter& w) {
    w.bytes({kCheckpointMagic, 4});
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(ps.size()));
    for (const auto& [name, p] : ps) {
        w.short_string(name);
        w.u8(static_cast<std::uint8_t>(p.value.rank()));
        for (std::size_t e : p.value.shape()) w.u32(static_cast<std::uint32_t>(e));
        for (double v : p.value.data()) w.f64(v);
    }
    w.seal();
}

inline ParamStore read_params(const std::vector<std::uint8_t>& file) {
    io::ByteReader r = io::open_container(file, {kCheckpointMagic, 4}, kCheckpointVersion);
    const std::uint32_t count = r.u32();
    ParamStore ps;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.short_string();
        const std::uint8_t rank = r.u8();
        if (rank == 0 || rank > 3) {
            throw FormatError("parameter \"" + name + "\" has invalid rank " + std::to_string(rank));
        }
        Tensor::Shape shape(rank);
        for (auto& e : shape) e = r.u32();
        const std::size_t n = Tensor::count(shape);
        r.need(n * 8);
        std::vector<double> data(n);
        for (double& v : data) v = r.f64();
        ps.add(name, Tensor(std::move(shape), std::move(data)));
    }
    io::verify_crc(file, r);
    return ps;
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path) {
    io::ByteWriter w;
    write_params(m.params, w);
    w.write_file(path);
    std::ofstream(config_path(path)) << nlohmann::json(m.config).dump(2) << '\n';
}

// Loads parameters and config; the parameter set must match what the config builds.
inline Model load_checkpoint(const std::filesystem::path& path) {
    ModelConfig cfg;
    {
        std::ifstream is(config_path(path));
        if (!is) {
            throw IoError("missing checkpoint config " + config_path(path).string());
        }
        try {
            cfg = nlohmann::json::parse(is).get<ModelConfig>();
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("unreadable checkpoint config: " + std::string(ex.what()));
        }
    }
    Model m{cfg, read_params(io::read_file(path))};
    const Model ref = init_model(cfg, 0);
    if (ref.params.size() != m.params.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(m.params.size()) + " parameters, config expects " +
                              std::to_string(ref.params.size()));
    }
    for (const auto& [name, p] : ref.params) {
        if (!m.params.contains(name) || m.params.at(name).value.shape() != p.value.shape()) {
            throw CheckpointError("checkpoint parameter \"" + name + "\" missing or mis-shaped");
        }
    }
    return m;
}

// CRC32 over names and values of parameters whose name starts with any prefix.
inline std::uint32_t param_checksum(const ParamStore& ps, const std::vector<std::string>& prefixes = {}) {
    io::ByteWriter w;
    for (const auto& [name, p] : ps) {
        bool take = prefixes.empty();
        for (const auto& pre : prefixes) take = take || name.compare(0, pre.size(), pre) == 0;
        if (!take) continue;
        w.short_string(name);
        for (double v : p.value.data()) w.f64(v);
    }
    return io::crc32(w.buffer().data(), w.buffer().size());
}

}  // namespace ravqa
