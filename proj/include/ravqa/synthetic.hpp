#pragma once

// Synthetic audio-visual QA benchmark.
//
// Every sample belongs to a latent event class c. The class fixes three
// attributes: an audio-only attribute, a visual-only attribute and a shared
// attribute carried by both streams. Audio tokens are noisy sums of the audio
// and shared prototypes, visual tokens likewise; a fraction of tokens are
// distractors drawn from another class. Questions ask for one attribute, so
// "audio" questions are unanswerable from the visual stream alone. Each stream
// also carries a unified-space key (a noisy class embedding) that retrieval
// can use when the other stream is missing.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "ravqa/binary_io.hpp"
#include "ravqa/embedding_store.hpp"
#include "ravqa/tensor.hpp"

namespace ravqa {

enum class QuestionType : std::uint8_t { audio = 0, visual = 1, either = 2 };

inline const char* to_string(QuestionType q) {
    switch (q) {
        case QuestionType::audio: return "audio";
        case QuestionType::visual: return "visual";
        case QuestionType::either: return "either";
    }
    return "?";
}

enum class MissingPolicy : std::uint8_t { audio = 0, visual = 1, either = 2 };

inline const char* to_string(MissingPolicy p) {
    switch (p) {
        case MissingPolicy::audio: return "audio";
        case MissingPolicy::visual: return "visual";
        case MissingPolicy::either: return "either";
    }
    return "?";
}

inline MissingPolicy parse_policy(const std::string& s) {
    if (s == "audio") return MissingPolicy::audio;
    if (s == "visual") return MissingPolicy::visual;
    if (s == "either") return MissingPolicy::either;
    throw ConfigError("invalid missing-modality policy \"" + s + "\"");
}

struct SyntheticSpec {
    std::size_t num_classes = 27;
    std::size_t attribute_values = 3;
    std::size_t train_samples = 540;
    std::size_t val_samples = 108;
    std::size_t test_samples = 270;
    std::size_t seq_len = 12;
    std::size_t text_len = 4;
    std::size_t audio_dim = 16;
    std::size_t visual_dim = 16;
    std::size_t text_dim = 8;
    std::size_t key_dim = 16;
    double noise = 1.0;            // additive feature noise (std)
    double key_noise = 0.6;        // unified-key noise (std of the full vector)
    double distractor_rate = 0.25; // fraction of tokens drawn from another class
    double burst_rate = 0.0;       // probability that a stream carries a corrupted token span
    std::size_t burst_len = 3;
    double burst_scale = 4.0;      // std of the additive corruption inside a burst
    bool unified_space = false;    // audio and visual share one raw space and the shared-attribute prototypes
    double frac_audio = 1.0 / 3.0;
    double frac_visual = 1.0 / 3.0;
    double frac_either = 1.0 / 3.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 2) throw ConfigError("synthetic spec needs at least two classes");
        if (attribute_values < 2) throw ConfigError("synthetic spec needs at least two attribute values");
        if (frac_audio < 0 || frac_visual < 0 || frac_either < 0 ||
            std::abs(frac_audio + frac_visual + frac_either - 1.0) > 1e-9) {
            throw ConfigError("invalid fractions: question-type fractions must be non-negative and sum to 1");
        }
        if (seq_len == 0 || text_len == 0 || audio_dim == 0 || visual_dim == 0 || text_dim == 0 || key_dim == 0) {
            throw ConfigError("synthetic lengths and dims must be positive");
        }
        if (noise < 0 || key_noise < 0 || distractor_rate < 0 || distractor_rate > 1 || burst_rate < 0 ||
            burst_rate > 1 || burst_scale < 0) {
            throw ConfigError("noise levels must be >= 0 and rates in [0,1]");
        }
        if (burst_len > seq_len) throw ConfigError("burst_len exceeds seq_len");
        if (unified_space && audio_dim != visual_dim) {
            throw ConfigError("unified_space requires audio_dim == visual_dim");
        }
    }

    std::size_t answer_count() const { return 3 * attribute_values; }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = {{"num_classes", s.num_classes},   {"attribute_values", s.attribute_values},
         {"train_samples", s.train_samples}, {"val_samples", s.val_samples},
         {"test_samples", s.test_samples}, {"seq_len", s.seq_len},
         {"text_len", s.text_len},         {"audio_dim", s.audio_dim},
         {"visual_dim", s.visual_dim},     {"text_dim", s.text_dim},
         {"key_dim", s.key_dim},           {"noise", s.noise},
         {"key_noise", s.key_noise},       {"distractor_rate", s.distractor_rate},
         {"burst_rate", s.burst_rate},     {"burst_len", s.burst_len},
         {"burst_scale", s.burst_scale},   {"unified_space", s.unified_space},
         {"frac_audio", s.frac_audio},     {"frac_visual", s.frac_visual},
         {"frac_either", s.frac_either},   {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    SyntheticSpec d;
    s.num_classes = j.value("num_classes", d.num_classes);
    s.attribute_values = j.value("attribute_values", d.attribute_values);
    s.train_samples = j.value("train_samples", d.train_samples);
    s.val_samples = j.value("val_samples", d.val_samples);
    s.test_samples = j.value("test_samples", d.test_samples);
    s.seq_len = j.value("seq_len", d.seq_len);
    s.text_len = j.value("text_len", d.text_len);
    s.audio_dim = j.value("audio_dim", d.audio_dim);
    s.visual_dim = j.value("visual_dim", d.visual_dim);
    s.text_dim = j.value("text_dim", d.text_dim);
    s.key_dim = j.value("key_dim", d.key_dim);
    s.noise = j.value("noise", d.noise);
    s.key_noise = j.value("key_noise", d.key_noise);
    s.distractor_rate = j.value("distractor_rate", d.distractor_rate);
    s.burst_rate = j.value("burst_rate", d.burst_rate);
    s.burst_len = j.value("burst_len", d.burst_len);
    s.burst_scale = j.value("burst_scale", d.burst_scale);
    s.unified_space = j.value("unified_space", d.unified_space);
    s.frac_audio = j.value("frac_audio", d.frac_audio);
    s.frac_visual = j.value("frac_visual", d.frac_visual);
    s.frac_either = j.value("frac_either", d.frac_either);
    s.seed = j.value("seed", d.seed);
}

// One QA sample. Absent streams are empty optionals, never zero tensors.
struct ModalityBundle {
    std::string id;
    std::optional<Tensor> audio;   // L x D_a
    std::optional<Tensor> visual;  // L x D_v
    Tensor question;               // L_t x D_t
    std::optional<std::vector<double>> audio_key;
    std::optional<std::vector<double>> visual_key;
    std::size_t label = 0;
    QuestionType qtype = QuestionType::either;
    std::size_t event_class = 0;

    bool has(Modality m) const {
        switch (m) {
            case Modality::audio: return audio.has_value();
            case Modality::visual: return visual.has_value();
            case Modality::text: return true;
        }
        return false;
    }

    const Tensor& features(Modality m) const {
        switch (m) {
            case Modality::audio: return audio.value();
            case Modality::visual: return visual.value();
            case Modality::text: return question;
        }
        throw ContractError("bad modality");
    }

    const std::vector<double>& key(Modality m) const {
        if (m == Modality::audio) return audio_key.value();
        if (m == Modality::visual) return visual_key.value();
        throw ContractError("text has no unified key");
    }

    void remove(Modality m) {
        if (m == Modality::audio) {
            audio.reset();
            audio_key.reset();
        } else if (m == Modality::visual) {
            visual.reset();
            visual_key.reset();
        } else {
            throw ContractError("the question stream is always available");
        }
    }

    // Bit 0 audio, bit 1 visual, bit 2 text.
    std::uint8_t mask() const {
        return static_cast<std::uint8_t>((audio ? 1 : 0) | (visual ? 2 : 0) | 4);
    }

    // The absent stream, if any.
    std::optional<Modality> missing() const {
        if (!audio) return Modality::audio;
        if (!visual) return Modality::visual;
        return std::nullopt;
    }
};

struct Dataset {
    std::string split;
    std::vector<ModalityBundle> samples;

    std::size_t size() const noexcept { return samples.size(); }
};

struct SyntheticData {
    SyntheticSpec spec;
    std::vector<std::string> answers;
    Dataset train, val, test;
};

inline std::vector<std::string> answer_vocabulary(const SyntheticSpec& spec) {
    std::vector<std::string> out;
    for (const char* kind : {"audio", "visual", "shared"}) {
        for (std::size_t v = 0; v < spec.attribute_values; ++v) {
            out.push_back(std::string(kind) + ":" + std::to_string(v));
        }
    }
    return out;
}

namespace detail {

struct Prototypes {
    std::vector<std::vector<double>> audio_attr, audio_shared, visual_attr, visual_shared, question, class_key;
};

inline std::vector<double> randn(std::mt19937_64& rng, std::size_t n, double stddev = 1.0) {
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<double> v(n);
    for (double& x : v) x = nd(rng);
    return v;
}

// Gram-Schmidt over the stream's attribute and shared prototypes, rescaled to
// norm sqrt(dim). Falls back to the raw draws when they cannot all be orthogonal.
inline void orthogonalize(std::vector<std::vector<double>*> vs, std::size_t dim) {
    if (vs.size() > dim) return;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        auto& v = *vs[i];
        for (std::size_t j = 0; j < i; ++j) {
            const auto& u = *vs[j];
            const double c = kernels::dot(v, u) / kernels::dot(u, u);
            for (std::size_t d = 0; d < dim; ++d) v[d] -= c * u[d];
        }
    }
    for (auto* v : vs) {
        const double scale = std::sqrt(static_cast<double>(dim)) / kernels::norm(*v);
        for (double& x : *v) x *= scale;
    }
}

inline Prototypes make_prototypes(const SyntheticSpec& s, std::mt19937_64& rng) {
    Prototypes p;
    for (std::size_t a = 0; a < s.attribute_values; ++a) {
        p.audio_attr.push_back(randn(rng, s.audio_dim));
        p.audio_shared.push_back(randn(rng, s.audio_dim));
        p.visual_attr.push_back(randn(rng, s.visual_dim));
        p.visual_shared.push_back(randn(rng, s.visual_dim));
    }
    if (s.unified_space) {
        // One raw space: shared content uses the same prototypes in both streams.
        p.visual_shared = p.audio_shared;
        std::vector<std::vector<double>*> vs;
        for (auto* group : {&p.audio_attr, &p.visual_attr, &p.audio_shared}) {
            for (auto& v : *group) vs.push_back(&v);
        }
        orthogonalize(vs, s.audio_dim);
        p.visual_shared = p.audio_shared;
    } else {
        for (auto [attr, shared, dim] : {std::tuple{&p.audio_attr, &p.audio_shared, s.audio_dim},
                                         std::tuple{&p.visual_attr, &p.visual_shared, s.visual_dim}}) {
            std::vector<std::vector<double>*> vs;
            for (auto& v : *attr) vs.push_back(&v);
            for (auto& v : *shared) vs.push_back(&v);
            orthogonalize(vs, dim);
        }
    }
    for (std::size_t q = 0; q < 3; ++q) p.question.push_back(randn(rng, s.text_dim));
    for (std::size_t c = 0; c < s.num_classes; ++c) {
        auto k = randn(rng, s.key_dim);
        const double n = kernels::norm(k);
        for (double& v : k) v /= n;
        p.class_key.push_back(std::move(k));
    }
    return p;
}

struct ClassAttributes {
    std::size_t audio, visual, shared;
};

inline ClassAttributes attributes_of(const SyntheticSpec& s, std::size_t c) {
    const std::size_t a = s.attribute_values;
    return {c % a, (c / a) % a, (c / (a * a)) % a};
}

inline Tensor stream(const SyntheticSpec& s, std::mt19937_64& rng, std::size_t cls,
                     const std::vector<std::vector<double>>& attr, const std::vector<std::vector<double>>& shared,
                     bool audio_stream, std::size_t dim) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> other(0, s.num_classes - 2);
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor x({s.seq_len, dim});
    for (std::size_t t = 0; t < s.seq_len; ++t) {
        std::size_t c = cls;
        if (u01(rng) < s.distractor_rate) {
            c = other(rng);
            if (c >= cls) ++c;
        }
        const auto at = attributes_of(s, c);
        const auto& pa = attr[audio_stream ? at.audio : at.visual];
        const auto& ps = shared[at.shared];
        for (std::size_t j = 0; j < dim; ++j) {
            x.at(t, j) = pa[j] + ps[j] + s.noise * nd(rng);
        }
    }
    if (s.burst_len > 0 && u01(rng) < s.burst_rate) {
        std::uniform_int_distribution<std::size_t> start_dist(0, s.seq_len - s.burst_len);
        const std::size_t start = start_dist(rng);
        for (std::size_t t = start; t < start + s.burst_len; ++t) {
            for (std::size_t j = 0; j < dim; ++j) x.at(t, j) += s.burst_scale * nd(rng);
        }
    }
    return x;
}

inline std::vector<double> noisy_key(const SyntheticSpec& s, std::mt19937_64& rng, const std::vector<double>& base) {
    std::normal_distribution<double> nd(0.0, s.key_noise / std::sqrt(static_cast<double>(s.key_dim)));
    std::vector<double> k = base;
    for (double& v : k) v += nd(rng);
    return k;
}

inline Dataset make_split(const SyntheticSpec& s, const Prototypes& p, std::mt19937_64& rng, const std::string& split,
                          std::size_t count) {
    Dataset d;
    d.split = split;
    std::uniform_int_distribution<std::size_t> cls_dist(0, s.num_classes - 1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t i = 0; i < count; ++i) {
        ModalityBundle b;
        b.id = split + "-" + std::to_string(i);
        b.event_class = cls_dist(rng);
        const double r = u01(rng);
        b.qtype = r < s.frac_audio                  ? QuestionType::audio
                  : r < s.frac_audio + s.frac_visual ? QuestionType::visual
                                                     : QuestionType::either;
        const auto at = attributes_of(s, b.event_class);
        const std::size_t a = s.attribute_values;
        b.label = b.qtype == QuestionType::audio    ? at.audio
                  : b.qtype == QuestionType::visual ? a + at.visual
                                                    : 2 * a + at.shared;
        b.audio = stream(s, rng, b.event_class, p.audio_attr, p.audio_shared, true, s.audio_dim);
        b.visual = stream(s, rng, b.event_class, p.visual_attr, p.visual_shared, false, s.visual_dim);
        b.question = Tensor({s.text_len, s.text_dim});
        const auto& qp = p.question[static_cast<std::size_t>(b.qtype)];
        for (std::size_t t = 0; t < s.text_len; ++t) {
            for (std::size_t j = 0; j < s.text_dim; ++j) b.question.at(t, j) = qp[j] + 0.5 * s.noise * nd(rng);
        }
        b.audio_key = noisy_key(s, rng, p.class_key[b.event_class]);
        b.visual_key = noisy_key(s, rng, p.class_key[b.event_class]);
        d.samples.push_back(std::move(b));
    }
    return d;
}

}  // namespace detail

// Deterministic in spec.seed.
inline SyntheticData gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    const auto protos = detail::make_prototypes(spec, rng);
    SyntheticData out;
    out.spec = spec;
    out.answers = answer_vocabulary(spec);
    out.train = detail::make_split(spec, protos, rng, "train", spec.train_samples);
    out.val = detail::make_split(spec, protos, rng, "val", spec.val_samples);
    out.test = detail::make_split(spec, protos, rng, "test", spec.test_samples);
    return out;
}

// Memory-bank source records for one stream: (id, unified key, raw features).
inline std::vector<BankRecord> bank_records(const Dataset& d, Modality m) {
    std::vector<BankRecord> out;
    for (const auto& s : d.samples) {
        if (s.has(m)) out.push_back({s.id, s.key(m), s.features(m)});
    }
    return out;
}

// Removes the policy stream from exactly round(p * N) samples chosen by `seed`.
inline Dataset simulate_missing(const Dataset& d, double rate, MissingPolicy policy, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate <= 1.0)) {
        throw ConfigError("missing rate must lie in [0, 1]");
    }
    if (static_cast<std::uint8_t>(policy) > 2) {
        throw ConfigError("invalid missing-modality policy");
    }
    Dataset out = d;
    const std::size_t n = d.size();
    const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t j = 0; j < count; ++j) {
        auto& s = out.samples[order[j]];
        Modality m = policy == MissingPolicy::audio    ? Modality::audio
                     : policy == MissingPolicy::visual ? Modality::visual
                                                       : (coin(rng) ? Modality::audio : Modality::visual);
        if (!s.has(other_av(m))) {
            throw DataError("sample \"" + s.id + "\" would lose both audio and visual streams");
        }
        s.remove(m);
    }
    return out;
}

// ---- dataset files ---------------------------------------------------------

inline constexpr char kDatasetMagic[] = "R2DS";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline void save_split(const Dataset& d, const SyntheticSpec& s, const std::filesystem::path& path) {
    io::ByteWriter w;
    w.bytes({kDatasetMagic, 4});
    w.u16(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(s.seq_len));
    w.u32(static_cast<std::uint32_t>(s.audio_dim));
    w.u32(static_cast<std::uint32_t>(s.visual_dim));
    w.u32(static_cast<std::uint32_t>(s.text_len));
    w.u32(static_cast<std::uint32_t>(s.text_dim));
    w.u32(static_cast<std::uint32_t>(s.key_dim));
    w.u64(d.size());
    for (const auto& b : d.samples) {
        w.short_string(b.id);
        w.u32(static_cast<std::uint32_t>(b.label));
        w.u8(static_cast<std::uint8_t>(b.qtype));
        w.u32(static_cast<std::uint32_t>(b.event_class));
        w.u8(b.mask());
        if (b.audio) {
            for (double v : b.audio->data()) w.f64(v);
            for (double v : *b.audio_key) w.f64(v);
        }
        if (b.visual) {
            for (double v : b.visual->data()) w.f64(v);
            for (double v : *b.visual_key) w.f64(v);
        }
        for (double v : b.question.data()) w.f64(v);
    }
    w.seal();
    w.write_file(path);
}

inline Dataset load_split(const std::filesystem::path& path, const std::string& split) {
    const auto file = io::read_file(path);
    io::ByteReader r = io::open_container(file, {kDatasetMagic, 4}, kDatasetVersion);
    const std::size_t len = r.u32(), da = r.u32(), dv = r.u32(), lt = r.u32(), dt = r.u32(), de = r.u32();
    const std::uint64_t count = r.u64();
    auto read_tensor = [&](std::size_t rows, std::size_t cols) {
        r.need(rows * cols * 8);
        Tensor t({rows, cols});
        for (double& v : t.storage()) v = r.f64();
        return t;
    };
    auto read_vec = [&](std::size_t n) {
        r.need(n * 8);
        std::vector<double> v(n);
        for (double& x : v) x = r.f64();
        return v;
    };
    Dataset d;
    d.split = split;
    for (std::uint64_t i = 0; i < count; ++i) {
        ModalityBundle b;
        b.id = r.short_string();
        b.label = r.u32();
        const std::uint8_t q = r.u8();
        if (q > 2) throw FormatError("bad question type tag");
        b.qtype = static_cast<QuestionType>(q);
        b.event_class = r.u32();
        const std::uint8_t mask = r.u8();
        if (mask & 1) {
            b.audio = read_tensor(len, da);
            b.audio_key = read_vec(de);
        }
        if (mask & 2) {
            b.visual = read_tensor(len, dv);
            b.visual_key = read_vec(de);
        }
        b.question = read_tensor(lt, dt);
        d.samples.push_back(std::move(b));
    }
    io::verify_crc(file, r);
    return d;
}

// Writes <dir>/{train,val,test}.feat and <dir>/index.json.
inline void save_dataset(const SyntheticData& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json index;
    index["spec"] = data.spec;
    index["answers"] = data.answers;
    for (const Dataset* d : {&data.train, &data.val, &data.test}) {
        const std::string file = d->split + ".feat";
        save_split(*d, data.spec, dir / file);
        nlohmann::json samples = nlohmann::json::array();
        for (const auto& b : d->samples) {
            samples.push_back({{"id", b.id}, {"label", b.label}, {"qtype", to_string(b.qtype)},
                               {"class", b.event_class}, {"mask", b.mask()}});
        }
        index["splits"][d->split] = {{"file", file}, {"count", d->size()}, {"samples", samples}};
    }
    std::ofstream(dir / "index.json") << index.dump(1) << '\n';
}

inline SyntheticData load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "index.json");
    if (!is) {
        throw IoError("missing dataset index " + (dir / "index.json").string());
    }
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& ex) {
        throw DataError("unreadable dataset index: " + std::string(ex.what()));
    }
    SyntheticData data;
    data.spec = index.at("spec").get<SyntheticSpec>();
    data.answers = index.at("answers").get<std::vector<std::string>>();
    data.train = load_split(dir / index["splits"]["train"]["file"].get<std::string>(), "train");
    data.val = load_split(dir / index["splits"]["val"]["file"].get<std::string>(), "val");
    data.test = load_split(dir / index["splits"]["test"]["file"].get<std::string>(), "test");
    return data;
}

}  // namespace ravqa
