#pragma once

// External memory bank of (unit key, value feature sequence) pairs with exact
// cosine-similarity search by linear scan.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ravqa/binary_io.hpp"
#include "ravqa/errors.hpp"
#include "ravqa/tensor.hpp"

namespace ravqa {

enum class Modality : std::uint8_t { audio = 0, visual = 1, text = 2 };

inline const char* to_string(Modality m) {
    switch (m) {
        case Modality::audio: return "audio";
        case Modality::visual: return "visual";
        case Modality::text: return "text";
    }
    return "?";
}

inline Modality parse_modality(const std::string& s) {
    if (s == "audio") return Modality::audio;
    if (s == "visual") return Modality::visual;
    if (s == "text") return Modality::text;
    throw ConfigError("unknown modality \"" + s + "\"");
}

inline Modality other_av(Modality m) { return m == Modality::audio ? Modality::visual : Modality::audio; }

struct BankEntry {
    std::string id;
    std::vector<float> key;    // unit length, key_dim values
    std::vector<float> value;  // value_len x value_dim, row-major
};

struct BankMetadata {
    std::string source;
    std::uint64_t count = 0;
    std::uint32_t checksum = 0;  // CRC32 over the serialized entry section

    bool operator==(const BankMetadata&) const = default;
};

// Raw input to build_bank.
struct BankRecord {
    std::string id;
    std::vector<double> key;
    Tensor value;  // L x D_f
};

class MemoryBank {
public:
    static inline constexpr char kMagic[] = "R2SB";
    static inline constexpr std::uint16_t kVersion = 1;

    MemoryBank() = default;

    Modality modality() const noexcept { return modality_; }
    std::size_t key_dim() const noexcept { return key_dim_; }
    std::size_t value_len() const noexcept { return value_len_; }
    std::size_t value_dim() const noexcept { return value_dim_; }
    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<BankEntry>& entries() const noexcept { return entries_; }
    const BankEntry& entry(std::size_t i) const { return entries_.at(i); }
    const BankMetadata& metadata() const noexcept { return meta_; }
    void set_source(std::string source) { meta_.source = std::move(source); }

    // Key of entry i widened to double.
    std::span<const double> key(std::size_t i) const { return {keys_.data() + i * key_dim_, key_dim_}; }

    Tensor value(std::size_t i) const {
        const auto& v = entries_.at(i).value;
        return Tensor({value_len_, value_dim_}, std::vector<double>(v.begin(), v.end()));
    }

    std::size_t index_of(const std::string& id) const {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) {
            throw DataError("bank has no entry \"" + id + "\"");
        }
        return it->second;
    }
    bool contains(const std::string& id) const { return by_id_.count(id) != 0; }

    bool operator==(const MemoryBank& o) const {
        if (modality_ != o.modality_ || key_dim_ != o.key_dim_ || value_len_ != o.value_len_ ||
            value_dim_ != o.value_dim_ || !(meta_ == o.meta_) || entries_.size() != o.entries_.size()) {
            return false;
        }
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& a = entries_[i];
            const auto& b = o.entries_[i];
            if (a.id != b.id || a.key.size() != b.key.size() || a.value.size() != b.value.size() ||
                std::memcmp(a.key.data(), b.key.data(), a.key.size() * sizeof(float)) != 0 ||
                std::memcmp(a.value.data(), b.value.data(), a.value.size() * sizeof(float)) != 0) {
                return false;
            }
        }
        return true;
    }

    // Serialized entry section (everything after the fixed header, before the CRC).
    void write_entries(io::ByteWriter& w) const {
        for (const auto& e : entries_) {
            w.short_string(e.id);
            for (float f : e.key) w.f32(f);
            for (float f : e.value) w.f32(f);
        }
    }

    std::uint32_t compute_checksum() const {
        io::ByteWriter w;
        write_entries(w);
        return io::crc32(w.buffer().data(), w.buffer().size());
    }

private:
    friend MemoryBank build_bank(const std::vector<BankRecord>&, Modality, std::string);
    friend MemoryBank load_bank(const std::filesystem::path&);

    void finalize() {
        keys_.clear();
        keys_.reserve(entries_.size() * key_dim_);
        by_id_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            keys_.insert(keys_.end(), entries_[i].key.begin(), entries_[i].key.end());
            if (!by_id_.emplace(entries_[i].id, i).second) {
                throw DuplicateIdError(entries_[i].id);
            }
        }
        meta_.count = entries_.size();
        meta_.checksum = compute_checksum();
    }

    Modality modality_ = Modality::audio;
    std::size_t key_dim_ = 0;
    std::size_t value_len_ = 0;
    std::size_t value_dim_ = 0;
    std::vector<BankEntry> entries_;
    BankMetadata meta_;
    std::vector<double> keys_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

// Normalizes keys to unit length (stored as f32) and preserves input order.
inline MemoryBank build_bank(const std::vector<BankRecord>& records, Modality modality, std::string source = {}) {
    if (records.empty()) {
        throw DataError("cannot build a memory bank from zero records");
    }
    MemoryBank bank;
    bank.modality_ = modality;
    bank.key_dim_ = records.front().key.size();
    bank.value_len_ = records.front().value.rank() == 2 ? records.front().value.rows() : 0;
    bank.value_dim_ = records.front().value.cols();
    if (bank.key_dim_ == 0 || bank.value_len_ == 0 || bank.value_dim_ == 0) {
        throw DataError("bank records need a non-empty key and an L x D value with L > 0");
    }
    std::unordered_set<std::string> seen;
    bank.entries_.reserve(records.size());
    for (const auto& r : records) {
        if (!seen.insert(r.id).second) {
            throw DuplicateIdError(r.id);
        }
        if (r.key.size() != bank.key_dim_ || r.value.rank() != 2 || r.value.rows() != bank.value_len_ ||
            r.value.cols() != bank.value_dim_) {
            throw DataError("inconsistent dims for record \"" + r.id + "\": key " + std::to_string(r.key.size()) +
                            ", value " + r.value.shape_str());
        }
        const double nrm = kernels::norm(r.key);
        if (nrm == 0.0 || !std::isfinite(nrm)) {
            throw ZeroNormKeyError(r.id);
        }
        BankEntry e;
        e.id = r.id;
        e.key.reserve(r.key.size());
        for (double v : r.key) e.key.push_back(static_cast<float>(v / nrm));
        e.value.reserve(r.value.size());
        for (double v : r.value.data()) e.value.push_back(static_cast<float>(v));
        bank.entries_.push_back(std::move(e));
    }
    bank.meta_.source = std::move(source);
    bank.finalize();
    return bank;
}

struct QuerySpec {
    std::vector<double> query;
    std::size_t n = 1;
    std::unordered_set<std::string> exclude;
    double eps = kDefaultCosineEps;
};

struct Candidate {
    std::size_t index = 0;
    std::string id;
    double score = 0.0;

    bool operator==(const Candidate&) const = default;
};

namespace detail {

inline std::vector<Candidate> ranked_query(const MemoryBank& bank, const QuerySpec& spec, bool descending) {
    if (spec.query.size() != bank.key_dim()) {
        throw DimensionError("query dim " + std::to_string(spec.query.size()) + " does not match bank key dim " +
                             std::to_string(bank.key_dim()));
    }
    if (spec.n == 0) {
        throw ContractError("query needs n >= 1");
    }
    std::vector<std::size_t> pool;
    pool.reserve(bank.size());
    for (std::size_t i = 0; i < bank.size(); ++i) {
        if (spec.exclude.empty() || spec.exclude.count(bank.entry(i).id) == 0) {
            pool.push_back(i);
        }
    }
    if (spec.n > pool.size()) {
        throw BudgetError("requested " + std::to_string(spec.n) + " candidates but only " +
                          std::to_string(pool.size()) + " entries remain after exclusion");
    }
    std::vector<double> score(bank.size());
    for (std::size_t i : pool) {
        score[i] = cosine_sim(spec.query, bank.key(i), spec.eps);
    }
    auto before = [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) {
            return descending ? score[a] > score[b] : score[a] < score[b];
        }
        return a < b;
    };
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.n), pool.end(), before);
    std::vector<Candidate> out;
    out.reserve(spec.n);
    for (std::size_t j = 0; j < spec.n; ++j) {
        out.push_back({pool[j], bank.entry(pool[j]).id, score[pool[j]]});
    }
    return out;
}

}  // namespace detail

// The n most similar entries, descending by cosine score; ties keep bank order.
inline std::vector<Candidate> query_topn(const MemoryBank& bank, const QuerySpec& spec) {
    return detail::ranked_query(bank, spec, true);
}

// The n least similar entries, ascending by cosine score (ranking-loss negatives).
inline std::vector<Candidate> query_bottomn(const MemoryBank& bank, const QuerySpec& spec) {
    return detail::ranked_query(bank, spec, false);
}

inline std::filesystem::path manifest_path(const std::filesystem::path& bank_path) {
    auto p = bank_path;
    p += ".manifest.json";
    return p;
}

inline void save_bank(const MemoryBank& bank, const std::filesystem::path& path) {
    io::ByteWriter w;
    w.bytes({MemoryBank::kMagic, 4});
    w.u16(MemoryBank::kVersion);
    w.u8(static_cast<std::uint8_t>(bank.modality()));
    w.u32(static_cast<std::uint32_t>(bank.key_dim()));
    w.u32(static_cast<std::uint32_t>(bank.value_len()));
    w.u32(static_cast<std::uint32_t>(bank.value_dim()));
    w.u64(bank.size());
    bank.write_entries(w);
    w.seal();
    w.write_file(path);

    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    nlohmann::json manifest = {
        {"format", "R2SB"},
        {"version", MemoryBank::kVersion},
        {"source", bank.metadata().source},
        {"built_at", stamp},
        {"modality", to_string(bank.modality())},
        {"count", bank.size()},
        {"key_dim", bank.key_dim()},
        {"value_len", bank.value_len()},
        {"value_dim", bank.value_dim()},
        {"checksum", bank.metadata().checksum},
    };
    std::ofstream(manifest_path(path)) << manifest.dump(2) << '\n';
}

inline MemoryBank load_bank(const std::filesystem::path& path) {
    const auto file = io::read_file(path);
    io::ByteReader r = io::open_container(file, {MemoryBank::kMagic, 4}, MemoryBank::kVersion);
    MemoryBank bank;
    const std::uint8_t mod = r.u8();
    if (mod > 1) {
        throw FormatError("bank modality tag " + std::to_string(mod) + " is not audio or visual");
    }
    bank.modality_ = static_cast<Modality>(mod);
    bank.key_dim_ = r.u32();
    bank.value_len_ = r.u32();
    bank.value_dim_ = r.u32();
    const std::uint64_t count = r.u64();
    const std::size_t per_entry_min = 2 + 4 * (bank.key_dim_ + bank.value_len_ * bank.value_dim_);
    if (per_entry_min > 0 && count > r.remaining() / per_entry_min) {
        throw TruncatedFileError("bank header declares " + std::to_string(count) + " entries but only " +
                                 std::to_string(r.remaining()) + " payload bytes remain");
    }
    bank.entries_.resize(count);
    for (auto& e : bank.entries_) {
        e.id = r.short_string();
        e.key.resize(bank.key_dim_);
        for (float& f : e.key) f = r.f32();
        e.value.resize(bank.value_len_ * bank.value_dim_);
        for (float& f : e.value) f = r.f32();
    }
    io::verify_crc(file, r);
    if (const auto mp = manifest_path(path); std::filesystem::exists(mp)) {
        try {
            std::ifstream is(mp);
            bank.meta_.source = nlohmann::json::parse(is).value("source", "");
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("unreadable bank manifest " + mp.string() + ": " + ex.what());
        }
    }
    bank.finalize();
    return bank;
}

}  // namespace ravqa
