#include <gtest/gtest.h>
#include <zlib.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "ravqa/embedding_store.hpp"
#include "support.hpp"

using namespace ravqa;
using ravqa::testing::random_tensor;
using ravqa::testing::random_vector;
using ravqa::testing::temp_dir;

namespace fs = std::filesystem;

namespace {

std::vector<BankRecord> random_records(std::mt19937_64& rng, std::size_t n, std::size_t key_dim = 6,
                                       std::size_t len = 3, std::size_t dim = 2) {
    std::vector<BankRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({"r" + std::to_string(i), random_vector(rng, key_dim), random_tensor(rng, {len, dim})});
    }
    return out;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Hand-assembled little-endian writer, independent of the library's.
struct Bytes {
    std::vector<std::uint8_t> b;
    template <typename T>
    void le(T v) {
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        b.insert(b.end(), raw, raw + sizeof(T));
    }
    void str(const std::string& s) { b.insert(b.end(), s.begin(), s.end()); }
    void seal() { le<std::uint32_t>(static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size())))); }
};

std::vector<BankRecord> golden_records() {
    return {{"a0", {3.0, 4.0}, Tensor::matrix({{1.0, 0.5}})}, {"b1", {0.0, -2.0}, Tensor::matrix({{-1.0, 0.25}})}};
}

}  // namespace

TEST(MemoryBank, BuildNormalizesKeysAndKeepsOrder) {
    MemoryBank bank = build_bank(golden_records(), Modality::audio, "unit");
    ASSERT_EQ(bank.size(), 2u);
    EXPECT_EQ(bank.entry(0).id, "a0");
    EXPECT_FLOAT_EQ(bank.entry(0).key[0], 0.6f);
    EXPECT_FLOAT_EQ(bank.entry(0).key[1], 0.8f);
    EXPECT_EQ(bank.index_of("b1"), 1u);
    EXPECT_EQ(bank.metadata().count, 2u);
    EXPECT_EQ(bank.metadata().source, "unit");
}

TEST(MemoryBank, BuildErrors) {
    EXPECT_THROW(build_bank({}, Modality::audio), DataError);
    auto dup = golden_records();
    dup[1].id = "a0";
    EXPECT_THROW(build_bank(dup, Modality::audio), DuplicateIdError);
    auto zero = golden_records();
    zero[1].key = {0.0, 0.0};
    EXPECT_THROW(build_bank(zero, Modality::audio), ZeroNormKeyError);
    auto ragged = golden_records();
    ragged[1].value = Tensor::matrix({{1.0, 2.0, 3.0}});
    EXPECT_THROW(build_bank(ragged, Modality::audio), DataError);
}

TEST(MemoryBank, QueryExample) {
    std::vector<BankRecord> recs = {{"x", {1, 0}, Tensor::matrix({{1}})},
                                    {"y", {0, 1}, Tensor::matrix({{2}})},
                                    {"z", {1, 1}, Tensor::matrix({{3}})}};
    MemoryBank bank = build_bank(recs, Modality::visual);
    auto top = query_topn(bank, {{1, 0.1}, 2, {}});
    ASSERT_EQ(top.size(), 2u);
    EXPECT_EQ(top[0].id, "x");
    EXPECT_EQ(top[1].id, "z");
    auto excl = query_topn(bank, {{1, 0.1}, 1, {"x"}});
    EXPECT_EQ(excl[0].id, "z");
    auto bottom = query_bottomn(bank, {{1, 0.1}, 1, {}});
    EXPECT_EQ(bottom[0].id, "y");
}

TEST(MemoryBank, QueryMatchesBruteForceOracle) {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        auto recs = random_records(rng, 200);
        MemoryBank bank = build_bank(recs, Modality::audio);
        for (int q = 0; q < 10; ++q) {
            QuerySpec spec{random_vector(rng, 6), 1 + static_cast<std::size_t>(q % 7), {}};
            for (int e = 0; e < 5; ++e) spec.exclude.insert("r" + std::to_string(ravqa::testing::uniform_index(rng, 0, 199)));
            std::vector<std::pair<double, std::size_t>> scored;
            for (std::size_t i = 0; i < bank.size(); ++i) {
                if (spec.exclude.count(bank.entry(i).id)) continue;
                double dot = 0, nq = 0, nk = 0;
                for (std::size_t j = 0; j < 6; ++j) {
                    const double k = bank.entry(i).key[j];
                    dot += spec.query[j] * k;
                    nq += spec.query[j] * spec.query[j];
                    nk += k * k;
                }
                scored.push_back({dot / (std::sqrt(nq) * std::sqrt(nk) + spec.eps), i});
            }
            std::stable_sort(scored.begin(), scored.end(), [](auto& a, auto& b) { return a.first > b.first; });
            auto got = query_topn(bank, spec);
            ASSERT_EQ(got.size(), spec.n);
            for (std::size_t j = 0; j < spec.n; ++j) {
                EXPECT_EQ(got[j].index, scored[j].second);
                EXPECT_NEAR(got[j].score, scored[j].first, 1e-12);
                EXPECT_EQ(spec.exclude.count(got[j].id), 0u);
            }
            for (std::size_t j = 1; j < got.size(); ++j) EXPECT_GE(got[j - 1].score, got[j].score);
        }
    }
}

TEST(MemoryBank, TiesKeepBankOrder) {
    std::vector<BankRecord> recs;
    for (int i = 0; i < 5; ++i) recs.push_back({"t" + std::to_string(i), {1, 1}, Tensor::matrix({{1.0 * i}})});
    MemoryBank bank = build_bank(recs, Modality::audio);
    auto top = query_topn(bank, {{2, 2}, 3, {"t1"}});
    EXPECT_EQ(top[0].id, "t0");
    EXPECT_EQ(top[1].id, "t2");
    EXPECT_EQ(top[2].id, "t3");
}

TEST(MemoryBank, QueryErrors) {
    MemoryBank bank = build_bank(golden_records(), Modality::audio);
    EXPECT_THROW(query_topn(bank, {{1, 2, 3}, 1, {}}), DimensionError);
    EXPECT_THROW(query_topn(bank, {{1, 2}, 0, {}}), ContractError);
    EXPECT_THROW(query_topn(bank, {{1, 2}, 2, {"a0"}}), BudgetError);
    EXPECT_THROW(query_topn(bank, {{1, 2}, 3, {}}), BudgetError);
}

TEST(MemoryBank, SaveLoadRoundTrip) {
    std::mt19937_64 rng(43);
    MemoryBank bank = build_bank(random_records(rng, 50), Modality::visual, "round-trip");
    const fs::path p = temp_dir("bank_rt") / "visual.bank";
    save_bank(bank, p);
    EXPECT_TRUE(fs::exists(manifest_path(p)));
    MemoryBank back = load_bank(p);
    EXPECT_TRUE(back == bank);
    EXPECT_EQ(back.metadata().source, "round-trip");
    QuerySpec spec{random_vector(rng, 6), 4, {"r3"}};
    EXPECT_EQ(query_topn(back, spec), query_topn(bank, spec));
}

TEST(MemoryBank, CorruptedPayloadFailsChecksum) {
    std::mt19937_64 rng(47);
    const fs::path p = temp_dir("bank_crc") / "a.bank";
    save_bank(build_bank(random_records(rng, 5), Modality::audio), p);
    auto bytes = slurp(p);
    bytes[bytes.size() / 2] ^= 0x10;
    spit(p, bytes);
    EXPECT_THROW(load_bank(p), ChecksumError);
}

TEST(MemoryBank, TruncatedFileIsReported) {
    std::mt19937_64 rng(53);
    const fs::path p = temp_dir("bank_trunc") / "a.bank";
    save_bank(build_bank(random_records(rng, 5), Modality::audio), p);
    auto bytes = slurp(p);
    bytes.resize(bytes.size() - 37);
    spit(p, bytes);
    EXPECT_THROW(load_bank(p), TruncatedFileError);
}

TEST(MemoryBank, BadMagicAndVersion) {
    std::mt19937_64 rng(59);
    const fs::path p = temp_dir("bank_hdr") / "a.bank";
    save_bank(build_bank(random_records(rng, 2), Modality::audio), p);
    auto bytes = slurp(p);
    auto magic = bytes;
    magic[0] = 'X';
    spit(p, magic);
    EXPECT_THROW(load_bank(p), BadMagicError);
    auto version = bytes;
    version[4] = 9;
    spit(p, version);
    EXPECT_THROW(load_bank(p), VersionMismatchError);
    EXPECT_THROW(load_bank(p.parent_path() / "missing.bank"), IoError);
}

TEST(MemoryBank, ByteLayoutMatchesHandAssembly) {
    Bytes ref;
    ref.str("R2SB");
    ref.le<std::uint16_t>(1);
    ref.le<std::uint8_t>(0);
    ref.le<std::uint32_t>(2);
    ref.le<std::uint32_t>(1);
    ref.le<std::uint32_t>(2);
    ref.le<std::uint64_t>(2);
    for (const auto& r : golden_records()) {
        ref.le<std::uint16_t>(static_cast<std::uint16_t>(r.id.size()));
        ref.str(r.id);
        const double n = std::sqrt(r.key[0] * r.key[0] + r.key[1] * r.key[1]);
        for (double k : r.key) ref.le<float>(static_cast<float>(k / n));
        for (double v : r.value.data()) ref.le<float>(static_cast<float>(v));
    }
    ref.seal();

    const fs::path p = temp_dir("bank_layout") / "g.bank";
    save_bank(build_bank(golden_records(), Modality::audio), p);
    EXPECT_EQ(slurp(p), ref.b);

    const fs::path golden = fs::path(RAVQA_GOLDEN_DIR) / "bank_v1.bin";
    if (std::getenv("RAVQA_UPDATE_GOLDEN")) spit(golden, ref.b);
    ASSERT_TRUE(fs::exists(golden)) << golden;
    EXPECT_EQ(slurp(golden), ref.b);
    MemoryBank loaded = load_bank(golden);
    EXPECT_EQ(loaded.size(), 2u);
    EXPECT_EQ(loaded.entry(1).id, "b1");
    EXPECT_EQ(loaded.entry(1).key[1], -1.0f);
}

TEST(MemoryBank, BottomNExamples) {
    std::vector<BankRecord> recs = {{"p", {1, 0}, Tensor::matrix({{1}})},
                                    {"q", {-1, 0}, Tensor::matrix({{2}})},
                                    {"s", {0, 1}, Tensor::matrix({{3}})}};
    MemoryBank bank = build_bank(recs, Modality::audio);
    auto worst = query_bottomn(bank, {{1, 0}, 1, {}});
    EXPECT_EQ(worst[0].id, "q");
    EXPECT_NEAR(worst[0].score, -1.0, 1e-7);
    auto all = query_bottomn(bank, {{1, 0}, 3, {}});
    ASSERT_EQ(all.size(), 3u);
    EXPECT_EQ(all[0].id, "q");
    EXPECT_EQ(all[1].id, "s");
    EXPECT_EQ(all[2].id, "p");
    auto best = query_topn(bank, {{1, 0}, 1, {}});
    EXPECT_EQ(best[0].id, "p");
    EXPECT_NEAR(best[0].score, 1.0, 1e-7);
}
