#pragma once

// Little-endian byte writer/reader with a zlib CRC32 trailer, shared by the
// memory-bank, checkpoint and dataset containers.

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "ravqa/errors.hpp"

namespace ravqa::io {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in chunks.
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = ::crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put_le(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void u64(std::uint64_t v) { put_le(v); }
    void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }

    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    // u16 length prefix followed by the raw bytes.
    void short_string(std::string_view s) {
        if (s.size() > 0xFFFF) {
            throw ContractError("string too long for u16 length prefix");
        }
        u16(static_cast<std::uint16_t>(s.size()));
        bytes(s);
    }

    const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

    // Appends the CRC32 of everything written so far.
    void seal() { u32(crc32(buf_.data(), buf_.size())); }

    void write_file(const std::filesystem::path& path) const {
        if (path.empty()) {
            throw IoError("empty output path");
        }
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw IoError("cannot open " + path.string() + " for writing");
        }
        os.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!os) {
            throw IoError("write failed for " + path.string());
        }
    }

private:
    template <typename T>
    void put_le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }

    std::vector<std::uint8_t> buf_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    if (path.empty()) {
        throw IoError("empty input path");
    }
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Bounds-checked reader. Running past the end raises TruncatedFileError.
class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    std::uint8_t u8() { return get_le<std::uint8_t>(); }
    std::uint16_t u16() { return get_le<std::uint16_t>(); }
    std::uint32_t u32() { return get_le<std::uint32_t>(); }
    std::uint64_t u64() { return get_le<std::uint64_t>(); }
    float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    std::string short_string() { return bytes(u16()); }

    std::size_t remaining() const noexcept { return size_ - pos_; }
    std::size_t position() const noexcept { return pos_; }

    void need(std::size_t n) const {
        if (n > size_ - pos_) {
            throw TruncatedFileError("unexpected end of data at byte " + std::to_string(pos_) + " (need " +
                                     std::to_string(n) + ", have " + std::to_string(size_ - pos_) + ")");
        }
    }

private:
    template <typename T>
    T get_le() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v = static_cast<T>(v | (static_cast<T>(data_[pos_ + i]) << (8 * i)));
        }
        pos_ += sizeof(T);
        return v;
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

// Validates magic and version, then returns a reader over the payload that
// excludes the 4-byte CRC trailer. The checksum itself is verified by
// verify_crc() once the payload has parsed, so a short file reports truncation
// rather than a checksum mismatch.
inline ByteReader open_container(const std::vector<std::uint8_t>& file, std::string_view magic,
                                 std::uint16_t version) {
    if (file.size() < magic.size()) {
        throw TruncatedFileError("file shorter than its magic");
    }
    if (std::memcmp(file.data(), magic.data(), magic.size()) != 0) {
        throw BadMagicError("bad magic: expected \"" + std::string(magic) + "\"");
    }
    if (file.size() < magic.size() + 2 + 4) {
        throw TruncatedFileError("file too short for header and trailer");
    }
    ByteReader r(file.data(), file.size() - 4);
    r.bytes(magic.size());
    const std::uint16_t v = r.u16();
    if (v != version) {
        throw VersionMismatchError("unsupported version " + std::to_string(v) + " (expected " +
                                   std::to_string(version) + ")");
    }
    return r;
}

inline void verify_crc(const std::vector<std::uint8_t>& file, const ByteReader& payload) {
    if (payload.remaining() != 0) {
        throw FormatError(std::to_string(payload.remaining()) + " unexpected trailing bytes before checksum");
    }
    const std::size_t n = file.size() - 4;
    ByteReader trailer(file.data() + n, 4);
    const std::uint32_t stored = trailer.u32();
    const std::uint32_t actual = crc32(file.data(), n);
    if (stored != actual) {
        throw ChecksumError("CRC32 mismatch: stored " + std::to_string(stored) + ", computed " +
                            std::to_string(actual));
    }
}

}  // namespace ravqa::io
