#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast {

// Little-endian binary writer. Writes to "<path>.tmp" and renames on commit,
// so a crashed run never leaves a partial file under the final name.
class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path)
        : path_(path), tmp_(path + ".tmp"), out_(tmp_, std::ios::binary) {
        if (!out_) fail(ErrorCode::io, "cannot open " + tmp_ + " for writing");
    }
    ~BinaryWriter() {
        if (!committed_) {
            out_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_, ec);
        }
    }

    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void magic(const char* m) { bytes(m, std::strlen(m)); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { le(v); }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void i64(std::int64_t v) { le(static_cast<std::uint64_t>(v)); }
    void f32(float v) {
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        le(u);
    }
    void f64(double v) {
        std::uint64_t u;
        std::memcpy(&u, &v, 8);
        le(u);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void commit() {
        out_.flush();
        if (!out_) fail(ErrorCode::io, "write failed for " + tmp_);
        out_.close();
        std::filesystem::rename(tmp_, path_);
        committed_ = true;
    }

private:
    template <typename T>
    void le(T v) {
        unsigned char buf[sizeof(T)];
        for (std::size_t i = 0; i < sizeof(T); ++i)
            buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        bytes(buf, sizeof(T));
    }

    std::string path_, tmp_;
    std::ofstream out_;
    bool committed_ = false;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) fail(ErrorCode::io, "cannot open " + path + " for reading");
    }

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            fail(ErrorCode::truncated_file, "TruncatedFile: " + path_);
    }
    void expect_magic(const char* m) {
        const std::size_t n = std::strlen(m);
        std::vector<char> buf(n);
        bytes(buf.data(), n);
        if (std::memcmp(buf.data(), m, n) != 0)
            fail(ErrorCode::io, path_ + ": bad magic, expected \"" + m + "\"");
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint16_t u16() { return le<std::uint16_t>(); }
    std::uint32_t u32() { return le<std::uint32_t>(); }
    std::uint64_t u64() { return le<std::uint64_t>(); }
    std::int64_t i64() { return static_cast<std::int64_t>(le<std::uint64_t>()); }
    float f32() {
        std::uint32_t u = le<std::uint32_t>();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    double f64() {
        std::uint64_t u = le<std::uint64_t>();
        double v;
        std::memcpy(&v, &u, 8);
        return v;
    }
    std::string str() {
        std::uint32_t n = u32();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    bool at_eof() {
        in_.peek();
        return in_.eof();
    }
    const std::string& path() const { return path_; }

private:
    template <typename T>
    T le() {
        unsigned char buf[sizeof(T)];
        bytes(buf, sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<T>(buf[i]) << (8 * i));
        return v;
    }

    std::string path_;
    std::ifstream in_;
};

} // namespace nowcast
