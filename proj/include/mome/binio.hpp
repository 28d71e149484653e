#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mome/common.hpp"

namespace mome {

// Little-endian binary writer/reader. The reader tracks its byte offset so
// parse failures can say where the file went wrong.

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& out) : out_(out) {}

    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { put_le(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void u64(std::uint64_t v) { put_le(v); }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_le(bits);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_le(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

private:
    template <typename T>
    void put_le(T v) {
        unsigned char buf[sizeof(T)];
        for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
        bytes(buf, sizeof(T));
    }

    std::ostream& out_;
};

class ByteReader {
public:
    ByteReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

    std::size_t offset() const { return offset_; }

    void bytes(void* p, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) fail(std::string("truncated while reading ") + what);
        offset_ += n;
    }

    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        bytes(&v, 1, what);
        return v;
    }
    std::uint16_t u16(const char* what) { return get_le<std::uint16_t>(what); }
    std::uint32_t u32(const char* what) { return get_le<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return get_le<std::uint64_t>(what); }
    float f32(const char* what) {
        std::uint32_t bits = get_le<std::uint32_t>(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64(const char* what) {
        std::uint64_t bits = get_le<std::uint64_t>(what);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(const char* what, std::size_t max_len = 1u << 20) {
        std::uint32_t n = u32(what);
        if (n > max_len) fail(std::string("implausible string length for ") + what);
        std::string s(n, '\0');
        if (n) bytes(s.data(), n, what);
        return s;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        std::ostringstream os;
        os << source_ << ": " << msg << " at byte offset " << offset_;
        throw DataError(os.str());
    }

    void expect_eof() {
        char c;
        in_.read(&c, 1);
        if (in_.gcount() == 1) fail("trailing bytes after payload");
    }

private:
    template <typename T>
    T get_le(const char* what) {
        unsigned char buf[sizeof(T)];
        bytes(buf, sizeof(T), what);
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
        return v;
    }

    std::istream& in_;
    std::string source_;
    std::size_t offset_ = 0;
};

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path);
    return out;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open for reading: " + path);
    return in;
}

}  // namespace mome
