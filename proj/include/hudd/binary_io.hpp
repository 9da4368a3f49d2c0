#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "hudd/error.hpp"

namespace hudd::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Append-only little-endian byte sink.
class ByteWriter {
public:
    void raw(std::string_view bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

    template <typename T>
    void put(T v) {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        buf_.insert(buf_.end(), b, b + sizeof(T));
    }

    void u8(std::uint8_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f64(double v) { put(v); }

    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s);
    }

    void f64s(const std::vector<double>& v) {
        u64(v.size());
        for (double x : v) f64(x);
    }

    const std::vector<char>& bytes() const noexcept { return buf_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + path + " for writing");
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw Error("write failed: " + path);
    }

private:
    std::vector<char> buf_;
};

/// Bounds-checked little-endian reader; every failure reports its offset.
class ByteReader {
public:
    explicit ByteReader(std::vector<char> data) : buf_(std::move(data)) {}

    static ByteReader from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw NotFoundError("cannot open " + path);
        std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return ByteReader(std::move(data));
    }

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return buf_.size() - pos_; }
    bool done() const noexcept { return pos_ == buf_.size(); }

    std::string raw(std::size_t n) {
        need(n, "bytes");
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::uint8_t u8(const char* what = "u8") { return get<std::uint8_t>(what); }
    std::uint32_t u32(const char* what = "u32") { return get<std::uint32_t>(what); }
    std::uint64_t u64(const char* what = "u64") { return get<std::uint64_t>(what); }
    double f64(const char* what = "f64") { return get<double>(what); }

    std::string str(const char* what = "string") {
        const auto n = u32(what);
        return raw(n);
    }

    /// Length-prefixed vector of doubles; the count is checked against the
    /// remaining payload before allocating.
    std::vector<double> f64s(const char* what = "f64 array") {
        const auto n = u64(what);
        if (n > remaining() / sizeof(double)) throw FormatError(std::string("truncated ") + what, pos_);
        std::vector<double> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = f64(what);
        return v;
    }

private:
    void need(std::size_t n, const char* what) const {
        if (n > remaining()) throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }

    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace hudd::io
