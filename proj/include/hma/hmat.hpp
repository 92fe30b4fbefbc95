#pragma once

// HMAT binary tensor files: "HMAT", u32 version (1), u32 dtype code,
// u32 rank, rank x u64 extents, then the row-major payload. Every integer
// and every payload element is little-endian regardless of host.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hma/error.hpp"
#include "hma/tensor.hpp"

namespace hma::hmat {

inline constexpr std::array<char, 4> kMagic{'H', 'M', 'A', 'T'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

template <class T>
using bits_t = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

    template <class U>
    U read(const char* what) {
        if (pos_ + sizeof(U) > buf_.size())
            throw FormatError(std::string("truncated while reading ") + what, pos_);
        U v = get_le<U>(buf_.data() + pos_);
        pos_ += sizeof(U);
        return v;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }
    const std::uint8_t* cursor() const { return buf_.data() + pos_; }
    void skip(std::size_t n) { pos_ += n; }

private:
    const std::vector<std::uint8_t>& buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
    std::vector<std::uint8_t> out;
    out.reserve(16 + 8 * t.rank() + t.size() * sizeof(T));
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    detail::put_le<std::uint32_t>(out, kVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(Tensor<T>::dtype));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.dims()) detail::put_le<std::uint64_t>(out, d);
    for (T v : t.data()) detail::put_le(out, std::bit_cast<detail::bits_t<T>>(v));
    return out;
}

/// Decodes a buffer into a Tensor<T>. Any inconsistency throws FormatError
/// carrying the byte offset; no partially decoded tensor escapes.
template <class T>
Tensor<T> decode(const std::vector<std::uint8_t>& buf) {
    detail::Reader r(buf);
    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic.data(), 4) != 0) throw FormatError("bad magic", 0);
    r.skip(4);
    const auto version = r.read<std::uint32_t>("version");
    if (version != kVersion) throw FormatError("unsupported version " + std::to_string(version), 4);
    const auto code = r.read<std::uint32_t>("dtype");
    if (code != static_cast<std::uint32_t>(Tensor<T>::dtype))
        throw FormatError(std::string("dtype code ") + std::to_string(code) + " but expected " +
                              dtype_name(Tensor<T>::dtype),
                          8);
    const auto rank = r.read<std::uint32_t>("rank");
    if (rank == 0 || rank > 4) throw FormatError("rank " + std::to_string(rank) + " out of range", 12);
    Shape dims(rank);
    for (auto& d : dims) {
        const std::size_t at = r.pos();
        d = static_cast<std::size_t>(r.read<std::uint64_t>("extent"));
        if (d == 0) throw FormatError("zero extent", at);
    }
    const std::size_t n = shape_numel(dims);
    if (r.remaining() != n * sizeof(T)) {
        if (r.remaining() < n * sizeof(T)) throw FormatError("truncated payload", buf.size());
        throw FormatError("trailing bytes after payload", r.pos() + n * sizeof(T));
    }
    std::vector<T> data(n);
    for (std::size_t i = 0; i < n; ++i)
        data[i] = std::bit_cast<T>(detail::get_le<detail::bits_t<T>>(r.cursor() + i * sizeof(T)));
    return Tensor<T>(std::move(dims), std::move(data));
}

/// Reads only the dtype code of an encoded buffer.
inline DType peek_dtype(const std::vector<std::uint8_t>& buf) {
    detail::Reader r(buf);
    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic.data(), 4) != 0) throw FormatError("bad magic", 0);
    r.skip(8);
    const auto code = r.read<std::uint32_t>("dtype");
    if (code > 2) throw FormatError("unknown dtype code " + std::to_string(code), 8);
    return static_cast<DType>(code);
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string(), 0);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw UsageError("write failed for " + path.string());
}

template <class T>
void save(const std::filesystem::path& path, const Tensor<T>& t) {
    write_bytes(path, encode(t));
}

template <class T>
Tensor<T> load(const std::filesystem::path& path) {
    return decode<T>(read_bytes(path));
}

}  // namespace hma::hmat
