#pragma once

// GCGT binary tensor files.
//
//   offset  size        field
//   0       4           magic "GCGT"
//   4       4           version (u32, currently 1)
//   8       1           precision code (1 = float32, 2 = float64)
//   9       4           rank (u32, at most 8)
//   13      8 * rank    extents (u64 each)
//   ...                 payload, row-major scalars
//
// Every integer and scalar is little-endian regardless of host byte order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "gcg/errors.hpp"
#include "gcg/tensor.hpp"

namespace gcg::io {

inline constexpr std::array<char, 4> kMagic = {'G', 'C', 'G', 'T'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kMaxRank = 8;

using AnyTensor = std::variant<TensorF, TensorD>;

struct TensorFileHeader {
    std::uint32_t version = kVersion;
    Precision precision = Precision::F32;
    Extents extents;

    std::size_t scalar_width() const { return precision == Precision::F32 ? 4 : 8; }
    std::size_t header_bytes() const { return 13 + 8 * extents.size(); }
    std::size_t payload_bytes() const { return element_count(extents) * scalar_width(); }
};

namespace detail {

template <typename U>
void put_le(std::vector<unsigned char>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(value >> (8 * i)));
}

template <typename U>
U get_le(const unsigned char* p) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
    return value;
}

template <typename S>
std::vector<unsigned char> encode(const Tensor<S>& t) {
    using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
    if (t.rank() > kMaxRank) throw UnsupportedError("GCGT rank " + std::to_string(t.rank()) + " exceeds 8");
    std::vector<unsigned char> out;
    out.reserve(13 + 8 * t.rank() + t.size() * sizeof(S));
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    put_le<std::uint32_t>(out, kVersion);
    out.push_back(static_cast<unsigned char>(precision_of<S>()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.extents()) put_le<std::uint64_t>(out, e);
    for (S v : t.data()) put_le<Bits>(out, std::bit_cast<Bits>(v));
    return out;
}

template <typename S>
Tensor<S> decode_payload(const unsigned char* p, const Extents& extents) {
    using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
    std::vector<S> data(element_count(extents));
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<S>(get_le<Bits>(p + i * sizeof(S)));
    return Tensor<S>(extents, std::move(data));
}

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("tensor file not found: " + path.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

} // namespace detail

/// Parses a header from raw bytes; `available` bounds the read.
inline TensorFileHeader parse_header(const unsigned char* bytes, std::size_t available, const std::string& what) {
    if (available < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes)) {
        throw FormatError("not a GCGT tensor file (bad magic): " + what);
    }
    if (available < 13) throw LengthError("truncated GCGT header: " + what);
    TensorFileHeader h;
    h.version = detail::get_le<std::uint32_t>(bytes + 4);
    if (h.version != kVersion) throw FormatError("unsupported GCGT version " + std::to_string(h.version) + ": " + what);
    const unsigned code = bytes[8];
    if (code != 1 && code != 2) throw FormatError("unknown precision code " + std::to_string(code) + ": " + what);
    h.precision = static_cast<Precision>(code);
    const std::uint32_t rank = detail::get_le<std::uint32_t>(bytes + 9);
    if (rank > kMaxRank) throw UnsupportedError("GCGT rank " + std::to_string(rank) + " exceeds 8: " + what);
    if (rank == 0) throw FormatError("GCGT rank must be at least 1: " + what);
    if (available < 13 + 8 * std::size_t{rank}) throw LengthError("truncated GCGT extents: " + what);
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint64_t e = detail::get_le<std::uint64_t>(bytes + 13 + 8 * i);
        if (e == 0) throw FormatError("GCGT extent of zero: " + what);
        h.extents.push_back(static_cast<std::size_t>(e));
    }
    return h;
}

inline std::vector<unsigned char> encode(const AnyTensor& t) {
    return std::visit([](const auto& x) { return detail::encode(x); }, t);
}

inline AnyTensor decode(const std::vector<unsigned char>& bytes, const std::string& what = "<memory>") {
    const TensorFileHeader h = parse_header(bytes.data(), bytes.size(), what);
    const std::size_t need = h.header_bytes() + h.payload_bytes();
    if (bytes.size() < need) {
        throw LengthError("truncated GCGT payload (" + std::to_string(bytes.size()) + " of " + std::to_string(need) +
                          " bytes): " + what);
    }
    if (bytes.size() > need) throw LengthError("trailing bytes after GCGT payload: " + what);
    const unsigned char* payload = bytes.data() + h.header_bytes();
    if (h.precision == Precision::F32) return detail::decode_payload<float>(payload, h.extents);
    return detail::decode_payload<double>(payload, h.extents);
}

inline void write_tensor(const AnyTensor& t, const std::filesystem::path& path) {
    const auto bytes = encode(t);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NotFoundError("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

template <typename S>
void write_tensor(const Tensor<S>& t, const std::filesystem::path& path) {
    write_tensor(AnyTensor(t), path);
}

inline AnyTensor read_tensor(const std::filesystem::path& path) {
    return decode(detail::slurp(path), path.string());
}

/// Reads a tensor and converts it to the requested scalar type.
template <typename S>
Tensor<S> read_tensor_as(const std::filesystem::path& path) {
    return std::visit([](const auto& x) { return x.template cast<S>(); }, read_tensor(path));
}

inline TensorFileHeader read_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("tensor file not found: " + path.string());
    std::vector<unsigned char> head(13 + 8 * kMaxRank);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    return parse_header(head.data(), head.size(), path.string());
}

/// FNV-1a 64-bit digest rendered as 16 hex characters.
inline std::string fnv1a_hex(const std::vector<unsigned char>& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string content_hash(const AnyTensor& t) { return fnv1a_hex(encode(t)); }

inline std::string file_hash(const std::filesystem::path& path) { return fnv1a_hex(detail::slurp(path)); }

} // namespace gcg::io
