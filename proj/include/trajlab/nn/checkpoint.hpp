#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "trajlab/nn/parameter.hpp"

namespace trajlab::nn {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Named arrays plus string metadata.
///
/// File layout, all integers and doubles little-endian:
///   8 bytes  magic "TRJLCKPT"
///   u32      format version (1)
///   u32      array count, then per array:
///              u32 name length, name bytes, u64 rows, u64 cols,
///              rows*cols IEEE-754 binary64 values
///   u32      metadata count, then per entry:
///              u32 key length, key bytes, u32 value length, value bytes
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::array<char, 8> kMagic{'T', 'R', 'J', 'L', 'C', 'K', 'P', 'T'};

    std::map<std::string, Matrix> arrays;
    std::map<std::string, std::string> meta;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U u = std::bit_cast<U>(v);
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xff);
    os.write(buf, sizeof(U));
}

template <class T>
T get_le(std::istream& is) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    unsigned char buf[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw CheckpointError("checkpoint: truncated file");
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(buf[i]) << (8 * i);
    return std::bit_cast<T>(u);
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
    const auto n = get_le<std::uint32_t>(is);
    if (n > (1u << 20)) throw CheckpointError("checkpoint: implausible string length");
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw CheckpointError("checkpoint: truncated string");
    return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    os.write(Checkpoint::kMagic.data(), Checkpoint::kMagic.size());
    detail::put_le<std::uint32_t>(os, Checkpoint::kVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.arrays.size()));
    for (const auto& [name, m] : ck.arrays) {
        detail::put_string(os, name);
        detail::put_le<std::uint64_t>(os, m.rows());
        detail::put_le<std::uint64_t>(os, m.cols());
        for (double v : m.flat()) detail::put_le<double>(os, v);
    }
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.meta.size()));
    for (const auto& [k, v] : ck.meta) {
        detail::put_string(os, k);
        detail::put_string(os, v);
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != Checkpoint::kMagic) {
        throw CheckpointError("checkpoint: bad magic");
    }
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != Checkpoint::kVersion) {
        throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
    }
    Checkpoint ck;
    const auto count = detail::get_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = detail::get_string(is);
        const auto rows = detail::get_le<std::uint64_t>(is);
        const auto cols = detail::get_le<std::uint64_t>(is);
        if (rows * cols > (std::uint64_t{1} << 28)) throw CheckpointError("checkpoint: implausible array size");
        Matrix m(rows, cols);
        for (double& v : m.flat()) v = detail::get_le<double>(is);
        ck.arrays.emplace(std::move(name), std::move(m));
    }
    const auto meta_count = detail::get_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < meta_count; ++i) {
        std::string k = detail::get_string(is);
        ck.meta.emplace(std::move(k), detail::get_string(is));
    }
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
    write_checkpoint(os, ck);
    if (!os) throw CheckpointError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    return read_checkpoint(is);
}

inline void store_parameters(Checkpoint& ck, const ParameterList& params) {
    for (const Parameter* p : params) ck.arrays[p->name] = p->value;
}

/// Copies arrays into parameters by name; every parameter must be present
/// with the same shape.
inline void restore_parameters(const Checkpoint& ck, const ParameterList& params) {
    for (Parameter* p : params) {
        auto it = ck.arrays.find(p->name);
        if (it == ck.arrays.end()) throw CheckpointError("checkpoint: missing array '" + p->name + "'");
        if (!it->second.same_shape(p->value)) {
            throw CheckpointError("checkpoint: shape mismatch for '" + p->name + "': file " +
                                  it->second.shape_string() + ", model " + p->value.shape_string());
        }
        p->value = it->second;
    }
}

}  // namespace trajlab::nn
