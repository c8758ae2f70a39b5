// Flat binary tensor files: 6-byte magic, little-endian u32 header length,
// JSON header listing names and shapes, then float32 little-endian payloads
// in header order. Shared by backbone weights ("LASTW\0"), side weights
// ("LASTS\0") and raw image tensors.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "last/tensor.hpp"

namespace last {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr char kMagicBackbone[6] = {'L', 'A', 'S', 'T', 'W', '\0'};
inline constexpr char kMagicSide[6] = {'L', 'A', 'S', 'T', 'S', '\0'};
inline constexpr char kMagicCache[6] = {'L', 'A', 'S', 'T', 'C', '\0'};

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

inline std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

namespace detail {

inline void append_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t read_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void append_f32le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    append_u32le(out, bits);
}

inline float read_f32le(const unsigned char* p) {
    std::uint32_t bits = read_u32le(p);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

inline std::string serialize_tensors(const char magic[6],
                                     const std::vector<NamedTensor>& tensors) {
    nlohmann::json header = nlohmann::json::array();
    for (const auto& t : tensors) header.push_back({{"name", t.name}, {"shape", t.shape}});
    std::string header_str = nlohmann::json{{"tensors", header}}.dump();

    std::string out;
    out.append(magic, 6);
    detail::append_u32le(out, static_cast<std::uint32_t>(header_str.size()));
    out += header_str;
    for (const auto& t : tensors)
        for (double v : t.data) detail::append_f32le(out, static_cast<float>(v));
    return out;
}

// temp file + rename so readers never see partial content
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_tensor_file(const std::filesystem::path& path, const char magic[6],
                              const std::vector<NamedTensor>& tensors) {
    atomic_write(path, serialize_tensors(magic, tensors));
}

inline std::vector<NamedTensor> parse_tensors(const std::string& bytes, const char magic[6]) {
    if (bytes.size() < 10 || std::memcmp(bytes.data(), magic, 6) != 0)
        throw IoError("bad magic in tensor blob");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::uint32_t hlen = detail::read_u32le(p + 6);
    if (bytes.size() < 10 + hlen) throw IoError("truncated tensor header");
    nlohmann::json header = nlohmann::json::parse(bytes.substr(10, hlen));
    std::vector<NamedTensor> out;
    std::size_t off = 10 + hlen;
    for (const auto& entry : header.at("tensors")) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<Shape>();
        std::size_t n = numel(t.shape);
        if (bytes.size() < off + 4 * n) throw IoError("truncated tensor payload for " + t.name);
        t.data.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            t.data[i] = static_cast<double>(detail::read_f32le(p + off + 4 * i));
        off += 4 * n;
        out.push_back(std::move(t));
    }
    return out;
}

inline std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path,
                                                 const char magic[6]) {
    return parse_tensors(read_file(path), magic);
}

}  // namespace last
