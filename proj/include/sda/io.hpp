#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sda/error.hpp"

// Binary container shared by the dataset (SDAD) and checkpoint (SDAC) formats:
//
//   magic[4] | version u32 LE | header_len u32 LE | header JSON (UTF-8) | payload
//
// The header is serialized with nlohmann::json dump() (keys sorted), so
// identical logical content always produces identical bytes and save->load->
// save round-trips are byte-exact.

namespace sda {

using json = nlohmann::json;

struct Container {
    std::string magic;  // exactly 4 bytes
    uint32_t version = 1;
    json header;
    std::vector<std::byte> payload;
};

inline std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    f.seekg(0, std::ios::end);
    auto sz = static_cast<size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::byte> buf(sz);
    if (sz && !f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(sz)))
        throw IoError("short read from " + path.string());
    return buf;
}

inline void write_file_bytes(const std::filesystem::path& path, const void* data, size_t size) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot create " + path.string());
    if (size) f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!f) throw IoError("short write to " + path.string());
}

namespace detail {

inline void put_u32(std::vector<std::byte>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
}

inline uint32_t get_u32(const std::byte* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline std::vector<std::byte> serialize_container(const Container& c) {
    if (c.magic.size() != 4) throw ValueError("container magic must be 4 bytes");
    std::string hdr = c.header.dump();
    std::vector<std::byte> out;
    out.reserve(12 + hdr.size() + c.payload.size());
    for (char ch : c.magic) out.push_back(static_cast<std::byte>(ch));
    detail::put_u32(out, c.version);
    detail::put_u32(out, static_cast<uint32_t>(hdr.size()));
    for (char ch : hdr) out.push_back(static_cast<std::byte>(ch));
    out.insert(out.end(), c.payload.begin(), c.payload.end());
    return out;
}

inline Container parse_container(const std::vector<std::byte>& buf, const std::string& expect_magic) {
    if (buf.size() < 12) throw IoError("container truncated (no header)");
    Container c;
    c.magic.assign(reinterpret_cast<const char*>(buf.data()), 4);
    if (c.magic != expect_magic)
        throw IoError("bad magic: expected '" + expect_magic + "', found '" + c.magic + "'");
    c.version = detail::get_u32(buf.data() + 4);
    uint32_t hlen = detail::get_u32(buf.data() + 8);
    if (buf.size() < 12 + static_cast<size_t>(hlen)) throw IoError("container truncated (header)");
    std::string hdr(reinterpret_cast<const char*>(buf.data() + 12), hlen);
    try {
        c.header = json::parse(hdr);
    } catch (const json::exception& e) {
        throw IoError(std::string("container header is not valid JSON: ") + e.what());
    }
    c.payload.assign(buf.begin() + 12 + hlen, buf.end());
    return c;
}

inline void save_container(const std::filesystem::path& path, const Container& c) {
    auto bytes = serialize_container(c);
    write_file_bytes(path, bytes.data(), bytes.size());
}

inline Container load_container(const std::filesystem::path& path, const std::string& expect_magic) {
    return parse_container(read_file_bytes(path), expect_magic);
}

// little-endian f32 payload helpers (host is little-endian x86/ARM; asserted in tests)

inline void append_f32(std::vector<std::byte>& out, const float* v, size_t n) {
    static_assert(sizeof(float) == 4);
    size_t off = out.size();
    out.resize(off + n * 4);
    std::memcpy(out.data() + off, v, n * 4);
}

inline void append_u16(std::vector<std::byte>& out, const uint16_t* v, size_t n) {
    size_t off = out.size();
    out.resize(off + n * 2);
    std::memcpy(out.data() + off, v, n * 2);
}

// 64-bit FNV-1a, used for dataset/checkpoint identity in provenance blocks
inline uint64_t fnv1a64(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

inline std::string file_hash_hex(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    write_file_bytes(path, text.data(), text.size());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return {reinterpret_cast<const char*>(bytes.data()), bytes.size()};
}

}  // namespace sda
