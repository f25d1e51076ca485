#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace phlab {

// Insertion-ordered JSON keeps serialized reports byte-stable across runs.
using Json = nlohmann::ordered_json;

inline std::string dump_json(const Json& j) { return j.dump(2); }

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << text;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_json_file(const std::string& path, const Json& j) {
    write_text_file(path, dump_json(j) + "\n");
}

inline Json read_json_file(const std::string& path) {
    return Json::parse(read_text_file(path));
}

// FNV-1a over bytes; good enough to fingerprint configs and reports.
inline uint64_t fnv1a64(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(const std::string& bytes) {
    static const char* digits = "0123456789abcdef";
    uint64_t h = fnv1a64(bytes);
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

inline std::string json_hash(const Json& j) { return hash_hex(j.dump()); }

}  // namespace phlab
