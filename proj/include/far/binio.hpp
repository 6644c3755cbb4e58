#pragma once

// Little-endian binary file helpers shared by the FARD and FARC writers.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <string>

#include "far/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "FARD/FARC writers assume a little-endian host");

namespace far::binio {

struct File {
    std::FILE* f;
    explicit File(std::FILE* fp) : f(fp) {}
    ~File() {
        if (f) std::fclose(f);
    }
    File(const File&) = delete;
    File& operator=(const File&) = delete;
};

inline long long tell(std::FILE* f) { return static_cast<long long>(std::ftell(f)); }

inline void write_raw(std::FILE* f, const void* p, std::size_t bytes) {
    if (std::fwrite(p, 1, bytes, f) != bytes) throw FormatError("write failed", tell(f));
}

inline void read_raw(std::FILE* f, void* p, std::size_t bytes) {
    long long at = tell(f);
    if (std::fread(p, 1, bytes, f) != bytes) throw FormatError("unexpected end of file", at);
}

inline void write_u32(std::FILE* f, std::uint32_t v) { write_raw(f, &v, 4); }
inline void write_u8(std::FILE* f, std::uint8_t v) { write_raw(f, &v, 1); }

inline std::uint32_t read_u32(std::FILE* f) {
    std::uint32_t v;
    read_raw(f, &v, 4);
    return v;
}

inline std::uint8_t read_u8(std::FILE* f) {
    std::uint8_t v;
    read_raw(f, &v, 1);
    return v;
}

inline void write_str(std::FILE* f, const std::string& s) {
    write_u32(f, static_cast<std::uint32_t>(s.size()));
    write_raw(f, s.data(), s.size());
}

inline std::string read_str(std::FILE* f) {
    std::uint32_t n = read_u32(f);
    std::string s(n, '\0');
    if (n) read_raw(f, s.data(), n);
    return s;
}

}  // namespace far::binio
