#pragma once

#include <cstdint>
#include <cstdio>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lcg {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps UsageError/DataError to exit 2 and
// NumericError to exit 3; everything else is a plain failure.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error(msg) {}
};

struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

template <typename... Args>
std::string format_msg(const char* fmt, Args... args) {
    char buf[1024];
    std::snprintf(buf, sizeof(buf), fmt, args...);
    return std::string(buf);
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---------------------------------------------------------------------------
// RNG helpers. All stochastic code in the library draws from an explicitly
// seeded mt19937_64 so that (config, seed) fully determine every run.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

// Derive an independent stream from a base seed and a purpose tag.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

// Normal draw truncated at +/- 2 sigma (redraw on excursion).
inline double truncated_normal(Rng& rng, double mean, double stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    double z = dist(rng);
    while (z < -2.0 || z > 2.0) {
        z = dist(rng);
    }
    return mean + stddev * z;
}

// ---------------------------------------------------------------------------
// Content hashing (FNV-1a, 64-bit) for manifests and config identity.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace lcg
