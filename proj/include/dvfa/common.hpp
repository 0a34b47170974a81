#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dvfa {

#ifdef DVFA_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

// Library error hierarchy. The CLI maps these onto process exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad operand shapes, invalid op arguments, misuse of the graph API.
struct ShapeError : Error {
    using Error::Error;
};

// Malformed/missing input files, bad dataset records, config value errors.
struct DataError : Error {
    using Error::Error;
};

// Checkpoint/model mismatches, non-finite losses, incompatible configs.
struct ModelError : Error {
    using Error::Error;
};

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Stable sub-stream derivation so parallel per-item generation stays
// reproducible regardless of scheduling.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ull + stream * 0xbf58476d1ce4e5b9ull);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

// FNV-1a over a string; used for config hashes in manifests and reports.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace dvfa
