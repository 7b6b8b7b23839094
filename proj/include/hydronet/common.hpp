#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hydronet {

/// Input that failed structural or semantic validation (bad file, bad config,
/// inconsistent network). Maps to CLI exit code 2.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Failure while executing an otherwise well-formed request (I/O error,
/// diverged optimization, corrupted state). Maps to CLI exit code 1.
class RuntimeFailure : public std::runtime_error {
public:
    explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

/// FNV-1a 64-bit over raw bytes. Used for content hashes in manifests and
/// dataset checksums; stable across platforms by construction.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

std::string to_hex(std::uint64_t value);

/// Child seed derived from (seed, label): adding a consumer with a new label
/// never perturbs the streams of existing consumers. splitmix64 finalizer on
/// top of an FNV label hash.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    std::uint64_t x = fnv1a64(label) ^ seed;
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Deterministic RNG. mt19937_64 has a pinned algorithm in the standard and
/// the manual uniform extraction avoids libc-dependent distribution code, so
/// streams are reproducible across compilers given the same seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi]. Modulo bias is negligible at the range
    /// sizes used here; determinism is what matters.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(gen_() % span);
    }

private:
    std::mt19937_64 gen_;
};

/// Shortest formatting of a double that round-trips exactly; used wherever
/// floating-point values enter text formats that must be reproducible.
std::string format_double(double value);

}  // namespace hydronet
