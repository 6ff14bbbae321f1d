#pragma once

#include <cstdint>
#include <random>

namespace fedmate {

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Splittable counter-style child seeds: the master seed plus a few stream
// tags fully determine the child, so adding or removing one consumer never
// perturbs another consumer's stream.
inline std::uint64_t child_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0,
                                std::uint64_t c = 0) {
    std::uint64_t s = mix64(master);
    s = mix64(s ^ mix64(a + 0x1000));
    s = mix64(s ^ mix64(b + 0x2000));
    s = mix64(s ^ mix64(c + 0x3000));
    return s;
}

inline std::mt19937_64 make_engine(std::uint64_t seed) { return std::mt19937_64(seed); }

// Stream tags for child_seed; keeps call sites collision-free.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kData = 2;
inline constexpr std::uint64_t kClient = 3;
inline constexpr std::uint64_t kServer = 4;
inline constexpr std::uint64_t kSelect = 5;
inline constexpr std::uint64_t kTest = 6;
inline constexpr std::uint64_t kDisc = 7;
}  // namespace stream

}  // namespace fedmate
