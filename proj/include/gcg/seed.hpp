#pragma once

#include <cstdint>
#include <initializer_list>

namespace gcg {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Folds a sequence of integers into one well-mixed seed.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x6a09e667f3bcc909ULL;
    for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

// Stream tags keep derived seeds of different consumers apart.
enum SeedStream : std::uint64_t {
    kStreamInit = 1,
    kStreamShuffle = 2,
    kStreamPerturb = 3,
    kStreamInter = 4,
    kStreamSynthScenes = 5,
    kStreamSynthSample = 6,
};

} // namespace gcg
