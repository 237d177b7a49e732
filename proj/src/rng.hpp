#pragma once

#include <cmath>
#include <cstdint>

// Counter-based random streams: every draw is a pure function of
// (seed, stream, counters), so random access needs no mutable state and
// checkpoint/resume only has to remember integer counters.

namespace hp::rng {

enum Stream : uint64_t {
    kParamInit = 1,
    kGateSample = 2,
    kSvPrototype = 3,
    kSvNoise = 4,
    kSvMixing = 5,
    kSpoofBase = 6,
    kSpoofArtifact = 7,
    kShuffle = 8,
    kTrialPairs = 9,
    kVerifyInputs = 10,
    kMonteCarlo = 11,
    kPlanSample = 12,
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix(uint64_t seed, uint64_t stream, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc909ull);
    h = splitmix64(h ^ stream);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

// Uniform on the open interval (0,1): bin centers of a 2^53 grid.
inline double uniform_open(uint64_t seed, uint64_t stream, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
    uint64_t bits = mix(seed, stream, a, b, c) >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

// Standard normal via Box-Muller on two decorrelated sub-draws.
inline double gaussian(uint64_t seed, uint64_t stream, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
    double u1 = uniform_open(seed, stream, a, b, c * 2 + 1);
    double u2 = uniform_open(seed, stream, a, b, c * 2 + 2);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Uniform integer in [0, n).
inline uint64_t uniform_index(uint64_t n, uint64_t seed, uint64_t stream, uint64_t a = 0, uint64_t b = 0,
                              uint64_t c = 0) {
    return mix(seed, stream, a, b, c) % n;
}

}  // namespace hp::rng
