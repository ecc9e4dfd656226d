#pragma once

#include <cmath>
#include <cstdint>

namespace bsdef {

// Counter-based random numbers: every draw is a pure function of a 64-bit
// seed plus up to four stream/index coordinates. Batches generated in
// parallel therefore match the single-threaded order bit for bit.
namespace rng {

// Stream tags used throughout the project so that independent noise
// sources never share a counter.
enum Stream : std::uint64_t {
    kPriorSample = 1,
    kAuxIncrement = 2,   // dW driving the auxiliary process X
    kStateIncrement = 3, // dB driving the latent state S
    kObsNoise = 4,       // V_k
    kInit = 5,           // network initialization
    kResample = 6,
    kEval = 7,
};

inline std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                         std::uint64_t c = 0, std::uint64_t d = 0) {
    std::uint64_t h = splitmix(seed);
    h = splitmix(h ^ (a * 0xd6e8feb86659fd93ULL));
    h = splitmix(h ^ (b * 0xa5a5b9d4f0a5c8e1ULL));
    h = splitmix(h ^ (c * 0xc2b2ae3d27d4eb4fULL));
    h = splitmix(h ^ (d * 0x165667b19e3779f9ULL));
    return h;
}

// Uniform in (0,1).
inline double uniform(std::uint64_t k) {
    return (static_cast<double>(k >> 11) + 0.5) * 0x1.0p-53;
}

inline double uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                      std::uint64_t c = 0, std::uint64_t d = 0) {
    return uniform(key(seed, a, b, c, d));
}

// Standard normal via Box-Muller on two derived words.
inline double normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                     std::uint64_t c = 0, std::uint64_t d = 0) {
    const std::uint64_t k0 = key(seed, a, b, c, d);
    const double u1 = uniform(k0);
    const double u2 = uniform(splitmix(k0 ^ 0x9e3779b97f4a7c15ULL));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

}  // namespace rng
}  // namespace bsdef
