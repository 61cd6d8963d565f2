#pragma once

#include <cstdint>
#include <random>

namespace dehaze {

/// splitmix64 finaliser; used to derive independent per-item seeds from one
/// run seed so that work items can be generated in any order.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index, std::uint64_t stream = 0) {
    return mix_seed(mix_seed(base ^ (stream * 0xd1b54a32d192ed03ULL)) + index);
}

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double gaussian(Rng& rng, double sigma) {
    return std::normal_distribution<double>(0.0, sigma)(rng);
}

}  // namespace dehaze
