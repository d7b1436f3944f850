#pragma once

#include <cstdint>
#include <random>

namespace otden {

/// All randomness in the project is an mt19937_64 seeded from a single 64-bit
/// seed; sub-streams are derived with splitmix64 so that any parallel schedule
/// reproduces the same draws.
using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed of the index-th sub-stream: splitmix64(seed ^ index).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(seed ^ index);
}

/// Named sub-stream, e.g. derive_seed(seed, stream::kNoise) ^ patch_index.
namespace stream {
inline constexpr std::uint64_t kScenes = 0x5343454E45ULL;
inline constexpr std::uint64_t kNoise = 0x4E4F495345ULL;
inline constexpr std::uint64_t kInit = 0x494E4954ULL;
inline constexpr std::uint64_t kBatches = 0x4241544348ULL;
inline constexpr std::uint64_t kPatches = 0x5041544348ULL;
inline constexpr std::uint64_t kCritic = 0x435249544943ULL;
inline constexpr std::uint64_t kInstances = 0x494E5354ULL;
}  // namespace stream

}  // namespace otden
