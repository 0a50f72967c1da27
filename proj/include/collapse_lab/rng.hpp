#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "collapse_lab/numerics/matrix.hpp"

namespace collapse_lab {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed derived from an ordered list of integers (e.g. master seed, depth, run seed).
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) noexcept {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (auto p : parts) {
        h = mix_seed(h ^ mix_seed(p));
    }
    return h;
}

Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev = 1.0);

}  // namespace collapse_lab
