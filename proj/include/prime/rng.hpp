#pragma once

#include "prime/tensor.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace prime {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; mixes tags into a base seed so every consumer
/// (patient, view, epoch, fold...) gets an independent, schedule-free stream.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t s = mix_seed(base);
    for (auto t : tags) s = mix_seed(s ^ mix_seed(t + 0x632be59bd9b4e019ULL));
    return s;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> tags = {}) {
    return Rng(derive_seed(base, tags));
}

Tensor normal_tensor(Rng& rng, std::vector<std::size_t> shape, double stddev);

/// Draws one sample from Dirichlet(concentration) by normalising independent
/// Gamma(c_k, 1) draws. Components with zero concentration get exactly zero.
std::vector<double> sample_dirichlet(Rng& rng, std::span<const double> concentration);

/// Fisher-Yates shuffle of 0..n-1 with the given generator.
std::vector<std::size_t> permutation(Rng& rng, std::size_t n);

} // namespace prime
