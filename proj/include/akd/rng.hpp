#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "akd/tensor.hpp"

namespace akd {

// Deterministic random source. One Rng is one stream: identical seed plus
// identical call sequence gives an identical draw sequence, on any platform,
// because every distribution below is implemented by hand on top of the raw
// mt19937_64 output (the std <random> distributions are not portable).
//
// Stream splitting: fork(tag) derives a child stream from the *root seed* of
// this Rng and the tag, never from the engine position. Forking is therefore
// insensitive to how many values the parent has already produced, and two
// distinct tags give unrelated streams. Components take their own forks so
// that adding or removing one consumer never perturbs another's draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64();

    // Uniform on [0, 1) with 53 random bits.
    double uniform();

    // Uniform integer on [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n);

    // Standard normal via Box-Muller; consumes exactly two uniforms per draw.
    double normal();

    Tensor normal_tensor(const std::vector<Index>& shape);

    // Fisher-Yates permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

    // Child stream derived from (root seed, tag); see class comment.
    Rng fork(std::uint64_t tag) const;
    Rng fork(std::string_view name) const;

    // Engine state round-trip for checkpoints.
    std::string state_string() const;
    void restore_state(const std::string& state);

private:
    std::uint64_t seed_ = 0;
    std::mt19937_64 engine_;
};

// splitmix64 finalizer; exposed because the fork rule is part of the
// project's determinism contract and tests pin it down.
std::uint64_t splitmix64(std::uint64_t x);

// FNV-1a over bytes, used to hash stream names into fork tags.
std::uint64_t fnv1a(std::string_view s);

}  // namespace akd
