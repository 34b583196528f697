// SPDX-License-Identifier: Apache-2.0
//
// Seeded randomness. Every random draw in the library flows through this
// file so runs are reproducible from two named seeds. mt19937_64 output is
// fully specified by the standard; the distribution helpers are hand-rolled
// because std::uniform_*_distribution is implementation-defined and would
// break cross-platform determinism.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>

namespace modmt {

// FNV-1a, used to fold names (languages, directions) into seed material.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Derives an independent substream seed, e.g. mix_seed(data_seed, epoch).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ULL));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // 53-bit mantissa construction, uniform on [0, 1).
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform in [0, n). Modulo bias is irrelevant at the sizes used here;
    // determinism is the requirement.
    std::size_t below(std::size_t n) {
        return n == 0 ? 0 : static_cast<std::size_t>(next_u64() % n);
    }

    std::size_t range(std::size_t lo, std::size_t hi_inclusive) {
        return lo + below(hi_inclusive - lo + 1);
    }

    template <class V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace modmt
