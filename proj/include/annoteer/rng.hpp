#pragma once

// Seeded random streams. Every stochastic step derives its own stream from a
// key (seed, stream tag, index...) so results do not depend on call order or
// on how work is split across threads. Only the engine and seed_seq are taken
// from <random>; the draw helpers below are written out because the standard
// distributions are implementation-defined.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace annoteer {

class Rng {
public:
    explicit Rng(std::initializer_list<std::uint64_t> key) : Rng(std::span<const std::uint64_t>(key.begin(), key.size())) {}

    explicit Rng(std::span<const std::uint64_t> key) {
        std::vector<std::uint32_t> words;
        words.reserve(key.size() * 2);
        for (auto k : key) {
            words.push_back(static_cast<std::uint32_t>(k));
            words.push_back(static_cast<std::uint32_t>(k >> 32));
        }
        std::seed_seq seq(words.begin(), words.end());
        engine_.seed(seq);
    }

    std::uint64_t next() { return engine_(); }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool coin() { return (engine_() >> 63) != 0; }

    // Choose k distinct indices from [0, n) uniformly (partial Fisher-Yates).
    std::vector<std::size_t> choose(std::size_t n, std::size_t k) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        if (k > n) k = n;
        for (std::size_t i = 0; i < k; ++i) {
            const auto j = i + static_cast<std::size_t>(below(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        return idx;
    }

private:
    std::mt19937_64 engine_;
};

// FNV-1a; a stable tag for naming streams.
constexpr std::uint64_t stream_tag(std::string_view name) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace annoteer
