#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <vector>

namespace svne {

// splitmix64 step, used only to mix seeds into engine state.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic random source used everywhere the library needs randomness.
//
// Engine: std::mt19937_64, whose output sequence is fixed by the standard and
// therefore bit-portable. Substreams are derived by mixing (seed, stream)
// through splitmix64, so e.g. particle i and the epoch-e shuffle each get an
// independent generator from one experiment seed. The uniform and normal
// transforms are implemented here because std::<random> distributions are
// not bit-portable across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream) {
        std::uint64_t s = seed;
        std::uint64_t a = splitmix64(s);
        s ^= 0xd1b54a32d192ed03ull * (stream + 1);
        std::uint64_t b = splitmix64(s);
        engine_.seed(a ^ (b << 1));
    }

    // Independent generator for a named substream.
    Rng child(std::uint64_t substream) const {
        return Rng(seed_, stream_ * 0x100000001b3ull + substream + 1);
    }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (no caching, so call order is simple).
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Index in [0, n). Plain modulo: bias is negligible for n << 2^64 and the
    // mapping is pinned for reproducibility.
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(engine_() % static_cast<std::uint64_t>(n));
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(items[i - 1], items[j]);
        }
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::mt19937_64 engine_;
};

}  // namespace svne
