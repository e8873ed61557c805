#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace maskgrid {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// mt19937_64 wrapper. All distribution draws are pure functions of engine
// output, so serializing the engine state captures the whole RNG state.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(uint64_t seed) : engine_(splitmix64(seed)) {}

    uint64_t next_u64() { return engine_(); }

    // 53-bit uniform in [0, 1)
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        // rejection sampling over the top range to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % n;
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller, no cached spare (keeps the state = engine state only)
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - uniform01();  // (0, 1]
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * M_PI * u2);
    }

    // standard Gumbel(0,1)
    double gumbel() {
        const double u = 1.0 - uniform01();  // (0, 1]
        return -std::log(-std::log(u));
    }

    // Independent child stream. Consumes one draw from this stream.
    Rng child(uint64_t tag) { return Rng(splitmix64(next_u64() ^ splitmix64(tag))); }
    Rng child(std::string_view name) { return child(fnv1a64(name)); }

    // Named sub-stream derived from a seed without consuming state.
    static Rng stream(uint64_t root_seed, std::string_view name) {
        return Rng(splitmix64(root_seed ^ fnv1a64(name)));
    }

    // Exact state round-trip (textual mt19937_64 serialization).
    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace maskgrid
