#pragma once

#include <cmath>
#include <cstdint>

namespace detlab {

// splitmix64 (Steele/Lea/Flood constants), used for seed mixing.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// xorshift64* generator: shifts 12/25/27, multiplier 0x2545F4914F6CDD1D
// (Vigna, "An experimental exploration of Marsaglia's xorshift generators").
// Fixed integer stream for a given seed on every platform.
class Xorshift64Star {
public:
    explicit Xorshift64Star(uint64_t seed) : state_(splitmix64(seed)) {
        if (state_ == 0) state_ = 0x9E3779B97F4A7C15ull;
    }

    uint64_t next() {
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545F4914F6CDD1Dull;
    }

    // [0,1) with 53 random bits
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n)
    int uniform_int(int n) { return n <= 1 ? 0 : static_cast<int>(next() % static_cast<uint64_t>(n)); }

    bool coin(double p = 0.5) { return uniform() < p; }

    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

// Independent stream for item `index` of a run seeded with `seed`.
inline Xorshift64Star substream(uint64_t seed, uint64_t index) {
    return Xorshift64Star(splitmix64(seed) ^ splitmix64(index * 0xA24BAED4963EE407ull + 1));
}

}  // namespace detlab
