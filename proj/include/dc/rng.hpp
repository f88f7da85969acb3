#ifndef DC_RNG_HPP
#define DC_RNG_HPP

#include <cmath>
#include <cstdint>

namespace dc {

// xoshiro256** seeded through splitmix64. Pure integer state machine plus
// Box-Muller for gaussians, so equal seeds give equal streams on every
// platform regardless of libc.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed;
        for (int i = 0; i < 4; ++i)
            s_[i] = splitmix64(x);
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1), 53-bit resolution
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    float uniform_f() { return float(next_u64() >> 40) * 0x1.0p-24f; }

    // uniform in [lo,hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0,n)
    uint64_t below(uint64_t n) { return uint64_t(uniform() * double(n)) % n; }

    // standard normal, Box-Muller with a cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 <= 0.0)
            u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // independent child stream; mixing the key through splitmix64 keeps
    // per-sample streams decorrelated from the parent
    Rng child(uint64_t key) const {
        uint64_t x = s_[0] ^ (key * 0x9E3779B97F4A7C15ull);
        Rng r(0);
        for (int i = 0; i < 4; ++i)
            r.s_[i] = splitmix64(x);
        r.has_spare_ = false;
        return r;
    }

    static uint64_t mix(uint64_t seed, uint64_t key) {
        uint64_t x = seed ^ (key * 0x9E3779B97F4A7C15ull);
        return splitmix64(x);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    uint64_t s_[4];
    bool has_spare_;
    double spare_;
};

}  // namespace dc

#endif  // DC_RNG_HPP
