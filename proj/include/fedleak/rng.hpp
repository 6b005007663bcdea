#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace fedleak {

// Deterministic generator used everywhere seeds appear. Draws are produced by
// an explicit splitmix64/xoshiro256** pipeline plus hand-rolled Box-Muller so
// streams are identical across standard libraries and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            w = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        uint64_t* s = state_;
        uint64_t result = rotl(s[1] * 5, 7) * 9;
        uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t below(uint64_t n) {
        // rejection sampling keeps the distribution exact
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // marsaglia-tsang gamma sampler, shape > 0
    double gamma(double shape) {
        if (shape < 1.0) {
            double u = uniform();
            while (u <= 0.0) u = uniform();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    template <typename T>
    void shuffle(T* data, size_t n) {
        if (n < 2) return;
        for (size_t i = n - 1; i > 0; --i) {
            size_t j = static_cast<size_t>(below(i + 1));
            std::swap(data[i], data[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Child-seed derivation: child = fnv1a(master || role). Documented in the
// README so any consumer can reproduce stream assignments.
inline uint64_t derive_seed(uint64_t master, std::string_view role) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint8_t byte) {
        h ^= byte;
        h *= 0x100000001b3ULL;
    };
    for (int i = 0; i < 8; ++i) mix(static_cast<uint8_t>(master >> (8 * i)));
    for (char c : role) mix(static_cast<uint8_t>(c));
    return h;
}

inline uint64_t derive_seed(uint64_t master, std::string_view role, int64_t index) {
    uint64_t h = derive_seed(master, role);
    for (int i = 0; i < 8; ++i) {
        h ^= static_cast<uint8_t>(static_cast<uint64_t>(index) >> (8 * i));
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace fedleak
