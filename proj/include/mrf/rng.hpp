#pragma once

#include <cmath>
#include <cstdint>

namespace mrf {

// Counter-based generator: the i-th draw is a pure function of (key, i), so
// streams can be split and replayed without shared state.
class RngStream {
public:
    RngStream() : key_(0), counter_(0) {}
    explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
        : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)), counter_(counter) {}

    std::uint64_t seed_key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_);
    }

    // uniform in [0, 1)
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform in [lo, hi)
    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // unbiased integer in [0, n), n >= 1
    std::uint64_t next_below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    bool next_bool() { return (next_u64() & 1u) != 0; }

    // Box-Muller, no caching so every call consumes exactly two draws.
    double next_gaussian() {
        double u1;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Independent child stream; children with distinct ids never collide in practice.
    RngStream split(std::uint64_t stream_id) const {
        RngStream child;
        child.key_ = mix(key_ ^ mix(stream_id + 0x94d049bb133111ebULL));
        child.counter_ = 0;
        return child;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t key_;
    std::uint64_t counter_;
};

} // namespace mrf
