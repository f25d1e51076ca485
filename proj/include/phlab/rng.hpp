#pragma once

#include <cstdint>
#include <cmath>

namespace phlab {

// SplitMix64: tiny, fast, and splittable. Used everywhere instead of the
// std distributions so that runs are reproducible bit-for-bit on every
// platform we build on.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1) with 53 bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform01(); }

    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

    bool coin() { return (next_u64() & 1ull) != 0; }

    // Independent stream derived from this one plus a tag; the parent state
    // is untouched, so parallel consumers stay deterministic.
    Rng split(uint64_t tag) const {
        Rng r(state ^ (0x9e3779b97f4a7c15ull * (tag + 0x632be59bd9b4e019ull)));
        r.next_u64();
        r.next_u64();
        return r;
    }
};

}  // namespace phlab
