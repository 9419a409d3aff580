#pragma once

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace icufeat {

// Deterministic, platform-independent generator (splitmix64). Used everywhere
// a seed appears in a contract so results do not depend on the standard
// library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo,hi]
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // uniform integer in [0,n); n = 0 returns 0
    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    // independent stream derived from this one's state and a stream id
    Rng fork(uint64_t stream) const {
        Rng r(state_ ^ (0x6a09e667f3bcc909ull + stream * 0x9e3779b97f4a7c15ull));
        r.next_u64();
        return r;
    }

private:
    uint64_t state_;
};

template <typename T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[static_cast<size_t>(rng.next_below(i))]);
    }
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace icufeat
