#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace cldis {

// splitmix64 finalizer; used to derive independent seeds from (master, stream, step)
// so that training is a pure function of the config seed and the step counter.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream, uint64_t step = 0) {
    return mix64(mix64(master ^ 0x6a09e667f3bcc909ull) + mix64(stream) + step * 0x9e3779b97f4a7c15ull);
}

// Seed streams, one per consumer of randomness.
namespace seed_stream {
constexpr uint64_t kInit = 1;        // parameter initialization
constexpr uint64_t kShuffle = 2;     // data order
constexpr uint64_t kDiffNoise = 3;   // diffusion eps and timestep draws
constexpr uint64_t kVaeNoise = 4;    // reparameterization eps
constexpr uint64_t kSampler = 5;     // x_T draws
constexpr uint64_t kNav = 6;         // navigation (k, delta) draws
constexpr uint64_t kEval = 7;        // metric protocols
}  // namespace seed_stream

// Deterministic RNG: mt19937_64 plus hand-rolled Box-Muller / canonical floats,
// identical across platforms (std::normal_distribution is not).
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return double(eng_() >> 11) * 0x1.0p-53;
    }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return eng_() % n; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(T* dst, size_t n, double stddev = 1.0, double mean = 0.0) {
        for (size_t i = 0; i < n; ++i) dst[i] = T(mean + stddev * normal());
    }

    template <typename T>
    void fill_uniform(T* dst, size_t n, double lo, double hi) {
        for (size_t i = 0; i < n; ++i) dst[i] = T(uniform(lo, hi));
    }

    // Fisher-Yates; std::shuffle is implementation-defined, this is not.
    template <typename V>
    void shuffle(V& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace cldis
