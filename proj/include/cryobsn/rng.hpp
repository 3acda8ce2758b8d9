#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace cryobsn {

// Deterministic RNG facade around mt19937_64. All distribution transforms
// live here instead of <random> distributions, whose output sequences are
// implementation-defined; identical seeds must give identical streams on
// every platform and toolchain.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // [0,1) with 53 random bits
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // standard normal via Box-Muller, caching the second deviate
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01(), u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    // uniform integer in [0, n) by rejection
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = eng_();
        while (x >= limit) x = eng_();
        return x % n;
    }

    // Poisson by Knuth's product method; fine for the means used here (<= ~100)
    int64_t poisson(double mean) {
        if (mean < 0.0) throw std::invalid_argument("Rng::poisson: mean must be >= 0");
        if (mean == 0.0) return 0;
        if (mean > 700.0) throw std::invalid_argument("Rng::poisson: mean too large for product method");
        const double limit = std::exp(-mean);
        int64_t k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform01();
        } while (p > limit);
        return k - 1;
    }

    // Fisher-Yates, explicit so shuffles are platform-stable
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace cryobsn
