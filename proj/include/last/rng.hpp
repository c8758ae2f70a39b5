// Seeded random source with a portable bit-exact stream: all draws go through
// explicit arithmetic on mt19937_64 output words, so identical seeds give
// identical values on any platform.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace last {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    // [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; u1 in (0, 1]
        double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Normal truncated to +/- 2 standard deviations.
    double truncated_normal(double stddev) {
        double x;
        do {
            x = normal();
        } while (std::abs(x) > 2.0);
        return x * stddev;
    }

    // [0, n)
    std::uint64_t integer(std::uint64_t n) {
        // rejection sampling keeps the draw unbiased
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return v % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(integer(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace last
