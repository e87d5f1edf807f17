#pragma once

#include <cmath>
#include <cstdint>

namespace sled {

// xorshift64* generator. Parameter init is specified in terms of this
// generator so that two independent builds produce bit-identical models
// from the same seed; std::mt19937 + std::normal_distribution would not
// give that guarantee across standard libraries.
//
// Stream: state' = xorshift64(state); output = state' * 2685821657736338717.
// Doubles take the top 53 bits of the output, mapped to [0,1).
// Normals come from the Box-Muller transform on consecutive doubles.
class Rng {
public:
    explicit Rng(std::uint64_t seed)
        : state_(seed != 0 ? seed : 0x9E3779B97F4A7C15ull) {}

    std::uint64_t next_u64() {
        state_ ^= state_ >> 12;
        state_ ^= state_ << 25;
        state_ ^= state_ >> 27;
        return state_ * 2685821657736338717ull;
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Standard normal via Box-Muller; one spare value is cached.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace sled
