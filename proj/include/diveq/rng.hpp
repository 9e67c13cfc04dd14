// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random source. All draws are derived from raw mt19937_64
// output so streams are reproducible bit-for-bit across platforms and
// standard libraries (std::normal_distribution and friends are not).

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace diveq {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix(seed)) {}

    std::uint64_t next_u64() {
        // xoshiro-free: straight mt19937_64 step.
        return engine_next();
    }

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1); safe as a log argument.
    double uniform_open() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; caches its pair member.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double gumbel() { return -std::log(-std::log(uniform_open())); }

    // Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t integer(std::uint64_t bound) { return next_u64() % bound; }

    // Independent child stream; stable under unrelated draw-order changes.
    Rng fork(std::uint64_t stream) const {
        return Rng(splitmix(state_seed_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1))));
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    explicit Rng() = default;

    // Minimal mt19937_64 core (fixed constants, reference algorithm).
    static constexpr int kN = 312;
    static constexpr int kM = 156;
    static constexpr std::uint64_t kMatrixA = 0xB5026F5AA96619E9ULL;
    static constexpr std::uint64_t kUpperMask = 0xFFFFFFFF80000000ULL;
    static constexpr std::uint64_t kLowerMask = 0x7FFFFFFFULL;

    std::uint64_t state_ = 0;
    std::uint64_t state_seed_ = 0;
    std::uint64_t mt_[kN] = {};
    int mti_ = kN + 1;
    bool has_spare_ = false;
    double spare_ = 0.0;

    void seed_engine(std::uint64_t s) {
        state_seed_ = s;
        mt_[0] = s;
        for (mti_ = 1; mti_ < kN; ++mti_) {
            mt_[mti_] = 6364136223846793005ULL *
                            (mt_[mti_ - 1] ^ (mt_[mti_ - 1] >> 62)) +
                        static_cast<std::uint64_t>(mti_);
        }
    }

    std::uint64_t engine_next() {
        if (mti_ > kN) seed_engine(state_);
        if (mti_ >= kN) {
            for (int i = 0; i < kN - kM; ++i) {
                const std::uint64_t x = (mt_[i] & kUpperMask) | (mt_[i + 1] & kLowerMask);
                mt_[i] = mt_[i + kM] ^ (x >> 1) ^ ((x & 1) ? kMatrixA : 0ULL);
            }
            for (int i = kN - kM; i < kN - 1; ++i) {
                const std::uint64_t x = (mt_[i] & kUpperMask) | (mt_[i + 1] & kLowerMask);
                mt_[i] = mt_[i + (kM - kN)] ^ (x >> 1) ^ ((x & 1) ? kMatrixA : 0ULL);
            }
            const std::uint64_t x = (mt_[kN - 1] & kUpperMask) | (mt_[0] & kLowerMask);
            mt_[kN - 1] = mt_[kM - 1] ^ (x >> 1) ^ ((x & 1) ? kMatrixA : 0ULL);
            mti_ = 0;
        }
        std::uint64_t y = mt_[mti_++];
        y ^= (y >> 29) & 0x5555555555555555ULL;
        y ^= (y << 17) & 0x71D67FFFEDA60000ULL;
        y ^= (y << 37) & 0xFFF7EEE000000000ULL;
        y ^= (y >> 43);
        return y;
    }
};

}  // namespace diveq
