#pragma once

#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace ebwm {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible shapes, bad axes, malformed attributes. Programming errors.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Domain violations on values: log of non-positive, division by zero,
// non-finite inputs where finiteness is required.
class ValueError : public Error {
public:
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

inline std::string strf(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    va_list args2;
    va_copy(args2, args);
    const int n = std::vsnprintf(nullptr, 0, fmt, args);
    va_end(args);
    std::string out(static_cast<size_t>(n), '\0');
    std::vsnprintf(out.data(), out.size() + 1, fmt, args2);
    va_end(args2);
    return out;
}

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// xoshiro256** seeded through splitmix64. Self-contained so that streams are
// bit-reproducible across compilers and standard libraries (std distributions
// are implementation-defined).
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : s_) {
            word = splitmix64(sm);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl_(s_[3], 45);
        return result;
    }

    // [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Box-Muller, spare cached. Deterministic given the seed.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n).
    int64_t below(int64_t n) {
        if (n <= 0) {
            throw ValueError("Rng::below requires n > 0");
        }
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t r = next_u64();
        while (r >= limit) {
            r = next_u64();
        }
        return static_cast<int64_t>(r % un);
    }

    // Derives an independent stream; used to give each training step / worker
    // its own generator without consuming this one's sequence.
    Rng split(uint64_t stream) const {
        uint64_t mix = s_[0] ^ (s_[3] + 0x9e3779b97f4a7c15ull * (stream + 1));
        return Rng(splitmix64(mix));
    }

private:
    static uint64_t rotl_(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    uint64_t s_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ebwm
