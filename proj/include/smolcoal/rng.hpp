#ifndef SMOLCOAL_RNG_HPP
#define SMOLCOAL_RNG_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>

namespace smolcoal {

// Deterministic, splittable RNG streams. Every replicate gets its own stream
// derived from (seed, stream_id), so results do not depend on scheduling
// order and runs are reproducible byte-for-byte on a given platform.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class RngStream {
  public:
    RngStream() : RngStream(0, 0) {}

    RngStream(std::uint64_t seed, std::uint64_t stream_id) {
        std::uint64_t sm = seed ^ (0x1f123bb5159a55e5ULL * (stream_id + 1));
        for (auto& word : state_) word = splitmix64(sm);
        // xoshiro dislikes the all-zero state
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
    }

    // xoshiro256++
    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform on (0,1]: never returns 0, safe for log()
    double uniform() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    // uniform on [0,1)
    double uniform_co() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform_co(); }

    // index in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        // multiply-shift; bias is < 2^-64 per draw, irrelevant at our sizes
        return static_cast<std::uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    double exponential(double mean = 1.0) { return -mean * std::log(uniform()); }

    double normal() {
        // polar Box-Muller, one value per call (cache the spare)
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform_co() - 1.0;
            v = 2.0 * uniform_co() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    std::int64_t poisson(double mean) {
        if (!(mean >= 0.0) || !std::isfinite(mean))
            throw std::domain_error("poisson: mean must be finite and >= 0");
        if (mean == 0.0) return 0;
        if (mean < 30.0) return poisson_knuth(mean);
        return poisson_ptrs(mean);
    }

    // Gamma(shape, 1); shape >= 1 required (we only need integer shapes)
    double gamma(double shape) {
        if (shape < 1.0) throw std::domain_error("gamma: shape >= 1 required");
        if (shape < 4.0) {
            // small integer shapes: sum of exponentials is cheapest
            double s = 0.0;
            std::int64_t k = static_cast<std::int64_t>(shape);
            for (std::int64_t i = 0; i < k; ++i) s += exponential();
            double frac = shape - static_cast<double>(k);
            if (frac > 0.0) s += gamma_mt(frac + 1.0) * std::pow(uniform(), 1.0 / frac);
            return s;
        }
        return gamma_mt(shape);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::int64_t poisson_knuth(double mean) {
        const double limit = std::exp(-mean);
        double prod = uniform();
        std::int64_t n = 0;
        while (prod > limit) {
            prod *= uniform();
            ++n;
        }
        return n;
    }

    // Hormann's PTRS transformed-rejection sampler, valid for mean >= 10
    std::int64_t poisson_ptrs(double mean) {
        const double slam = std::sqrt(mean);
        const double loglam = std::log(mean);
        const double b = 0.931 + 2.53 * slam;
        const double a = -0.059 + 0.02483 * b;
        const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        const double vr = 0.9277 - 3.6224 / (b - 2.0);
        for (;;) {
            const double u = uniform_co() - 0.5;
            const double v = uniform();
            const double us = 0.5 - std::fabs(u);
            const double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
            if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(k);
            if (k < 0.0 || (us < 0.013 && v > us)) continue;
            if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
                k * loglam - mean - std::lgamma(k + 1.0))
                return static_cast<std::int64_t>(k);
        }
    }

    // Marsaglia-Tsang, shape >= 1
    double gamma_mt(double shape) {
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace smolcoal

#endif
