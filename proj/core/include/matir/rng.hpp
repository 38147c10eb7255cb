#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace matir {

/// Deterministic random stream. Wraps the (bit-exact, standardized) mt19937_64
/// engine and derives all distributions from it explicitly, so that every
/// consumer of a seed reproduces the same values on any platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : engine_() % n; }

    /// Standard normal via Box-Muller (one value per call; no cached state,
    /// which keeps the stream position independent of call parity).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Normal truncated to +/- 2 sigma by resampling.
    double trunc_normal(double stddev) {
        double z = normal();
        while (std::fabs(z) > 2.0) z = normal();
        return stddev * z;
    }

    /// Independent child stream; advances this stream by one draw.
    Rng fork() { return Rng(next_u64() ^ 0x9e3779b97f4a7c15ull); }

private:
    std::mt19937_64 engine_;
};

}  // namespace matir
