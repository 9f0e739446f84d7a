#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>

#include "streamrec/common.hpp"

namespace streamrec {

/// Deterministic random source. mt19937_64 has a bit-exact sequence mandated
/// by the standard, and every derived draw here (bounded ints, uniform01,
/// normal) is computed with explicit arithmetic instead of the
/// implementation-defined std::*_distribution adaptors, so streams are
/// reproducible across platforms and are restorable from a checkpoint.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform integer in [0, n). Rejection sampling, integer-only.
    std::uint64_t bounded(std::uint64_t n) {
        if (n == 0) raise(ErrorCode::Usage, "Rng::bounded requires n > 0");
        const std::uint64_t min = (-n) % n; // 2^64 mod n
        std::uint64_t x = engine_();
        while (x < min) x = engine_();
        return x % n;
    }

    /// Integer-valued coin flip: true with probability ppm / 1e6.
    bool chance_ppm(std::uint32_t ppm) { return bounded(1000000u) < ppm; }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Box-Muller normal draw with the usual cached second value.
    double normal(double mean, double stddev) {
        if (has_cached_) {
            has_cached_ = false;
            return mean + cached_ * stddev;
        }
        double u = 1.0 - uniform01(); // (0, 1]
        double r = std::sqrt(-2.0 * std::log(u));
        double theta = 6.283185307179586476925286766559 * uniform01();
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return mean + r * std::cos(theta) * stddev;
    }

    void save(std::ostream& os) const {
        os << engine_ << '\n' << (has_cached_ ? 1 : 0) << '\n';
        os.precision(17);
        os << cached_ << '\n';
    }

    void load(std::istream& is) {
        int flag = 0;
        is >> engine_ >> flag >> cached_;
        has_cached_ = (flag != 0);
        if (!is) raise(ErrorCode::Parse, "malformed rng state");
    }

private:
    std::mt19937_64 engine_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

} // namespace streamrec
