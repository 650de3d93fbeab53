#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace nsp {

/// splitmix64 step; also used to expand seeds into stream states.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent substream seed from (master, purpose tag) so that
/// adding a consumer never perturbs the draws of another.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    std::uint64_t h = master ^ 0x51'7c'c1'b7'27'22'0a'95ULL;
    for (char c : tag) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    std::uint64_t s = h;
    return splitmix64_next(s);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    std::uint64_t s = master ^ (0x9e3779b97f4a7c15ULL + index * 0xd1342543de82ef95ULL);
    return splitmix64_next(s);
}

namespace detail {

// Doornik-style ziggurat tables for the standard normal (128 blocks).
struct ZigTables {
    static constexpr int kBlocks = 128;
    static constexpr double kR = 3.442619855899;
    static constexpr double kV = 9.91256303526217e-3;
    std::array<double, kBlocks + 1> x{};
    std::array<double, kBlocks> ratio{};

    ZigTables() {
        double f = std::exp(-0.5 * kR * kR);
        x[0] = kV / f;
        x[1] = kR;
        x[kBlocks] = 0.0;
        for (int i = 2; i < kBlocks; ++i) {
            x[i] = std::sqrt(-2.0 * std::log(kV / x[i - 1] + f));
            f = std::exp(-0.5 * x[i] * x[i]);
        }
        for (int i = 0; i < kBlocks; ++i) ratio[i] = x[i + 1] / x[i];
    }
};

inline const ZigTables& zig_tables() {
    static const ZigTables t;
    return t;
}

}  // namespace detail

/// Deterministic xoshiro256++ stream with hand-rolled distributions.
/// std::<distribution> types are implementation-defined, so every draw the
/// artifact makes goes through this class to keep outputs reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t s = seed;
        for (auto& w : state_) w = splitmix64_next(s);
    }

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

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n); n must be > 0.
    std::uint64_t uniform_int(std::uint64_t n) {
        // Rejection to avoid modulo bias.
        const std::uint64_t limit = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via the ziggurat method.
    double normal() {
        const auto& t = detail::zig_tables();
        for (;;) {
            const std::uint64_t bits = next_u64();
            const int i = static_cast<int>(bits & 0x7f);
            const double u = 2.0 * (static_cast<double>(bits >> 11) * 0x1.0p-53) - 1.0;
            if (std::fabs(u) < t.ratio[i]) return u * t.x[i];
            if (i == 0) return normal_tail(u < 0.0);
            const double xv = u * t.x[i];
            const double f0 = std::exp(-0.5 * (t.x[i] * t.x[i] - xv * xv));
            const double f1 = std::exp(-0.5 * (t.x[i + 1] * t.x[i + 1] - xv * xv));
            if (f1 + uniform() * (f0 - f1) < 1.0) return xv;
        }
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    /// Log-normal with the given log-space parameters.
    double lognormal(double mu_log, double sigma_log) {
        return std::exp(mu_log + sigma_log * normal());
    }

    /// Substream derived from this stream's seed path and a purpose tag.
    Rng fork(std::string_view tag) const {
        std::uint64_t h = state_[0] ^ rotl(state_[2], 13);
        return Rng(derive_seed(h, tag));
    }

private:
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    double normal_tail(bool negative) {
        const double r = detail::ZigTables::kR;
        double xv, yv;
        do {
            xv = std::log(uniform_positive()) / r;
            yv = std::log(uniform_positive());
        } while (-2.0 * yv < xv * xv);
        return negative ? xv - r : r - xv;
    }

    double uniform_positive() {
        double v;
        do {
            v = uniform();
        } while (v <= 0.0);
        return v;
    }

    std::array<std::uint64_t, 4> state_{};
};

}  // namespace nsp
