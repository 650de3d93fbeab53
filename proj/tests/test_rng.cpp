#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "nsp/rng.hpp"

using namespace nsp;

TEST_CASE("streams are deterministic and independent", "[rng]") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(42), d(43);
    int same = 0;
    for (int i = 0; i < 100; ++i)
        if (c.next_u64() == d.next_u64()) ++same;
    REQUIRE(same == 0);
}

TEST_CASE("derive_seed separates purposes", "[rng]") {
    REQUIRE(derive_seed(7, "storms") != derive_seed(7, "gauges"));
    REQUIRE(derive_seed(7, "storms") == derive_seed(7, "storms"));
    REQUIRE(derive_seed(7, std::uint64_t{0}) != derive_seed(7, std::uint64_t{1}));
}

TEST_CASE("uniform stays in range with sane mean", "[rng]") {
    Rng rng(1);
    double acc = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        acc += u;
    }
    REQUIRE(std::fabs(acc / n - 0.5) < 4.0 / std::sqrt(12.0 * n));
}

TEST_CASE("ziggurat normal matches N(0,1) moments and tails", "[rng]") {
    Rng rng(7);
    const int n = 4000000;
    double m1 = 0, m2 = 0, m3 = 0, m4 = 0;
    int beyond2 = 0, beyond3 = 0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        m1 += x;
        m2 += x * x;
        m3 += x * x * x;
        m4 += x * x * x * x;
        if (std::fabs(x) > 2.0) ++beyond2;
        if (std::fabs(x) > 3.0) ++beyond3;
    }
    m1 /= n;
    m2 /= n;
    m3 /= n;
    m4 /= n;
    const double se = 1.0 / std::sqrt(static_cast<double>(n));
    REQUIRE(std::fabs(m1) < 5 * se);
    REQUIRE(std::fabs(m2 - 1.0) < 5 * se * std::sqrt(2.0));
    REQUIRE(std::fabs(m3) < 5 * se * std::sqrt(15.0));
    REQUIRE(std::fabs(m4 - 3.0) < 5 * se * std::sqrt(96.0));
    // Tail mass: P(|X|>2) = 0.04550, P(|X|>3) = 0.00270.
    REQUIRE(std::fabs(beyond2 / double(n) - 0.045500) < 6e-4);
    REQUIRE(std::fabs(beyond3 / double(n) - 0.002700) < 2e-4);
}

TEST_CASE("uniform_int is unbiased over small ranges", "[rng]") {
    Rng rng(3);
    std::vector<int> counts(7, 0);
    const int n = 700000;
    for (int i = 0; i < n; ++i) ++counts[rng.uniform_int(7)];
    for (int c : counts) REQUIRE(std::fabs(c - n / 7.0) < 5.0 * std::sqrt(n / 7.0));
}
