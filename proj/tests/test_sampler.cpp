#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "nsp/sampler.hpp"

using namespace nsp;

namespace {

std::vector<GaugeObservation> make_gauges(int rainy, int dry, double rainy_value = 2.0) {
    std::vector<GaugeObservation> out;
    for (int i = 0; i < rainy + dry; ++i) {
        GaugeObservation g;
        g.row = i;
        g.col = i;
        g.value = i < rainy ? rainy_value : 0.0;
        g.station_id = "s" + std::to_string(i);
        out.push_back(g);
    }
    return out;
}

SplitConfig desk_config() {
    SplitConfig cfg;
    cfg.min_context = 0;
    cfg.max_context = 100000;
    cfg.min_rainy_targets = 1;
    cfg.scale = 1.0;
    return cfg;
}

int count_rainy(const std::vector<GaugeObservation>& gauges, const std::vector<int>& idx,
                double thr) {
    int n = 0;
    for (int i : idx)
        if (gauges[i].value >= thr) ++n;
    return n;
}

}  // namespace

TEST_CASE("balanced split preserves rainy proportion", "[sampler]") {
    auto gauges = make_gauges(10, 10);
    SplitConfig cfg = desk_config();
    Rng rng(1);
    auto split = split_context_target(gauges, cfg, rng);
    REQUIRE(split.has_value());
    REQUIRE(split->context.size() == 10);
    REQUIRE(split->target.size() == 10);
    REQUIRE(count_rainy(gauges, split->context, cfg.rain_threshold) == 5);
    REQUIRE(count_rainy(gauges, split->target, cfg.rain_threshold) == 5);
}

TEST_CASE("all-dry frames are rejected when rainy targets are required", "[sampler]") {
    auto gauges = make_gauges(0, 20);
    SplitConfig cfg = desk_config();
    cfg.min_rainy_targets = 1;
    Rng rng(2);
    REQUIRE_FALSE(split_context_target(gauges, cfg, rng).has_value());
    cfg.min_rainy_targets = 0;
    Rng rng2(2);
    REQUIRE(split_context_target(gauges, cfg, rng2).has_value());
}

TEST_CASE("same seed gives identical splits", "[sampler]") {
    auto gauges = make_gauges(13, 29);
    SplitConfig cfg = desk_config();
    Rng a(77), b(77);
    auto s1 = split_context_target(gauges, cfg, a);
    auto s2 = split_context_target(gauges, cfg, b);
    REQUIRE(s1->context == s2->context);
    REQUIRE(s1->target == s2->target);
}

TEST_CASE("partition property holds for all seeds", "[sampler]") {
    auto gauges = make_gauges(17, 23);
    SplitConfig cfg = desk_config();
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        auto split = split_context_target(gauges, cfg, rng);
        REQUIRE(split.has_value());
        std::set<int> all(split->context.begin(), split->context.end());
        for (int i : split->target) REQUIRE(all.insert(i).second);  // disjoint
        REQUIRE(all.size() == gauges.size());                       // union = everything
    }
}

TEST_CASE("rainy proportion deviates by at most one observation per class", "[sampler]") {
    SplitConfig cfg = desk_config();
    Rng seed_rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const int rainy = 1 + static_cast<int>(seed_rng.uniform_int(30));
        const int dry = 1 + static_cast<int>(seed_rng.uniform_int(30));
        auto gauges = make_gauges(rainy, dry);
        Rng rng(trial);
        auto split = split_context_target(gauges, cfg, rng);
        REQUIRE(split.has_value());
        const int ctx_rainy = count_rainy(gauges, split->context, cfg.rain_threshold);
        const int tgt_rainy = count_rainy(gauges, split->target, cfg.rain_threshold);
        REQUIRE(std::abs(ctx_rainy - tgt_rainy) <= 1);
        const int ctx_dry = static_cast<int>(split->context.size()) - ctx_rainy;
        const int tgt_dry = static_cast<int>(split->target.size()) - tgt_rainy;
        REQUIRE(std::abs(ctx_dry - tgt_dry) <= 1);
    }
}

TEST_CASE("max_context clamp demotes only dry observations", "[sampler]") {
    auto gauges = make_gauges(8, 40);
    SplitConfig cfg = desk_config();
    cfg.max_context = 10;
    cfg.min_rainy_targets = 4;
    Rng rng(9);
    auto split = split_context_target(gauges, cfg, rng);
    REQUIRE(split.has_value());
    REQUIRE(static_cast<int>(split->context.size()) <= 10);
    // the 4 rainy context picks stay in context
    REQUIRE(count_rainy(gauges, split->context, cfg.rain_threshold) == 4);
    REQUIRE(count_rainy(gauges, split->target, cfg.rain_threshold) == 4);
}

TEST_CASE("min_context clamp promotes only dry observations", "[sampler]") {
    auto gauges = make_gauges(6, 40);
    SplitConfig cfg = desk_config();
    cfg.min_context = 30;
    cfg.min_rainy_targets = 3;
    Rng rng(10);
    auto split = split_context_target(gauges, cfg, rng);
    REQUIRE(split.has_value());
    REQUIRE(static_cast<int>(split->context.size()) >= 30);
    REQUIRE(count_rainy(gauges, split->target, cfg.rain_threshold) == 3);
}

TEST_CASE("scale factor shrinks the configured bounds", "[sampler]") {
    SplitConfig cfg;
    cfg.scale = 0.01;
    REQUIRE(cfg.scaled_min_context() == 5);
    REQUIRE(cfg.scaled_max_context() == 100);
    REQUIRE(cfg.scaled_min_rainy_targets() == 0);
}

TEST_CASE("missing observations never enter a split", "[sampler]") {
    auto gauges = make_gauges(4, 4);
    gauges.push_back(gauges.back());
    gauges.back().value = -999.0;
    SplitConfig cfg = desk_config();
    Rng rng(11);
    auto split = split_context_target(gauges, cfg, rng);
    REQUIRE(split.has_value());
    REQUIRE(split->context.size() + split->target.size() == 8);
}

TEST_CASE("all_context puts every observation in context", "[sampler]") {
    auto gauges = make_gauges(3, 4);
    auto split = all_context(gauges);
    REQUIRE(split.context.size() == 7);
    REQUIRE(split.target.empty());

    auto empty = all_context({});
    REQUIRE(empty.context.empty());
    REQUIRE(empty.target.empty());

    // idempotent under repetition
    auto again = all_context(select_observations(gauges, split.context));
    REQUIRE(again.context.size() == split.context.size());
}
