#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "nsp/errors.hpp"
#include "nsp/grid.hpp"
#include "nsp/rng.hpp"

namespace nsp {

/// Context/target partitioning protocol. The count bounds scale with the
/// desk-scale factor so the full-archive defaults stay meaningful on small
/// synthetic station networks.
struct SplitConfig {
    double context_ratio = 0.5;
    int min_context = 500;
    int max_context = 10000;
    int min_rainy_targets = 16;
    double rain_threshold = 0.5;  // mm/h; sampling threshold, not the metric one
    double scale = 1.0;

    void validate() const {
        if (!(context_ratio > 0.0 && context_ratio < 1.0))
            throw ConfigError("context_ratio must be in (0, 1)");
        if (min_context > max_context) throw ConfigError("min_context > max_context");
        if (scale <= 0.0) throw ConfigError("sampler scale must be > 0");
    }
    int scaled_min_context() const {
        return static_cast<int>(std::lround(min_context * scale));
    }
    int scaled_max_context() const {
        return std::max(1, static_cast<int>(std::lround(max_context * scale)));
    }
    int scaled_min_rainy_targets() const {
        return static_cast<int>(std::lround(min_rainy_targets * scale));
    }
};

/// Disjoint observation-index lists; indices refer to the gauge vector the
/// split was computed from.
struct ContextTargetSplit {
    std::vector<int> context;
    std::vector<int> target;
};

namespace detail {

inline void shuffle_indices(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[rng.uniform_int(i)]);
}

}  // namespace detail

/// Splits rainy and non-rainy observations independently at context_ratio so
/// both partitions preserve the rainy proportion, then clamps the context
/// size to the configured bounds by moving non-rainy observations only.
/// Returns nullopt (sample rejected) when fewer than the configured minimum
/// of rainy observations remain in the target set.
inline std::optional<ContextTargetSplit> split_context_target(
    const std::vector<GaugeObservation>& gauges, const SplitConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<int> rainy, dry;
    for (int i = 0; i < static_cast<int>(gauges.size()); ++i) {
        if (gauges[i].missing()) continue;
        (gauges[i].value >= cfg.rain_threshold ? rainy : dry).push_back(i);
    }
    detail::shuffle_indices(rainy, rng);
    detail::shuffle_indices(dry, rng);

    const auto take = [&](std::size_t n) {
        return static_cast<std::size_t>(std::lround(cfg.context_ratio * static_cast<double>(n)));
    };
    const std::size_t n_ctx_rainy = take(rainy.size());
    const std::size_t n_ctx_dry = take(dry.size());

    ContextTargetSplit split;
    split.context.assign(rainy.begin(), rainy.begin() + n_ctx_rainy);
    split.context.insert(split.context.end(), dry.begin(), dry.begin() + n_ctx_dry);
    split.target.assign(rainy.begin() + n_ctx_rainy, rainy.end());
    split.target.insert(split.target.end(), dry.begin() + n_ctx_dry, dry.end());

    // Clamp by moving non-rainy observations; rainy membership is never
    // touched so the rainy-target floor cannot be violated here.
    auto is_dry = [&](int idx) { return gauges[idx].value < cfg.rain_threshold; };
    const int min_ctx = cfg.scaled_min_context();
    const int max_ctx = cfg.scaled_max_context();
    if (static_cast<int>(split.context.size()) > max_ctx) {
        // demote random dry context observations (they sit at the tail after
        // the rainy prefix; the dry list is already shuffled)
        std::vector<int> keep, demoted;
        for (int idx : split.context) {
            if (is_dry(idx) && static_cast<int>(split.context.size()) - static_cast<int>(demoted.size()) > max_ctx)
                demoted.push_back(idx);
            else
                keep.push_back(idx);
        }
        split.context = std::move(keep);
        split.target.insert(split.target.end(), demoted.begin(), demoted.end());
    } else if (static_cast<int>(split.context.size()) < min_ctx) {
        std::vector<int> keep, promoted;
        for (int idx : split.target) {
            if (is_dry(idx) &&
                static_cast<int>(split.context.size()) + static_cast<int>(promoted.size()) < min_ctx)
                promoted.push_back(idx);
            else
                keep.push_back(idx);
        }
        split.target = std::move(keep);
        split.context.insert(split.context.end(), promoted.begin(), promoted.end());
    }

    int rainy_targets = 0;
    for (int idx : split.target)
        if (!is_dry(idx)) ++rainy_targets;
    if (rainy_targets < cfg.scaled_min_rainy_targets()) return std::nullopt;

    std::sort(split.context.begin(), split.context.end());
    std::sort(split.target.begin(), split.target.end());
    return split;
}

/// Inference-time split: every valid observation is context.
inline ContextTargetSplit all_context(const std::vector<GaugeObservation>& gauges) {
    ContextTargetSplit split;
    for (int i = 0; i < static_cast<int>(gauges.size()); ++i)
        if (!gauges[i].missing()) split.context.push_back(i);
    return split;
}

inline std::vector<GaugeObservation> select_observations(
    const std::vector<GaugeObservation>& gauges, const std::vector<int>& indices) {
    std::vector<GaugeObservation> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(gauges[static_cast<std::size_t>(i)]);
    return out;
}

}  // namespace nsp
