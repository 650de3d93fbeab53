#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "nsp/grid.hpp"
#include "nsp/rng.hpp"

namespace nsp {

/// Seeded storm-field generator. Produces truth/satellite/gauge/elevation
/// sequences with the pathology the refinement task cares about: mostly-dry
/// frames, heavy-tailed wet values, a spatially smooth multiplicative
/// satellite bias, and a sparse, hourly-fluctuating gauge network.
struct SynthConfig {
    GridSpec grid;
    int hours = 200;
    int epoch_year = 2021;
    int hours_per_year = 70;

    // storm process
    double mean_storms = 2.5;          // equilibrium active storm count
    double storm_lifetime_hours = 24.0;
    double storm_radius_cells = 2.5;   // median Gaussian radius
    double storm_radius_sigma = 0.35;  // log-space spread
    double intensity_median = 4.0;     // mm/h lognormal median peak
    double intensity_sigma = 0.9;
    double wet_threshold = 0.25;       // subtracted before clamping at zero
    double advection_u = 0.7;          // cells/hour, eastward
    double advection_v = 0.25;
    double advection_jitter = 0.08;    // OU noise on storm velocity
    double ou_theta = 0.25;

    // satellite degradation
    double bias_min = 1.4;
    double bias_max = 2.4;
    double bias_smoothness_cells = 16.0;
    double blur_sigma_cells = 0.7;
    double displacement_cells = 1.0;
    double detection_dropout = 0.05;   // whole-storm missed-detection probability
    double satellite_noise_sd = 0.08;  // multiplicative log-normal noise

    // gauges
    int n_stations = 220;
    bool clustered_stations = false;
    double gauge_noise_scale = 0.12;   // sd = scale * sqrt(truth) + floor
    double gauge_noise_floor = 0.04;
    double spike_rate = 0.0;           // per station-hour
    double silent_rate = 0.10;         // per station-hour

    std::uint64_t seed = 42;

    void validate() const {
        grid.validate();
        if (hours < 2) throw ConfigError("synth: hours must be >= 2 (pairs impossible below)");
        if (mean_storms < 0 || spike_rate < 0 || silent_rate < 0 || detection_dropout < 0)
            throw ConfigError("synth: rates must be >= 0");
        if (hours_per_year < 1) throw ConfigError("synth: hours_per_year must be >= 1");
    }

    static SynthConfig desk_default() {
        SynthConfig cfg;
        cfg.grid.height = 64;
        cfg.grid.width = 64;
        cfg.grid.origin_lat = 45.0;
        cfg.grid.origin_lon = -110.0;
        cfg.grid.resolution_deg = 0.1;
        cfg.grid.cell_size_km = 11.0;
        return cfg;
    }
};

struct StormSnapshot {
    double cy = 0.0, cx = 0.0;   // center in cell units
    double ixx = 1.0, ixy = 0.0, iyy = 1.0;  // inverse covariance
    double amplitude = 0.0;
    bool detected = true;  // satellite sees this storm
};

struct TruthSequence {
    SynthConfig cfg;
    std::vector<GridField> truth;
    std::vector<std::vector<StormSnapshot>> storms;  // one list per frame
};

namespace detail {

inline void gaussian_blur_inplace(std::vector<double>& field, int h, int w, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        norm += kernel[i + radius];
    }
    for (auto& k : kernel) k /= norm;
    std::vector<double> tmp(field.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = std::clamp(x + i, 0, w - 1);
                acc += kernel[i + radius] * field[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = std::clamp(y + i, 0, h - 1);
                acc += kernel[i + radius] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            field[static_cast<std::size_t>(y) * w + x] = acc;
        }
}

/// Smooth positive field in [lo, hi]: blurred white noise rescaled.
inline std::vector<double> smooth_random_field(int h, int w, double smoothness, double lo,
                                               double hi, Rng& rng) {
    std::vector<double> f(static_cast<std::size_t>(h) * w);
    for (auto& v : f) v = rng.uniform();
    gaussian_blur_inplace(f, h, w, smoothness);
    const auto [mn_it, mx_it] = std::minmax_element(f.begin(), f.end());
    const double mn = *mn_it, mx = *mx_it;
    const double span = mx > mn ? mx - mn : 1.0;
    for (auto& v : f) v = lo + (hi - lo) * (v - mn) / span;
    return f;
}

inline void rasterize_storms(const std::vector<StormSnapshot>& storms, int h, int w,
                             double shift_y, double shift_x, bool satellite_view,
                             std::vector<double>& out) {
    out.assign(static_cast<std::size_t>(h) * w, 0.0);
    for (const auto& s : storms) {
        if (satellite_view && !s.detected) continue;
        const double cy = s.cy + shift_y;
        const double cx = s.cx + shift_x;
        // 1 / range where exp term is negligible
        const double cutoff = 18.0;  // q > 36 -> e^-18 ~ 1.5e-8
        const double ext = std::sqrt(2.0 * cutoff / std::min(s.ixx, s.iyy));
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - ext)));
        const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + ext)));
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - ext)));
        const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + ext)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dy = y - cy, dx = x - cx;
                const double q = s.ixx * dx * dx + 2.0 * s.ixy * dx * dy + s.iyy * dy * dy;
                if (q > 2.0 * cutoff) continue;
                out[static_cast<std::size_t>(y) * w + x] += s.amplitude * std::exp(-0.5 * q);
            }
        }
    }
}

inline GridField threshold_field(const std::vector<double>& raw, const GridSpec& spec,
                                 double wet_threshold) {
    GridField f(spec);
    for (std::size_t i = 0; i < raw.size(); ++i)
        f.values[i] = static_cast<float>(std::max(0.0, raw[i] - wet_threshold));
    return f;
}

struct StormState {
    StormSnapshot snap;
    double vy, vx;
};

}  // namespace detail

/// Storm birth/death process advected with Ornstein-Uhlenbeck velocity
/// jitter; deterministic given (cfg, seed).
inline TruthSequence gen_truth_sequence(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TruthSequence seq;
    seq.cfg = cfg;
    Rng rng(derive_seed(seed, "storms"));
    const int h = cfg.grid.height, w = cfg.grid.width;
    const double margin = 8.0;

    auto spawn = [&](bool anywhere) {
        detail::StormState st;
        st.snap.cy = rng.uniform(-margin, h + margin);
        st.snap.cx = anywhere ? rng.uniform(-margin, w + margin)
                              : rng.uniform(-margin, 0.0);  // enter from upwind
        const double r1 = cfg.storm_radius_cells *
                          std::exp(cfg.storm_radius_sigma * rng.normal());
        const double r2 = cfg.storm_radius_cells *
                          std::exp(cfg.storm_radius_sigma * rng.normal());
        const double theta = rng.uniform(0.0, 3.14159265358979);
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = 1.0 / (r1 * r1), b = 1.0 / (r2 * r2);
        st.snap.ixx = a * c * c + b * s * s;
        st.snap.iyy = a * s * s + b * c * c;
        st.snap.ixy = (a - b) * s * c;
        st.snap.amplitude = cfg.intensity_median * std::exp(cfg.intensity_sigma * rng.normal());
        st.snap.detected = rng.uniform() >= cfg.detection_dropout;
        st.vy = cfg.advection_v + 0.2 * cfg.advection_v * rng.normal();
        st.vx = cfg.advection_u + 0.2 * cfg.advection_u * rng.normal();
        return st;
    };

    std::vector<detail::StormState> active;
    // equilibrium initial population
    const int n0 = static_cast<int>(std::lround(cfg.mean_storms));
    for (int i = 0; i < n0; ++i) active.push_back(spawn(true));

    const double death_p = 1.0 / cfg.storm_lifetime_hours;
    const double birth_mean = cfg.mean_storms * death_p;
    std::vector<double> raw;
    for (int t = 0; t < cfg.hours; ++t) {
        // deaths
        std::vector<detail::StormState> survivors;
        for (auto& st : active)
            if (rng.uniform() >= death_p) survivors.push_back(st);
        active = std::move(survivors);
        // births: Bernoulli thinning of a small mean rate
        if (rng.uniform() < birth_mean) active.push_back(spawn(false));
        // advect with OU jitter
        for (auto& st : active) {
            st.vy += cfg.ou_theta * (cfg.advection_v - st.vy) +
                     cfg.advection_jitter * rng.normal();
            st.vx += cfg.ou_theta * (cfg.advection_u - st.vx) +
                     cfg.advection_jitter * rng.normal();
            st.snap.cy += st.vy;
            st.snap.cx += st.vx;
        }
        // drop storms far past the domain
        std::vector<detail::StormState> inside;
        for (auto& st : active)
            if (st.snap.cx < w + 2 * margin && st.snap.cy < h + 2 * margin &&
                st.snap.cx > -3 * margin && st.snap.cy > -3 * margin)
                inside.push_back(st);
        active = std::move(inside);

        std::vector<StormSnapshot> snaps;
        for (const auto& st : active) snaps.push_back(st.snap);
        detail::rasterize_storms(snaps, h, w, 0.0, 0.0, false, raw);
        seq.truth.push_back(detail::threshold_field(raw, cfg.grid, cfg.wet_threshold));
        seq.storms.push_back(std::move(snaps));
    }
    return seq;
}

/// Smoothed random elevation model in [0, 2500] m.
inline GridField gen_elevation(const SynthConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "elevation"));
    auto f = detail::smooth_random_field(cfg.grid.height, cfg.grid.width, 8.0, 0.0, 2500.0, rng);
    GridField g(cfg.grid);
    for (std::size_t i = 0; i < f.size(); ++i) g.values[i] = static_cast<float>(f[i]);
    return g;
}

/// Satellite degradation: per-storm detection dropout, displacement, blur,
/// smooth multiplicative bias, and multiplicative noise. With every
/// degradation disabled the output equals the truth exactly.
inline std::vector<GridField> degrade_to_satellite(const TruthSequence& seq,
                                                   const SynthConfig& cfg,
                                                   std::uint64_t seed) {
    const int h = cfg.grid.height, w = cfg.grid.width;
    Rng rng(derive_seed(seed, "satellite"));
    std::vector<double> bias;
    if (cfg.bias_min == 1.0 && cfg.bias_max == 1.0)
        bias.assign(static_cast<std::size_t>(h) * w, 1.0);
    else
        bias = detail::smooth_random_field(h, w, cfg.bias_smoothness_cells, cfg.bias_min,
                                           cfg.bias_max, rng);
    double shift_y = 0.0, shift_x = 0.0;
    if (cfg.displacement_cells > 0.0) {
        const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979);
        shift_y = cfg.displacement_cells * std::sin(ang);
        shift_x = cfg.displacement_cells * std::cos(ang);
    }
    std::vector<GridField> out;
    std::vector<double> raw;
    for (std::size_t t = 0; t < seq.storms.size(); ++t) {
        detail::rasterize_storms(seq.storms[t], h, w, shift_y, shift_x, true, raw);
        detail::gaussian_blur_inplace(raw, h, w, cfg.blur_sigma_cells);
        GridField sat = detail::threshold_field(raw, cfg.grid, cfg.wet_threshold);
        for (std::size_t i = 0; i < sat.values.size(); ++i) {
            double v = sat.values[i] * bias[i];
            if (cfg.satellite_noise_sd > 0.0 && v > 0.0)
                v *= std::exp(cfg.satellite_noise_sd * rng.normal() -
                              0.5 * cfg.satellite_noise_sd * cfg.satellite_noise_sd);
            sat.values[i] = static_cast<float>(v);
        }
        out.push_back(std::move(sat));
    }
    return out;
}

struct Station {
    double lat, lon;
    int row, col;
    std::string id;
};

inline std::vector<Station> sample_stations(const SynthConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "stations"));
    const auto& g = cfg.grid;
    std::vector<Station> stations;
    const double lat_lo = g.origin_lat - (g.height - 1) * g.resolution_deg;
    const double lon_hi = g.origin_lon + (g.width - 1) * g.resolution_deg;
    auto add_station = [&](double lat, double lon, int i) {
        auto cell = cell_of(g, lat, lon);
        if (!cell) return;
        Station s;
        s.lat = lat;
        s.lon = lon;
        s.row = cell->first;
        s.col = cell->second;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "st%04d", i);
        s.id = buf;
        stations.push_back(std::move(s));
    };
    if (cfg.clustered_stations) {
        const int n_clusters = 5;
        std::vector<std::pair<double, double>> centers;
        for (int c = 0; c < n_clusters; ++c)
            centers.emplace_back(rng.uniform(lat_lo, g.origin_lat),
                                 rng.uniform(g.origin_lon, lon_hi));
        for (int i = 0; i < cfg.n_stations; ++i) {
            if (i % 2 == 0) {
                add_station(rng.uniform(lat_lo, g.origin_lat), rng.uniform(g.origin_lon, lon_hi),
                            i);
            } else {
                const auto& c = centers[rng.uniform_int(n_clusters)];
                const double spread = 5.0 * g.resolution_deg;
                add_station(std::clamp(c.first + spread * rng.normal(), lat_lo, g.origin_lat),
                            std::clamp(c.second + spread * rng.normal(), g.origin_lon, lon_hi),
                            i);
            }
        }
    } else {
        for (int i = 0; i < cfg.n_stations; ++i)
            add_station(rng.uniform(lat_lo, g.origin_lat), rng.uniform(g.origin_lon, lon_hi), i);
    }
    return stations;
}

struct GaugeSynthesis {
    GaugeTable table;
    // ground truth of injected spikes for filter-fidelity checks
    struct Spike {
        std::int64_t hour;
        std::string station_id;
    };
    std::vector<Spike> spikes;
};

/// Gauge observation model: truth plus heteroscedastic noise (clipped at six
/// sigma), hourly station silence, and optional spike injection. Spikes are
/// only planted where both the degraded satellite and the radar reference
/// (truth) are below 1 mm/h, mirroring the predicate the quality filter
/// checks.
inline GaugeSynthesis observe_gauges(const TruthSequence& seq,
                                     const std::vector<GridField>& satellite,
                                     const std::vector<Station>& stations,
                                     const SynthConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "gauges"));
    GaugeSynthesis out;
    const int w = cfg.grid.width;
    for (std::size_t t = 0; t < seq.truth.size(); ++t) {
        auto& list = out.table.by_hour[static_cast<std::int64_t>(t)];
        for (const auto& st : stations) {
            if (rng.uniform() < cfg.silent_rate) continue;  // station silent this hour
            const std::size_t idx = static_cast<std::size_t>(st.row) * w + st.col;
            const double truth_v = seq.truth[t].values[idx];
            GaugeObservation g;
            g.row = st.row;
            g.col = st.col;
            g.lat = st.lat;
            g.lon = st.lon;
            g.station_id = st.id;
            const bool spike_eligible =
                cfg.spike_rate > 0.0 && truth_v < 1.0 && satellite[t].values[idx] < 1.0f;
            if (spike_eligible && rng.uniform() < cfg.spike_rate) {
                g.value = rng.uniform(25.0, 45.0);
                out.spikes.push_back({static_cast<std::int64_t>(t), st.id});
            } else {
                const double sd = cfg.gauge_noise_scale * std::sqrt(truth_v) +
                                  cfg.gauge_noise_floor;
                const double noise = std::clamp(sd * rng.normal(), -6.0 * sd, 6.0 * sd);
                g.value = std::max(0.0, truth_v + noise);
            }
            list.push_back(std::move(g));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset writer: emits the gridio raster/CSV/manifest formats.
// ---------------------------------------------------------------------------

struct SynthStats {
    double wet_fraction_mean = 0.0;
    double gauge_count_mean = 0.0;
    int gauge_count_min = 0;
    int gauge_count_max = 0;
    double wet_p50 = 0.0, wet_p90 = 0.0, wet_p99 = 0.0, wet_max = 0.0;
    int spikes_injected = 0;
};

inline SynthStats write_synth_dataset(const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir + "/sat", ec);
    fs::create_directories(out_dir + "/radar", ec);
    if (ec) throw DataError("cannot create output directory: " + out_dir);

    TruthSequence seq = gen_truth_sequence(cfg, cfg.seed);
    std::vector<GridField> satellite = degrade_to_satellite(seq, cfg, cfg.seed);
    GridField elevation = gen_elevation(cfg, cfg.seed);
    auto stations = sample_stations(cfg, cfg.seed);
    GaugeSynthesis gauges = observe_gauges(seq, satellite, stations, cfg, cfg.seed);

    DatasetManifest manifest;
    manifest.grid = cfg.grid;
    manifest.epoch_year = cfg.epoch_year;
    manifest.hours_per_year = cfg.hours_per_year;
    manifest.gauges_csv = "gauges.csv";
    save_grid(out_dir + "/elevation.grid", elevation);
    char name[64];
    for (int t = 0; t < cfg.hours; ++t) {
        std::snprintf(name, sizeof(name), "sat/%06d.grid", t);
        save_grid(out_dir + "/" + name, satellite[static_cast<std::size_t>(t)]);
        ManifestFrame mf;
        mf.timestamp = t;
        mf.satellite_path = name;
        mf.elevation_path = "elevation.grid";
        std::snprintf(name, sizeof(name), "radar/%06d.grid", t);
        save_grid(out_dir + "/" + name, seq.truth[static_cast<std::size_t>(t)]);
        mf.radar_path = name;
        manifest.frames.push_back(std::move(mf));
    }
    save_gauges(out_dir + "/gauges.csv", gauges.table);
    save_manifest(out_dir + "/manifest.json", manifest);

    SynthStats stats;
    stats.spikes_injected = static_cast<int>(gauges.spikes.size());
    std::vector<double> wet_values;
    double wet_cells = 0.0;
    for (const auto& f : seq.truth) {
        int wet = 0;
        for (float v : f.values)
            if (v > 0.0f) {
                ++wet;
                wet_values.push_back(v);
            }
        wet_cells += static_cast<double>(wet) / static_cast<double>(f.values.size());
    }
    stats.wet_fraction_mean = wet_cells / static_cast<double>(seq.truth.size());
    if (!wet_values.empty()) {
        std::sort(wet_values.begin(), wet_values.end());
        auto pct = [&](double p) {
            const std::size_t i = static_cast<std::size_t>(p * (wet_values.size() - 1));
            return wet_values[i];
        };
        stats.wet_p50 = pct(0.50);
        stats.wet_p90 = pct(0.90);
        stats.wet_p99 = pct(0.99);
        stats.wet_max = wet_values.back();
    }
    int gmin = INT32_MAX, gmax = 0;
    double gsum = 0.0;
    for (const auto& [t, list] : gauges.table.by_hour) {
        gmin = std::min(gmin, static_cast<int>(list.size()));
        gmax = std::max(gmax, static_cast<int>(list.size()));
        gsum += static_cast<double>(list.size());
    }
    stats.gauge_count_mean = gsum / static_cast<double>(gauges.table.by_hour.size());
    stats.gauge_count_min = gmin;
    stats.gauge_count_max = gmax;
    return stats;
}

}  // namespace nsp
