#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsp/errors.hpp"

namespace nsp {

constexpr double kMissingSentinel = -999.0;

struct GridSpec {
    int height = 0;
    int width = 0;
    double cell_size_km = 11.0;
    double origin_lat = 0.0;  // north-west cell center
    double origin_lon = 0.0;
    double resolution_deg = 0.1;

    void validate() const {
        if (height < 1 || width < 1) throw ConfigError("grid dims must be >= 1");
        if (cell_size_km <= 0) throw ConfigError("cell_size_km must be > 0");
    }
    std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
    bool operator==(const GridSpec& o) const {
        return height == o.height && width == o.width && cell_size_km == o.cell_size_km &&
               origin_lat == o.origin_lat && origin_lon == o.origin_lon &&
               resolution_deg == o.resolution_deg;
    }
};

/// Dense raster of precipitation rate (mm/h) or elevation (m) with a
/// per-cell validity mask. Values are stored as float32 to match the file
/// format exactly.
struct GridField {
    GridSpec spec;
    std::vector<float> values;
    std::vector<std::uint8_t> valid;

    GridField() = default;
    explicit GridField(GridSpec s, float fill = 0.0f, bool all_valid = true)
        : spec(s), values(s.cells(), fill), valid(s.cells(), all_valid ? 1 : 0) {}

    float at(int r, int c) const { return values[static_cast<std::size_t>(r) * spec.width + c]; }
    float& at(int r, int c) { return values[static_cast<std::size_t>(r) * spec.width + c]; }
    bool is_valid(int r, int c) const {
        return valid[static_cast<std::size_t>(r) * spec.width + c] != 0;
    }
    bool any_valid() const {
        for (auto v : valid)
            if (v) return true;
        return false;
    }
};

struct GaugeObservation {
    int row = 0;
    int col = 0;
    double lat = 0.0;
    double lon = 0.0;
    double value = 0.0;  // mm/h, or <= -900 when missing
    std::string station_id;

    bool missing() const { return value < -900.0; }
};

/// One hourly instance. Radar, when present, is an evaluation reference and
/// must never feed a model input path.
struct SampleFrame {
    std::int64_t timestamp = 0;  // hours since the dataset epoch
    GridField satellite;
    GridField elevation;
    std::vector<GaugeObservation> gauges;
    std::optional<GridField> radar;
};

struct FoldSpec {
    std::vector<int> train_years;
    std::vector<int> validation_years;
    std::vector<int> test_years;

    void validate() const {
        if (train_years.empty() || validation_years.empty() || test_years.empty())
            throw ConfigError("fold with empty year list");
        auto mx = [](const std::vector<int>& v) { return *std::max_element(v.begin(), v.end()); };
        auto mn = [](const std::vector<int>& v) { return *std::min_element(v.begin(), v.end()); };
        if (!(mx(train_years) < mn(validation_years) && mn(validation_years) <= mx(validation_years) &&
              mx(validation_years) < mn(test_years)))
            throw ConfigError("fold years must be chronologically ordered train < val < test");
        std::vector<int> all = train_years;
        all.insert(all.end(), validation_years.begin(), validation_years.end());
        all.insert(all.end(), test_years.begin(), test_years.end());
        std::sort(all.begin(), all.end());
        if (std::adjacent_find(all.begin(), all.end()) != all.end())
            throw ConfigError("fold year lists must be disjoint");
    }
};

// ---------------------------------------------------------------------------
// Raster file format: 16-byte magic ("QPEGRID1" zero padded), little-endian
// u32 header length, UTF-8 JSON header, then row-major float32 payload in
// north-to-south row order.
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kGridMagic[8] = {'Q', 'P', 'E', 'G', 'R', 'I', 'D', '1'};

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("raster: truncated header length");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_grid(const std::string& path, const GridField& field) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    char magic[16] = {};
    std::memcpy(magic, detail::kGridMagic, 8);
    os.write(magic, 16);
    nlohmann::ordered_json header;
    header["height"] = field.spec.height;
    header["width"] = field.spec.width;
    header["resolution_deg"] = field.spec.resolution_deg;
    header["origin_lat"] = field.spec.origin_lat;
    header["origin_lon"] = field.spec.origin_lon;
    header["dtype"] = "f32";
    header["nodata"] = kMissingSentinel;
    const std::string hs = header.dump();
    detail::write_u32_le(os, static_cast<std::uint32_t>(hs.size()));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    std::vector<float> payload(field.values);
    for (std::size_t i = 0; i < payload.size(); ++i)
        if (!field.valid[i]) payload[i] = static_cast<float>(kMissingSentinel);
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * 4));
    if (!os) throw DataError("write failed: " + path);
}

/// Loads a raster and marks sentinel cells (value <= -900) invalid.
inline GridField load_grid(const std::string& path, const GridSpec& spec) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open raster: " + path);
    char magic[16];
    is.read(magic, 16);
    if (!is || std::memcmp(magic, detail::kGridMagic, 8) != 0)
        throw DataError("raster: bad magic in " + path);
    const std::uint32_t hlen = detail::read_u32_le(is);
    if (hlen > (1u << 20)) throw DataError("raster: unreasonable header length in " + path);
    std::string hs(hlen, '\0');
    is.read(hs.data(), hlen);
    if (!is) throw DataError("raster: truncated header in " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("raster: malformed JSON header in " + path + ": " + e.what());
    }
    int h, w;
    try {
        h = header.at("height").get<int>();
        w = header.at("width").get<int>();
        if (header.at("dtype").get<std::string>() != "f32")
            throw DataError("raster: unsupported dtype in " + path);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("raster: missing header key in " + path + ": " + e.what());
    }
    if (h != spec.height || w != spec.width)
        throw DataError("raster: file is " + std::to_string(h) + "x" + std::to_string(w) +
                        " but spec expects " + std::to_string(spec.height) + "x" +
                        std::to_string(spec.width) + " (" + path + ")");
    GridField field(spec);
    is.read(reinterpret_cast<char*>(field.values.data()),
            static_cast<std::streamsize>(field.values.size() * 4));
    if (!is) throw DataError("raster: truncated payload in " + path);
    for (std::size_t i = 0; i < field.values.size(); ++i)
        field.valid[i] = field.values[i] <= -900.0f ? 0 : 1;
    return field;
}

// ---------------------------------------------------------------------------
// Gauge CSV: header `timestamp,station_id,lat,lon,value_mmph`.
// ---------------------------------------------------------------------------

struct GaugeTable {
    std::map<std::int64_t, std::vector<GaugeObservation>> by_hour;
    int dropped_outside = 0;
};

/// Nearest cell index for a coordinate offset measured in cells; ties break
/// toward the lower index.
inline int nearest_cell_index(double cells_from_origin) {
    return static_cast<int>(std::ceil(cells_from_origin - 0.5));
}

/// Maps (lat, lon) to the nearest grid cell, or nullopt when outside the
/// grid extent.
inline std::optional<std::pair<int, int>> cell_of(const GridSpec& spec, double lat, double lon) {
    const double fr = (spec.origin_lat - lat) / spec.resolution_deg;
    const double fc = (lon - spec.origin_lon) / spec.resolution_deg;
    const int r = nearest_cell_index(fr);
    const int c = nearest_cell_index(fc);
    if (r < 0 || r >= spec.height || c < 0 || c >= spec.width) return std::nullopt;
    return std::make_pair(r, c);
}

inline GaugeTable load_gauges(const std::string& path, const GridSpec& spec) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open gauge CSV: " + path);
    std::string line;
    if (!std::getline(is, line)) throw DataError("gauge CSV empty: " + path);
    // Tolerate a trailing \r from foreign line endings.
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "timestamp,station_id,lat,lon,value_mmph")
        throw DataError("gauge CSV: unexpected header in " + path + ": " + line);
    GaugeTable table;
    int line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::array<std::string, 5> fields;
        std::size_t start = 0;
        int nf = 0;
        for (int f = 0; f < 5; ++f) {
            std::size_t comma = line.find(',', start);
            if (f < 4 && comma == std::string::npos) break;
            fields[f] = line.substr(start, comma == std::string::npos ? std::string::npos
                                                                      : comma - start);
            start = comma + 1;
            ++nf;
            if (comma == std::string::npos) break;
        }
        if (nf != 5)
            throw DataError("gauge CSV: line " + std::to_string(line_no) + ": expected 5 fields");
        GaugeObservation obs;
        std::int64_t ts;
        try {
            ts = std::stoll(fields[0]);
            obs.lat = std::stod(fields[2]);
            obs.lon = std::stod(fields[3]);
            obs.value = fields[4].empty() ? kMissingSentinel : std::stod(fields[4]);
        } catch (const std::exception&) {
            throw DataError("gauge CSV: line " + std::to_string(line_no) + ": unparseable row");
        }
        obs.station_id = fields[1];
        auto cell = cell_of(spec, obs.lat, obs.lon);
        if (!cell) {
            ++table.dropped_outside;
            continue;
        }
        obs.row = cell->first;
        obs.col = cell->second;
        table.by_hour[ts].push_back(std::move(obs));
    }
    return table;
}

inline void save_gauges(const std::string& path, const GaugeTable& table) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path);
    os << "timestamp,station_id,lat,lon,value_mmph\n";
    char buf[160];
    for (const auto& [ts, list] : table.by_hour) {
        for (const auto& g : list) {
            if (g.missing()) {
                std::snprintf(buf, sizeof(buf), "%lld,%s,%.6f,%.6f,\n",
                              static_cast<long long>(ts), g.station_id.c_str(), g.lat, g.lon);
            } else {
                std::snprintf(buf, sizeof(buf), "%lld,%s,%.6f,%.6f,%.6f\n",
                              static_cast<long long>(ts), g.station_id.c_str(), g.lat, g.lon,
                              g.value);
            }
            os << buf;
        }
    }
}

// ---------------------------------------------------------------------------
// Quality filtering (applied before any training or evaluation).
// ---------------------------------------------------------------------------

struct FilterReport {
    int gauge_spikes_removed = 0;   // rule (i)
    int radar_cells_capped = 0;     // rule (ii)
    int gauge_missing_excluded = 0; // rule (iii)
    bool frame_discardable = false; // rule (iv)
};

/// Rules:
///  (i)  gauge > 20 mm/h while satellite < 1 and radar < 1 at the cell -> removed
///  (ii) radar cells > 500 mm/h -> invalidated
///  (iii) gauge values < -900 -> excluded
///  (iv) entirely invalid satellite (or radar, when present) -> frame flagged
/// Filters never fail and are idempotent. Rule (i) requires a valid satellite
/// cell and a present, valid radar cell; it compares the gauge's single cell.
inline std::pair<SampleFrame, FilterReport> apply_quality_filters(SampleFrame frame) {
    FilterReport report;
    if (frame.radar) {
        auto& radar = *frame.radar;
        for (std::size_t i = 0; i < radar.values.size(); ++i) {
            if (radar.valid[i] && radar.values[i] > 500.0f) {
                radar.valid[i] = 0;
                ++report.radar_cells_capped;
            }
        }
    }
    std::vector<GaugeObservation> kept;
    kept.reserve(frame.gauges.size());
    for (const auto& g : frame.gauges) {
        if (g.missing()) {
            ++report.gauge_missing_excluded;
            continue;
        }
        if (g.value > 20.0 && frame.radar) {
            const std::size_t idx =
                static_cast<std::size_t>(g.row) * frame.satellite.spec.width + g.col;
            const bool sat_low =
                frame.satellite.valid[idx] && frame.satellite.values[idx] < 1.0f;
            const bool radar_low = frame.radar->valid[idx] && frame.radar->values[idx] < 1.0f;
            if (sat_low && radar_low) {
                ++report.gauge_spikes_removed;
                continue;
            }
        }
        kept.push_back(g);
    }
    frame.gauges = std::move(kept);
    if (!frame.satellite.any_valid() || (frame.radar && !frame.radar->any_valid()))
        report.frame_discardable = true;
    return {std::move(frame), report};
}

// ---------------------------------------------------------------------------
// Input normalization: the model's four-channel stack.
// ---------------------------------------------------------------------------

/// Channel layout: 0 satellite log1p, 1 elevation / 2000, 2 context-gauge
/// log1p (zero where unobserved, co-located values averaged), 3 binary
/// context mask. Invalid raster cells contribute zeros.
struct InputStack {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // 4 * height * width, channel-major

    double* channel(int c) { return data.data() + static_cast<std::size_t>(c) * height * width; }
    const double* channel(int c) const {
        return data.data() + static_cast<std::size_t>(c) * height * width;
    }
};

inline InputStack normalize_inputs(const SampleFrame& frame,
                                   const std::vector<GaugeObservation>& context) {
    const GridSpec& spec = frame.satellite.spec;
    InputStack stack;
    stack.height = spec.height;
    stack.width = spec.width;
    stack.data.assign(4 * spec.cells(), 0.0);
    double* sat = stack.channel(0);
    double* elev = stack.channel(1);
    double* gauge = stack.channel(2);
    double* mask = stack.channel(3);
    for (std::size_t i = 0; i < spec.cells(); ++i) {
        if (frame.satellite.valid[i]) {
            const double v = frame.satellite.values[i];
            if (v < 0.0) throw NumericError("normalize_inputs: negative satellite value");
            sat[i] = std::log1p(v);
        }
        if (frame.elevation.valid[i]) elev[i] = frame.elevation.values[i] / 2000.0;
    }
    std::vector<double> sums(spec.cells(), 0.0);
    std::vector<int> counts(spec.cells(), 0);
    for (const auto& g : context) {
        if (g.missing()) continue;
        if (g.value < 0.0) throw NumericError("normalize_inputs: negative gauge value");
        const std::size_t idx = static_cast<std::size_t>(g.row) * spec.width + g.col;
        sums[idx] += g.value;
        ++counts[idx];
    }
    for (std::size_t i = 0; i < spec.cells(); ++i) {
        if (counts[i] > 0) {
            gauge[i] = std::log1p(sums[i] / counts[i]);
            mask[i] = 1.0;
        }
    }
    return stack;
}

inline InputStack normalize_inputs(const SampleFrame& frame) {
    return normalize_inputs(frame, frame.gauges);
}

// ---------------------------------------------------------------------------
// Expanding-window cross-validation and temporal pairing.
// ---------------------------------------------------------------------------

/// Fold k trains on years[0..k], validates on years[k+1], tests on
/// years[k+2]; requires at least n_folds + 2 years.
inline std::vector<FoldSpec> make_folds(std::vector<int> available_years, int n_folds) {
    std::sort(available_years.begin(), available_years.end());
    if (n_folds < 1) throw ConfigError("make_folds: n_folds must be >= 1");
    if (static_cast<int>(available_years.size()) < n_folds + 2)
        throw ConfigError("make_folds: need at least " + std::to_string(n_folds + 2) +
                          " years, got " + std::to_string(available_years.size()));
    std::vector<FoldSpec> folds;
    for (int k = 0; k < n_folds; ++k) {
        FoldSpec f;
        f.train_years.assign(available_years.begin(), available_years.begin() + k + 1);
        f.validation_years = {available_years[static_cast<std::size_t>(k) + 1]};
        f.test_years = {available_years[static_cast<std::size_t>(k) + 2]};
        f.validate();
        folds.push_back(std::move(f));
    }
    return folds;
}

/// Indices of consecutive-hour pairs; pairs with a gap over one hour are
/// discarded. Frames must be sorted by timestamp.
inline std::vector<std::pair<std::size_t, std::size_t>> pair_consecutive(
    const std::vector<SampleFrame>& frames) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
        if (frames[i + 1].timestamp - frames[i].timestamp == 1) pairs.emplace_back(i, i + 1);
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Dataset manifest.
// ---------------------------------------------------------------------------

struct ManifestFrame {
    std::int64_t timestamp = 0;
    std::string satellite_path;
    std::string elevation_path;
    std::string radar_path;  // empty when absent
};

struct DatasetManifest {
    GridSpec grid;
    int epoch_year = 2021;
    int hours_per_year = 70;  // synthetic compressed calendar
    std::string gauges_csv;
    std::vector<ManifestFrame> frames;

    int year_of(std::int64_t timestamp) const {
        return epoch_year + static_cast<int>(timestamp / hours_per_year);
    }
    std::vector<int> years() const {
        std::vector<int> ys;
        for (const auto& f : frames) {
            const int y = year_of(f.timestamp);
            if (ys.empty() || ys.back() != y) ys.push_back(y);
        }
        std::sort(ys.begin(), ys.end());
        ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
        return ys;
    }
};

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["epoch_year"] = m.epoch_year;
    j["hours_per_year"] = m.hours_per_year;
    j["grid"] = {{"height", m.grid.height},
                 {"width", m.grid.width},
                 {"cell_size_km", m.grid.cell_size_km},
                 {"origin_lat", m.grid.origin_lat},
                 {"origin_lon", m.grid.origin_lon},
                 {"resolution_deg", m.grid.resolution_deg}};
    j["gauges_csv"] = m.gauges_csv;
    auto frames = nlohmann::ordered_json::array();
    for (const auto& f : m.frames) {
        nlohmann::ordered_json e;
        e["t"] = f.timestamp;
        e["satellite"] = f.satellite_path;
        e["elevation"] = f.elevation_path;
        if (!f.radar_path.empty()) e["radar"] = f.radar_path;
        frames.push_back(std::move(e));
    }
    j["frames"] = std::move(frames);
    std::ofstream os(path);
    if (!os) throw DataError("cannot write manifest: " + path);
    os << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest: malformed JSON: " + std::string(e.what()));
    }
    DatasetManifest m;
    try {
        m.epoch_year = j.at("epoch_year").get<int>();
        m.hours_per_year = j.at("hours_per_year").get<int>();
        const auto& g = j.at("grid");
        m.grid.height = g.at("height").get<int>();
        m.grid.width = g.at("width").get<int>();
        m.grid.cell_size_km = g.at("cell_size_km").get<double>();
        m.grid.origin_lat = g.at("origin_lat").get<double>();
        m.grid.origin_lon = g.at("origin_lon").get<double>();
        m.grid.resolution_deg = g.at("resolution_deg").get<double>();
        m.gauges_csv = j.at("gauges_csv").get<std::string>();
        for (const auto& e : j.at("frames")) {
            ManifestFrame f;
            f.timestamp = e.at("t").get<std::int64_t>();
            f.satellite_path = e.at("satellite").get<std::string>();
            f.elevation_path = e.at("elevation").get<std::string>();
            if (e.contains("radar")) f.radar_path = e.at("radar").get<std::string>();
            m.frames.push_back(std::move(f));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest: missing key: " + std::string(e.what()));
    }
    if (m.hours_per_year < 1) throw DataError("manifest: hours_per_year must be >= 1");
    m.grid.validate();
    return m;
}

/// Loads every frame of a manifest (paths resolved against `dir`), applies
/// quality filters, and drops discardable frames.
struct LoadedDataset {
    DatasetManifest manifest;
    std::vector<SampleFrame> frames;
    int discarded_frames = 0;
    FilterReport filter_totals;
};

inline std::string join_path(const std::string& dir, const std::string& rel) {
    if (rel.empty() || rel.front() == '/') return rel;
    if (dir.empty()) return rel;
    return dir.back() == '/' ? dir + rel : dir + "/" + rel;
}

inline LoadedDataset load_dataset(const std::string& manifest_path, bool apply_filters = true) {
    LoadedDataset ds;
    ds.manifest = load_manifest(manifest_path);
    std::string dir;
    const auto slash = manifest_path.find_last_of('/');
    if (slash != std::string::npos) dir = manifest_path.substr(0, slash);
    GaugeTable gauges = load_gauges(join_path(dir, ds.manifest.gauges_csv), ds.manifest.grid);
    for (const auto& mf : ds.manifest.frames) {
        SampleFrame frame;
        frame.timestamp = mf.timestamp;
        frame.satellite = load_grid(join_path(dir, mf.satellite_path), ds.manifest.grid);
        frame.elevation = load_grid(join_path(dir, mf.elevation_path), ds.manifest.grid);
        if (!mf.radar_path.empty())
            frame.radar = load_grid(join_path(dir, mf.radar_path), ds.manifest.grid);
        auto it = gauges.by_hour.find(mf.timestamp);
        if (it != gauges.by_hour.end()) frame.gauges = it->second;
        if (apply_filters) {
            auto [filtered, report] = apply_quality_filters(std::move(frame));
            ds.filter_totals.gauge_spikes_removed += report.gauge_spikes_removed;
            ds.filter_totals.radar_cells_capped += report.radar_cells_capped;
            ds.filter_totals.gauge_missing_excluded += report.gauge_missing_excluded;
            if (report.frame_discardable) {
                ++ds.discarded_frames;
                continue;
            }
            ds.frames.push_back(std::move(filtered));
        } else {
            ds.frames.push_back(std::move(frame));
        }
    }
    return ds;
}

}  // namespace nsp
