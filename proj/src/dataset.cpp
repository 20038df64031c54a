#include "msct/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace msct {

void Unit::check_aligned() const {
    const size_t n = y.size();
    if (x.size() != n || t.size() != n || t_type.size() != n)
        throw ShapeError("unit: sequences are not aligned (x=" + std::to_string(x.size()) +
                         " t=" + std::to_string(t.size()) + " y=" + std::to_string(n) + ")");
    for (size_t i = 0; i < n; ++i)
        if (t[i] != 0 && t[i] != 1)
            throw ShapeError("unit: treatment indicator outside {0,1} at step " +
                             std::to_string(i));
}

// ---------------------------------------------------------------------------
// Standardizer
// ---------------------------------------------------------------------------

namespace {
void mean_std(const std::vector<double>& vals, double& mean, double& sd) {
    mean = 0.0;
    sd = 1.0;
    if (vals.empty()) return;
    double s = 0;
    for (double v : vals) s += v;
    mean = s / static_cast<double>(vals.size());
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    sd = std::max(std::sqrt(var), 1e-8);
}
}  // namespace

Standardizer Standardizer::fit(const std::vector<Unit>& train_units) {
    if (train_units.empty()) throw UsageError("standardizer: empty training split");
    const int d_x = train_units[0].x.empty() ? 0 : static_cast<int>(train_units[0].x[0].size());
    const int d_s = static_cast<int>(train_units[0].s.size());
    Standardizer st;
    st.x_mean.assign(d_x, 0.0);
    st.x_std.assign(d_x, 1.0);
    st.s_mean.assign(d_s, 0.0);
    st.s_std.assign(d_s, 1.0);
    std::vector<double> ys;
    for (const Unit& u : train_units) ys.insert(ys.end(), u.y.begin(), u.y.end());
    mean_std(ys, st.y_mean, st.y_std);
    for (int d = 0; d < d_x; ++d) {
        std::vector<double> vs;
        for (const Unit& u : train_units)
            for (const auto& row : u.x) vs.push_back(row[static_cast<size_t>(d)]);
        mean_std(vs, st.x_mean[d], st.x_std[d]);
    }
    for (int d = 0; d < d_s; ++d) {
        std::vector<double> vs;
        for (const Unit& u : train_units) vs.push_back(u.s[static_cast<size_t>(d)]);
        mean_std(vs, st.s_mean[d], st.s_std[d]);
    }
    return st;
}

Standardizer Standardizer::identity(int d_x, int d_s) {
    Standardizer st;
    st.x_mean.assign(d_x, 0.0);
    st.x_std.assign(d_x, 1.0);
    st.s_mean.assign(d_s, 0.0);
    st.s_std.assign(d_s, 1.0);
    return st;
}

json Standardizer::to_json() const {
    return json{{"x_mean", x_mean}, {"x_std", x_std},   {"y_mean", y_mean},
                {"y_std", y_std},   {"s_mean", s_mean}, {"s_std", s_std}};
}

Standardizer Standardizer::from_json(const json& j) {
    Standardizer st;
    st.x_mean = j.at("x_mean").get<std::vector<double>>();
    st.x_std = j.at("x_std").get<std::vector<double>>();
    st.y_mean = j.at("y_mean").get<double>();
    st.y_std = j.at("y_std").get<double>();
    st.s_mean = j.at("s_mean").get<std::vector<double>>();
    st.s_std = j.at("s_std").get<std::vector<double>>();
    return st;
}

// ---------------------------------------------------------------------------
// Meta / unit serialization
// ---------------------------------------------------------------------------

json DatasetMeta::to_json() const {
    return json{{"kind", kind},
                {"k_treatments", k_treatments},
                {"d_x", d_x},
                {"d_s", d_s},
                {"tau_max", tau_max},
                {"seed", seed},
                {"dgp", dgp},
                {"ingest", ingest},
                {"standardization", standardizer.to_json()}};
}

DatasetMeta DatasetMeta::from_json(const json& j) {
    DatasetMeta m;
    m.kind = j.at("kind").get<std::string>();
    m.k_treatments = j.at("k_treatments").get<int>();
    m.d_x = j.at("d_x").get<int>();
    m.d_s = j.at("d_s").get<int>();
    m.tau_max = j.at("tau_max").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    m.dgp = j.at("dgp");
    m.ingest = j.at("ingest");
    m.standardizer = Standardizer::from_json(j.at("standardization"));
    return m;
}

json unit_to_json(const Unit& u) {
    json j;
    j["x"] = u.x;
    j["t"] = u.t;
    j["t_type"] = u.t_type;
    j["y"] = u.y;
    j["s"] = u.s;
    if (!u.cf.empty()) {
        json cf = json::object();
        for (const auto& [anchor, strategies] : u.cf) {
            json per = json::object();
            for (const auto& [label, ys] : strategies) per[label] = ys;
            cf[std::to_string(anchor)] = std::move(per);
        }
        j["cf"] = std::move(cf);
    }
    return j;
}

Unit unit_from_json(const json& j) {
    Unit u;
    u.x = j.at("x").get<std::vector<std::vector<double>>>();
    u.t = j.at("t").get<std::vector<int>>();
    u.t_type = j.at("t_type").get<std::vector<int>>();
    u.y = j.at("y").get<std::vector<double>>();
    u.s = j.at("s").get<std::vector<double>>();
    if (j.contains("cf")) {
        for (const auto& [anchor_str, strategies] : j.at("cf").items()) {
            const int anchor = std::stoi(anchor_str);
            for (const auto& [label, ys] : strategies.items())
                u.cf[anchor][label] = ys.get<std::vector<double>>();
        }
    }
    u.check_aligned();
    return u;
}

namespace {

void write_jsonl(const std::filesystem::path& path, const std::vector<Unit>& units) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const Unit& u : units) out << unit_to_json(u).dump() << "\n";
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Unit> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    std::vector<Unit> units;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            units.push_back(unit_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return units;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir.string());
    std::ofstream cfg(dir / "config.json");
    if (!cfg) throw IoError("cannot open for writing: " + (dir / "config.json").string());
    cfg << ds.meta.to_json().dump(2) << "\n";
    write_jsonl(dir / "train.jsonl", ds.train);
    write_jsonl(dir / "val.jsonl", ds.val);
    write_jsonl(dir / "test.jsonl", ds.test);
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream cfg(dir / "config.json");
    if (!cfg) throw IoError("cannot open: " + (dir / "config.json").string());
    json j;
    try {
        cfg >> j;
    } catch (const json::exception& e) {
        throw IoError((dir / "config.json").string() + ": " + e.what());
    }
    Dataset ds;
    ds.meta = DatasetMeta::from_json(j);
    ds.train = read_jsonl(dir / "train.jsonl");
    ds.val = read_jsonl(dir / "val.jsonl");
    ds.test = read_jsonl(dir / "test.jsonl");
    return ds;
}

Dataset subsample_crash_ratio(const Dataset& ds, double ratio, uint64_t seed, int min_units) {
    if (ratio < 0.0 || ratio > 1.0)
        throw ConfigError("crash ratio must be in [0,1], got " + std::to_string(ratio));
    std::vector<size_t> crash_idx, clean_idx;
    for (size_t i = 0; i < ds.train.size(); ++i)
        (ds.train[i].has_crash() ? crash_idx : clean_idx).push_back(i);
    Rng rng(derive_seed(seed, 0x5ab5a));
    rng.shuffle(crash_idx);
    rng.shuffle(clean_idx);
    // Largest feasible n whose rounded crash count fits both pools.
    size_t best_n = 0, best_c = 0;
    for (size_t n = static_cast<size_t>(min_units); n <= ds.train.size(); ++n) {
        const size_t c = static_cast<size_t>(std::llround(ratio * static_cast<double>(n)));
        if (c <= crash_idx.size() && n - c <= clean_idx.size()) {
            best_n = n;
            best_c = c;
        }
    }
    if (best_n == 0)
        throw UsageError("crash ratio " + std::to_string(ratio) +
                         " infeasible: train split has " + std::to_string(crash_idx.size()) +
                         " crash and " + std::to_string(clean_idx.size()) + " crash-free units");
    Dataset out;
    out.meta = ds.meta;
    for (size_t i = 0; i < best_c; ++i) out.train.push_back(ds.train[crash_idx[i]]);
    for (size_t i = 0; i < best_n - best_c; ++i) out.train.push_back(ds.train[clean_idx[i]]);
    out.meta.standardizer = Standardizer::fit(out.train);
    out.val = ds.val;
    out.test = ds.test;
    return out;
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

const std::vector<std::string> kRealCsvColumns = {
    "timestamp",      "milepost",       "direction",        "speed",
    "occupancy",      "volume",         "congestion_index", "max_lane_speed_diff",
    "speed_up1",      "speed_up2",      "speed_down1",      "speed_down2",
    "congestion_up1", "congestion_up2", "congestion_down1", "congestion_down2",
    "crash_type",     "day_of_week",    "weather"};

namespace {

// Days since 1970-01-01, civil calendar.
int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<int64_t>(doe) - 719468;
}

// Accepts "YYYY-MM-DD HH:MM[:SS]" or the 'T' separator; returns minutes
// since epoch.
int64_t parse_timestamp(const std::string& s) {
    int y, mo, d, h, mi;
    int sec = 0;
    int got = std::sscanf(s.c_str(), "%d-%d-%d %d:%d:%d", &y, &mo, &d, &h, &mi, &sec);
    if (got < 5) got = std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &sec);
    if (got < 5) throw IoError("unparsable timestamp '" + s + "'");
    return days_from_civil(y, mo, d) * 1440 + h * 60 + mi;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

struct RealRow {
    int64_t minutes;
    double milepost, direction;
    double speed;
    std::vector<double> tv;
    int crash_type;
    double day_of_week, weather;
};

}  // namespace

Dataset ingest_csv(const std::filesystem::path& csv, const IngestConfig& cfg,
                   IngestStats* stats_out) {
    if (cfg.window < 2) throw ConfigError("ingest: window must be >= 2");
    if (cfg.stride < 1) throw ConfigError("ingest: stride must be >= 1");
    std::ifstream in(csv);
    if (!in) throw IoError("cannot open: " + csv.string());
    std::string line;
    if (!std::getline(in, line)) throw IoError(csv.string() + ": empty file");
    const auto header = split_csv_line(line);
    std::vector<int> col(kRealCsvColumns.size(), -1);
    for (size_t c = 0; c < kRealCsvColumns.size(); ++c) {
        for (size_t h = 0; h < header.size(); ++h)
            if (header[h] == kRealCsvColumns[c]) col[c] = static_cast<int>(h);
        if (col[c] < 0)
            throw IoError(csv.string() + ": missing column '" + kRealCsvColumns[c] + "'");
    }
    auto field = [&](const std::vector<std::string>& row, size_t c) -> const std::string& {
        return row[static_cast<size_t>(col[c])];
    };

    IngestStats stats;
    std::map<std::pair<double, double>, std::vector<RealRow>> groups;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() < header.size())
            throw IoError(csv.string() + ":" + std::to_string(lineno) + ": expected " +
                          std::to_string(header.size()) + " fields, got " +
                          std::to_string(cells.size()));
        RealRow r;
        try {
            r.minutes = parse_timestamp(field(cells, 0));
            r.milepost = std::stod(field(cells, 1));
            r.direction = std::stod(field(cells, 2));
            r.speed = std::stod(field(cells, 3));
            const double occupancy = std::stod(field(cells, 4));
            const double volume = std::stod(field(cells, 5));
            const double congestion = std::stod(field(cells, 6));
            const double lane_diff = std::stod(field(cells, 7));
            std::vector<double> neighbors;
            for (size_t c = 8; c <= 15; ++c) neighbors.push_back(std::stod(field(cells, c)));
            r.crash_type = std::stoi(field(cells, 16));
            r.day_of_week = std::stod(field(cells, 17));
            r.weather = std::stod(field(cells, 18));
            if (r.crash_type < 0 || r.crash_type > 3)
                throw std::invalid_argument("crash_type outside 0..3");
            if (congestion <= 0.0)
                throw std::invalid_argument("congestion_index must be positive");
            const double tod = static_cast<double>(r.minutes % 1440) / 1440.0;
            r.tv = {tod, occupancy, volume, congestion, lane_diff};
            r.tv.insert(r.tv.end(), neighbors.begin(), neighbors.end());
        } catch (const std::exception& e) {
            throw IoError(csv.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        stats.rows += 1;
        groups[{r.milepost, r.direction}].push_back(r);
    }

    std::vector<Unit> units;
    for (auto& [key, rows] : groups) {
        std::stable_sort(rows.begin(), rows.end(),
                         [](const RealRow& a, const RealRow& b) { return a.minutes < b.minutes; });
        const int n = static_cast<int>(rows.size());
        for (int start = 0; start + cfg.window <= n; start += cfg.stride) {
            bool gap = false;
            for (int i = 1; i < cfg.window; ++i)
                if (rows[static_cast<size_t>(start + i)].minutes !=
                    rows[static_cast<size_t>(start + i - 1)].minutes + 5)
                    gap = true;
            if (gap) {
                stats.skipped_gap_windows += 1;
                continue;
            }
            Unit u;
            const RealRow& first = rows[static_cast<size_t>(start)];
            u.s = {first.milepost, first.direction, first.day_of_week, first.weather};
            for (int i = 0; i < cfg.window; ++i) {
                const RealRow& r = rows[static_cast<size_t>(start + i)];
                u.x.push_back(r.tv);
                u.y.push_back(r.speed);
                u.t.push_back(r.crash_type > 0 ? 1 : 0);
                u.t_type.push_back(r.crash_type);
            }
            units.push_back(std::move(u));
        }
    }
    stats.windows = static_cast<int>(units.size());
    if (units.empty()) throw IoError(csv.string() + ": no complete windows");

    Rng rng(derive_seed(cfg.seed, 0x16e5e57));
    rng.shuffle(units);
    const size_t n_train = static_cast<size_t>(cfg.train_frac * static_cast<double>(units.size()));
    const size_t n_val = static_cast<size_t>(cfg.val_frac * static_cast<double>(units.size()));
    Dataset ds;
    ds.meta.kind = "real";
    ds.meta.k_treatments = 4;
    ds.meta.d_x = static_cast<int>(units[0].x[0].size());
    ds.meta.d_s = 4;
    ds.meta.seed = cfg.seed;
    ds.meta.ingest = json{{"rows", stats.rows},
                          {"windows", stats.windows},
                          {"skipped_gap_windows", stats.skipped_gap_windows},
                          {"window", cfg.window},
                          {"stride", cfg.stride}};
    for (size_t i = 0; i < units.size(); ++i) {
        if (i < n_train)
            ds.train.push_back(std::move(units[i]));
        else if (i < n_train + n_val)
            ds.val.push_back(std::move(units[i]));
        else
            ds.test.push_back(std::move(units[i]));
    }
    if (ds.train.empty()) throw UsageError("ingest: no training units after split");
    ds.meta.standardizer = Standardizer::fit(ds.train);
    if (stats_out) *stats_out = stats;
    return ds;
}

}  // namespace msct
