#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "msct/common.hpp"
#include "msct/rng.hpp"

namespace msct {

using json = nlohmann::json;

// One time-series unit: aligned covariate/treatment/outcome sequences plus
// static features. Val/test units additionally carry the simulated potential
// outcomes per anchor and intervention strategy.
struct Unit {
    std::vector<std::vector<double>> x;  // [len][d_x]
    std::vector<int> t;                  // 0/1 crash indicator
    std::vector<int> t_type;             // 0 = none, k = crash class k
    std::vector<double> y;               // speed
    std::vector<double> s;               // static features
    // anchor -> strategy label -> outcomes for horizons 1..tau_max
    std::map<int, std::map<std::string, std::vector<double>>> cf;

    int len() const { return static_cast<int>(y.size()); }
    bool has_crash() const {
        for (int v : t)
            if (v) return true;
        return false;
    }
    void check_aligned() const;
};

struct Standardizer {
    std::vector<double> x_mean, x_std;
    double y_mean = 0.0, y_std = 1.0;
    std::vector<double> s_mean, s_std;

    static Standardizer fit(const std::vector<Unit>& train_units);
    static Standardizer identity(int d_x, int d_s);

    double norm_y(double v) const { return (v - y_mean) / y_std; }
    double denorm_y(double v) const { return v * y_std + y_mean; }
    double norm_x(int dim, double v) const { return (v - x_mean[dim]) / x_std[dim]; }
    double norm_s(int dim, double v) const { return (v - s_mean[dim]) / s_std[dim]; }

    json to_json() const;
    static Standardizer from_json(const json& j);
};

struct DatasetMeta {
    std::string kind = "synthetic";  // or "real"
    int k_treatments = 2;
    int d_x = 1;
    int d_s = 0;
    int tau_max = 5;
    uint64_t seed = 1;
    json dgp;       // generator config echo (synthetic only)
    json ingest;    // ingestion stats (real only)
    Standardizer standardizer;

    json to_json() const;
    static DatasetMeta from_json(const json& j);
};

struct Dataset {
    DatasetMeta meta;
    std::vector<Unit> train, val, test;
};

json unit_to_json(const Unit& u);
Unit unit_from_json(const json& j);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Keeps val/test intact and subsamples the training split so that the given
// fraction of training units contains at least one crash. Fails when the
// split cannot supply enough units of either kind.
Dataset subsample_crash_ratio(const Dataset& ds, double ratio, uint64_t seed,
                              int min_units = 20);

// ---------------------------------------------------------------------------
// Real-world CSV ingestion
// ---------------------------------------------------------------------------

struct IngestConfig {
    int window = 60;          // sliding window length (5-min bins)
    int stride = 60;          // window stride
    double train_frac = 0.8;  // remaining mass splits evenly into val/test
    double val_frac = 0.1;
    uint64_t seed = 1;
};

struct IngestStats {
    int rows = 0;
    int windows = 0;
    int skipped_gap_windows = 0;
    int bad_rows = 0;
};

// Expected header columns (exact names) of the incident-matched traffic CSV.
extern const std::vector<std::string> kRealCsvColumns;

Dataset ingest_csv(const std::filesystem::path& csv, const IngestConfig& cfg,
                   IngestStats* stats_out = nullptr);

}  // namespace msct
