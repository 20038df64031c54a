#include "msct/dgp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace msct {

namespace {
constexpr uint64_t kTagUnit = 0x756e6974;    // "unit"
constexpr uint64_t kTagX = 0x78;             // "x"
constexpr uint64_t kTagEps = 0x657073;       // "eps"
constexpr uint64_t kTagType = 0x74797065;    // "type"
constexpr uint64_t kTagAssign = 0x61736e;    // "asn"
}  // namespace

void DgpConfig::validate() const {
    if (beta2_menu.empty() || p_c.size() != beta2_menu.size())
        throw ConfigError("dgp: beta2_menu and p_c must be non-empty and equally sized");
    double sum = 0;
    for (double p : p_c) {
        if (p < 0) throw ConfigError("dgp: p_c entries must be non-negative");
        sum += p;
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("dgp: p_c must sum to 1");
    for (double b : beta2_menu)
        if (b <= 0) throw ConfigError("dgp: beta2_menu entries must be positive");
    if (sigma <= 0) throw ConfigError("dgp: sigma must be positive");
    if (omega < 1) throw ConfigError("dgp: omega must be >= 1");
    if (!(crash_percentile > 0 && crash_percentile <= 100))
        throw ConfigError("dgp: crash_percentile must be in (0,100]");
    if (eps_std < 0) throw ConfigError("dgp: eps_std must be non-negative");
    if (seq_len < 2) throw ConfigError("dgp: seq_len must be >= 2");
    if (impact_duration < 2) throw ConfigError("dgp: impact_duration must be >= 2");
    if (tau_max < 2) throw ConfigError("dgp: tau_max must be >= 2");
    if (tau_max + 1 >= seq_len) throw ConfigError("dgp: tau_max too large for seq_len");
    if (assignment != "confounded" && assignment != "random")
        throw ConfigError("dgp: assignment must be 'confounded' or 'random'");
}

json DgpConfig::to_json() const {
    return json{{"beta1", beta1},
                {"beta2_menu", beta2_menu},
                {"p_c", p_c},
                {"psi", psi},
                {"mu", mu},
                {"sigma", sigma},
                {"amp", amp},
                {"omega", omega},
                {"crash_percentile", crash_percentile},
                {"eps_std", eps_std},
                {"seq_len", seq_len},
                {"impact_duration", impact_duration},
                {"tau_max", tau_max},
                {"seed", seed},
                {"y_floor", y_floor},
                {"assignment", assignment}};
}

DgpConfig DgpConfig::from_json(const json& j) {
    DgpConfig c;
    c.beta1 = j.at("beta1").get<double>();
    c.beta2_menu = j.at("beta2_menu").get<std::vector<double>>();
    c.p_c = j.at("p_c").get<std::vector<double>>();
    c.psi = j.at("psi").get<double>();
    c.mu = j.at("mu").get<double>();
    c.sigma = j.at("sigma").get<double>();
    c.amp = j.at("amp").get<double>();
    c.omega = j.at("omega").get<int>();
    c.crash_percentile = j.at("crash_percentile").get<double>();
    c.eps_std = j.at("eps_std").get<double>();
    c.seq_len = j.at("seq_len").get<int>();
    c.impact_duration = j.at("impact_duration").get<int>();
    c.tau_max = j.at("tau_max").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.y_floor = j.at("y_floor").get<double>();
    c.assignment = j.at("assignment").get<std::string>();
    c.validate();
    return c;
}

std::string crash_at_label(int k) { return "crash_at_" + std::to_string(k); }

std::vector<InterventionStrategy> single_sliding_strategies(int tau_max) {
    std::vector<InterventionStrategy> out;
    for (int k = 0; k < tau_max; ++k) {
        InterventionStrategy s;
        s.treat.assign(static_cast<size_t>(tau_max), 0);
        s.treat[static_cast<size_t>(k)] = 1;
        s.label = crash_at_label(k);
        out.push_back(std::move(s));
    }
    out.push_back(InterventionStrategy{std::vector<int>(static_cast<size_t>(tau_max), 0),
                                       kNoCrashLabel});
    return out;
}

double phi_of_t(int t) { return static_cast<double>(t % 360) / 30.0; }

double base_speed(int t, const DgpConfig& cfg) {
    const double phi = phi_of_t(t);
    const double z = (phi - cfg.mu) / cfg.sigma;
    const double peak = std::exp(-0.5 * z * z) / (cfg.sigma * std::sqrt(2.0 * M_PI));
    return cfg.psi - cfg.amp * peak;
}

double dissipation(int d, int impact_duration) {
    if (d < 1 || d > impact_duration) return 0.0;
    // 1.25 - 0.25 d for a 5-step impact; generalizes to g(1)=1, g(D)=0.
    const double dd = static_cast<double>(impact_duration);
    const double c = dd / (dd - 1.0);
    return c * (1.0 - static_cast<double>(d) / dd);
}

double confounded_moving_average(std::span<const double> x, int t, int omega) {
    if (t < 0 || t >= static_cast<int>(x.size()))
        throw UsageError("moving average: position " + std::to_string(t) + " out of range");
    if (omega < 1) throw UsageError("moving average: empty window");
    const int lo = std::max(0, t - omega + 1);
    double s = 0;
    for (int i = lo; i <= t; ++i) s += x[static_cast<size_t>(i)];
    return s / static_cast<double>(t - lo + 1);
}

double percentile_threshold(std::vector<double> samples, double pct) {
    if (samples.empty()) throw UsageError("percentile: no samples");
    std::sort(samples.begin(), samples.end());
    if (samples.front() == samples.back())
        throw ConfigError("percentile: degenerate moving-average distribution");
    const double rank = pct / 100.0 * static_cast<double>(samples.size() - 1);
    const size_t lo = static_cast<size_t>(rank);
    const size_t hi = std::min(lo + 1, samples.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return samples[lo] * (1.0 - frac) + samples[hi] * frac;
}

double step_speed(double y_prev, double x_t, int t_t, double beta2_t, int t,
                  std::span<const int> crash_times, const DgpConfig& cfg, double eps_t) {
    if (y_prev <= 0) throw NumericError("step_speed: non-positive previous speed");
    const double base_prev = base_speed(t - 1, cfg);
    const double base_now = base_speed(t, cfg);
    if (base_prev <= 0) throw NumericError("step_speed: non-positive base speed");
    int last_crash = -1;
    for (int c : crash_times)
        if (c <= t) last_crash = std::max(last_crash, c);
    const int d = last_crash < 0 ? cfg.impact_duration + 1 : t - last_crash;
    const double g = dissipation(d, cfg.impact_duration);
    const double ratio = y_prev / base_prev;
    if (ratio <= 0) throw NumericError("step_speed: non-positive recovery ratio");
    const double causal = (cfg.beta1 * x_t - beta2_t * static_cast<double>(t_t) + eps_t) * y_prev;
    const double trend = base_now * std::pow(ratio, g);
    return std::max(causal + trend, cfg.y_floor);
}

std::vector<double> unit_xbar_samples(const std::vector<double>& x, int omega) {
    std::vector<double> out;
    for (int t = 1; t < static_cast<int>(x.size()); ++t)
        out.push_back(confounded_moving_average(x, t, omega));
    return out;
}

uint64_t unit_seed_for(uint64_t master_seed, const std::string& split, int index) {
    return derive_seed(derive_seed(master_seed, kTagUnit, fnv1a64(split)),
                       static_cast<uint64_t>(index));
}

// ---------------------------------------------------------------------------
// UnitSim
// ---------------------------------------------------------------------------

UnitSim::UnitSim(const DgpConfig& cfg, uint64_t unit_seed, std::optional<double> threshold)
    : cfg_(cfg), unit_seed_(unit_seed) {
    cfg_.validate();
    const int L = cfg_.seq_len;
    Rng rx(derive_seed(unit_seed, kTagX));
    x_.resize(static_cast<size_t>(L));
    for (int t = 0; t < L; ++t) x_[static_cast<size_t>(t)] = rx.normal();
    Rng re(derive_seed(unit_seed, kTagEps));
    eps_.resize(static_cast<size_t>(L));
    for (int t = 0; t < L; ++t) eps_[static_cast<size_t>(t)] = re.normal(0.0, cfg_.eps_std);
    Rng ra(derive_seed(unit_seed, kTagAssign));
    const double rate = (100.0 - cfg_.crash_percentile) / 100.0;
    assign_coin_.resize(static_cast<size_t>(L));
    for (int t = 0; t < L; ++t)
        assign_coin_[static_cast<size_t>(t)] = ra.bernoulli(rate) ? 1 : 0;
    if (threshold) {
        threshold_ = *threshold;
    } else if (cfg_.crash_percentile >= 100.0) {
        // Percentile 100 means no step ever crosses the threshold.
        threshold_ = std::numeric_limits<double>::infinity();
    } else {
        // Standalone use resolves the percentile over this unit's own samples.
        threshold_ = percentile_threshold(unit_xbar_samples(x_, cfg_.omega),
                                          cfg_.crash_percentile);
    }
}

int UnitSim::crash_type_at(int t) const {
    Rng rt(derive_seed(derive_seed(unit_seed_, kTagType), static_cast<uint64_t>(t)));
    return rt.categorical(cfg_.p_c) + 1;
}

Unit UnitSim::factual() const {
    const int L = cfg_.seq_len;
    Unit u;
    u.x.resize(static_cast<size_t>(L));
    for (int t = 0; t < L; ++t) u.x[static_cast<size_t>(t)] = {x_[static_cast<size_t>(t)]};
    u.t.assign(static_cast<size_t>(L), 0);
    u.t_type.assign(static_cast<size_t>(L), 0);
    u.y.assign(static_cast<size_t>(L), 0.0);
    u.y[0] = base_speed(0, cfg_);
    std::vector<int> crash_times;
    for (int t = 1; t < L; ++t) {
        int treat = 0;
        if (cfg_.assignment == "confounded") {
            treat = confounded_moving_average(x_, t, cfg_.omega) >= threshold_ ? 1 : 0;
        } else {
            treat = assign_coin_[static_cast<size_t>(t)];
        }
        double beta2 = 0.0;
        if (treat) {
            const int type = crash_type_at(t);
            u.t_type[static_cast<size_t>(t)] = type;
            beta2 = cfg_.beta2_menu[static_cast<size_t>(type - 1)];
            crash_times.push_back(t);
        }
        u.t[static_cast<size_t>(t)] = treat;
        u.y[static_cast<size_t>(t)] =
            step_speed(u.y[static_cast<size_t>(t - 1)], x_[static_cast<size_t>(t)], treat, beta2,
                       t, crash_times, cfg_, eps_[static_cast<size_t>(t)]);
    }
    return u;
}

std::vector<double> UnitSim::branch(const Unit& factual_unit, int anchor,
                                    std::span<const int> treat, int horizons) const {
    const int L = cfg_.seq_len;
    if (anchor < 0 || anchor + horizons > L - 1)
        throw UsageError("branch: anchor " + std::to_string(anchor) + " with " +
                         std::to_string(horizons) + " horizons exceeds sequence length " +
                         std::to_string(L));
    // Branch timeline starts with the factual crashes up to the anchor.
    std::vector<int> crash_times;
    for (int t = 1; t <= anchor; ++t)
        if (factual_unit.t[static_cast<size_t>(t)]) crash_times.push_back(t);
    std::vector<double> out;
    double y_prev = factual_unit.y[static_cast<size_t>(anchor)];
    for (int k = 1; k <= horizons; ++k) {
        const int t = anchor + k;
        const int tt = (k - 1 < static_cast<int>(treat.size())) ? treat[static_cast<size_t>(k - 1)]
                                                                : 0;
        double beta2 = 0.0;
        if (tt) {
            beta2 = cfg_.beta2_menu[static_cast<size_t>(crash_type_at(t) - 1)];
            crash_times.push_back(t);
        }
        const double y = step_speed(y_prev, x_[static_cast<size_t>(t)], tt, beta2, t, crash_times,
                                    cfg_, eps_[static_cast<size_t>(t)]);
        out.push_back(y);
        y_prev = y;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

Dataset build_benchmark(const DgpConfig& cfg, const BenchmarkSizes& sizes) {
    cfg.validate();
    if (sizes.train < 1 || sizes.val < 1 || sizes.test < 1)
        throw ConfigError("benchmark: split sizes must be >= 1");

    const std::vector<std::pair<std::string, int>> splits = {
        {"train", sizes.train}, {"val", sizes.val}, {"test", sizes.test}};

    // Pass 1: pool the moving-average samples of the whole population to
    // resolve the treatment threshold.
    double threshold = 0.0;
    if (cfg.assignment == "confounded") {
        if (cfg.crash_percentile >= 100.0) {
            threshold = std::numeric_limits<double>::infinity();
        } else {
            std::vector<double> samples;
            for (const auto& [split, count] : splits) {
                for (int i = 0; i < count; ++i) {
                    Rng rx(derive_seed(unit_seed_for(cfg.seed, split, i), kTagX));
                    std::vector<double> x(static_cast<size_t>(cfg.seq_len));
                    for (int t = 0; t < cfg.seq_len; ++t) x[static_cast<size_t>(t)] = rx.normal();
                    const auto xb = unit_xbar_samples(x, cfg.omega);
                    samples.insert(samples.end(), xb.begin(), xb.end());
                }
            }
            threshold = percentile_threshold(std::move(samples), cfg.crash_percentile);
        }
    }

    Dataset ds;
    ds.meta.kind = "synthetic";
    ds.meta.k_treatments = 2;
    ds.meta.d_x = 1;
    ds.meta.d_s = 0;
    ds.meta.tau_max = cfg.tau_max;
    ds.meta.seed = cfg.seed;
    ds.meta.dgp = cfg.to_json();
    if (std::isfinite(threshold)) ds.meta.dgp["resolved_threshold"] = threshold;
    ds.meta.ingest = json::object();

    const auto strategies = single_sliding_strategies(cfg.tau_max);
    for (const auto& [split, count] : splits) {
        std::vector<Unit>& dst =
            split == "train" ? ds.train : (split == "val" ? ds.val : ds.test);
        dst.resize(static_cast<size_t>(count));
        const bool with_cf = split != "train";
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < count; ++i) {
            UnitSim sim(cfg, unit_seed_for(cfg.seed, split, i),
                        cfg.assignment == "confounded" ? std::optional<double>(threshold)
                                                       : std::nullopt);
            Unit u = sim.factual();
            if (with_cf) {
                for (int anchor = 1; anchor <= cfg.seq_len - 1 - cfg.tau_max; ++anchor) {
                    auto& per_anchor = u.cf[anchor];
                    for (const auto& st : strategies)
                        per_anchor[st.label] = sim.branch(u, anchor, st.treat, cfg.tau_max);
                }
            }
            dst[static_cast<size_t>(i)] = std::move(u);
        }
    }
    ds.meta.standardizer = Standardizer::fit(ds.train);
    return ds;
}

}  // namespace msct
