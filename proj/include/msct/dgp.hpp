#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msct/dataset.hpp"
#include "msct/rng.hpp"

namespace msct {

// Synthetic traffic-speed generator. Per time step, covariate X is drawn
// first, the crash indicator T follows from the confounder moving average,
// and the speed Y closes the step:
//   Y(t) = (b1*X_t - b2*T_t + eps_t) * Y(t-1)
//        + Base(t) * (Y(t-1)/Base(t-1))^g(d)
struct DgpConfig {
    double beta1 = 0.1;
    std::vector<double> beta2_menu = {0.2, 0.4, 0.8};
    std::vector<double> p_c = {0.6, 0.3, 0.1};
    double psi = 80.0;    // max basic speed
    double mu = 6.0;      // peak center on the phi scale
    double sigma = 1.0;   // peak width
    double amp = 80.0;    // basic-trend amplitude
    int omega = 5;        // confounder moving-average window
    double crash_percentile = 90.0;
    double eps_std = 0.05;
    int seq_len = 60;
    int impact_duration = 5;
    int tau_max = 5;
    uint64_t seed = 1;
    double y_floor = 0.01;  // clamp keeping the recovery ratio positive
    // "confounded" thresholds the covariate moving average; "random" draws an
    // independent coin at the same marginal rate.
    std::string assignment = "confounded";

    void validate() const;
    json to_json() const;
    static DgpConfig from_json(const json& j);
};

// Hypothetical future treatment vector; element k drives the outcome at
// horizon k+1 from the anchor.
struct InterventionStrategy {
    std::vector<int> treat;
    std::string label;
};

// Sliding single-crash vectors plus the all-zero vector: tau_max+1 in total.
std::vector<InterventionStrategy> single_sliding_strategies(int tau_max);

constexpr const char* kNoCrashLabel = "no_crash";
std::string crash_at_label(int k);

// ---- generator pieces ----

double phi_of_t(int t);                       // (t % 360) / 30
double base_speed(int t, const DgpConfig& cfg);
double dissipation(int d, int impact_duration = 5);

// Mean of the last min(t+1, omega) covariate values ending at 0-based
// position t.
double confounded_moving_average(std::span<const double> x, int t, int omega);

// Linear-interpolated quantile of the pooled moving-average samples.
double percentile_threshold(std::vector<double> samples, double pct);

// One recursion step. crash_times lists the crash positions (<= t) on the
// branch's own timeline including a crash at t itself.
double step_speed(double y_prev, double x_t, int t_t, double beta2_t, int t,
                  std::span<const int> crash_times, const DgpConfig& cfg, double eps_t);

// Deterministic per-unit simulator: derives independent substreams for
// covariates, noise, crash types, and random assignment from the unit seed,
// so factual and counterfactual branches reuse identical draws.
class UnitSim {
public:
    UnitSim(const DgpConfig& cfg, uint64_t unit_seed, std::optional<double> threshold);

    const DgpConfig& config() const { return cfg_; }
    double threshold() const { return threshold_; }
    const std::vector<double>& covariates() const { return x_; }
    const std::vector<double>& noise() const { return eps_; }

    // Stable per-time crash class (1-based menu index); any branch placing a
    // crash at time t sees the same class, which keeps the matching branch
    // identical to the factual trajectory.
    int crash_type_at(int t) const;

    Unit factual() const;

    // Potential outcomes for horizons 1..h from the factual state at
    // `anchor`; treat[k] drives the outcome at anchor+1+k, zero beyond the
    // strategy length. Covariates and noise are shared across branches.
    std::vector<double> branch(const Unit& factual_unit, int anchor, std::span<const int> treat,
                               int horizons) const;

private:
    DgpConfig cfg_;
    uint64_t unit_seed_;
    double threshold_;
    std::vector<double> x_, eps_;
    std::vector<int> assign_coin_;  // random-assignment draws per step
};

// Moving-average samples (positions >= 1) of one unit's covariate stream;
// used to pool the population threshold.
std::vector<double> unit_xbar_samples(const std::vector<double>& x, int omega);

uint64_t unit_seed_for(uint64_t master_seed, const std::string& split, int index);

struct BenchmarkSizes {
    int train = 1000;
    int val = 100;
    int test = 100;
};

// Full benchmark: factual-only training split, factual + counterfactual
// expansion for every feasible anchor on val/test. The resolved treatment
// threshold is recorded in the dataset meta.
Dataset build_benchmark(const DgpConfig& cfg, const BenchmarkSizes& sizes);

}  // namespace msct
