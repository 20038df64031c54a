#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "msct/dgp.hpp"

using namespace msct;

namespace {

DgpConfig small_cfg() {
    DgpConfig cfg;
    cfg.seq_len = 40;
    cfg.seed = 11;
    return cfg;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("base speed") {
    DgpConfig cfg;  // psi 80, mu 6, sigma 1, amp 80
    SUBCASE("peak trough") {
        // phi(180) = 6 hits the peak center
        CHECK(phi_of_t(180) == 6.0);
        CHECK(base_speed(180, cfg) == doctest::Approx(80.0 - 80.0 * 0.3989422804).epsilon(1e-6));
    }
    SUBCASE("three sigma from the peak") {
        CHECK(phi_of_t(90) == 3.0);
        CHECK(base_speed(90, cfg) == doctest::Approx(79.6454).epsilon(1e-4));
    }
    SUBCASE("zero amplitude is constant") {
        cfg.amp = 0.0;
        for (int t : {0, 90, 180, 300, 719}) CHECK(base_speed(t, cfg) == 80.0);
    }
    SUBCASE("phi wraps every 360 steps") {
        CHECK(phi_of_t(360) == 0.0);
        CHECK(base_speed(540, cfg) == base_speed(180, cfg));
    }
}

TEST_CASE("dissipation") {
    CHECK(dissipation(1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(dissipation(2) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(dissipation(3) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(dissipation(5) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(dissipation(6) == 0.0);
    CHECK(dissipation(0) == 0.0);
    CHECK(dissipation(-3) == 0.0);
    SUBCASE("non-increasing over the support") {
        for (int d = 1; d < 5; ++d) CHECK(dissipation(d + 1) <= dissipation(d));
    }
}

TEST_CASE("confounded moving average") {
    SUBCASE("constant sequence") {
        std::vector<double> x(10, 3.25);
        for (int t = 0; t < 10; ++t)
            CHECK(confounded_moving_average(x, t, 4) == doctest::Approx(3.25).epsilon(1e-15));
    }
    SUBCASE("window of the last min(t,omega) values") {
        std::vector<double> x = {1, 2, 3, 4};
        CHECK(confounded_moving_average(x, 3, 3) == doctest::Approx(3.0).epsilon(1e-15));
    }
    SUBCASE("window clamps to a prefix mean") {
        std::vector<double> x = {1, 2, 3, 4};
        CHECK(confounded_moving_average(x, 2, 10) == doctest::Approx(2.0).epsilon(1e-15));
    }
    SUBCASE("errors") {
        std::vector<double> x = {1, 2};
        CHECK_THROWS_AS(confounded_moving_average(x, 5, 2), UsageError);
        CHECK_THROWS_AS(confounded_moving_average(x, 1, 0), UsageError);
    }
}

TEST_CASE("percentile threshold") {
    std::vector<double> s = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const double thr = percentile_threshold(s, 90.0);
    int above = 0;
    for (double v : s)
        if (v >= thr) ++above;
    CHECK(above == 1);
    CHECK_THROWS_AS(percentile_threshold({2, 2, 2, 2}, 90.0), ConfigError);
}

TEST_CASE("step speed worked examples") {
    DgpConfig cfg;
    cfg.amp = 0.0;  // Base(t) == 80 everywhere
    SUBCASE("reversion to trend without crash effects") {
        const double y = step_speed(55.0, 0.0, 0, 0.0, 10, {}, cfg, 0.0);
        CHECK(y == doctest::Approx(80.0).epsilon(1e-12));
    }
    SUBCASE("severe crash drop from base") {
        std::vector<int> crashes = {10};
        const double y = step_speed(80.0, 0.0, 1, 0.8, 10, crashes, cfg, 0.0);
        CHECK(y == doctest::Approx(16.0).epsilon(1e-12));
    }
    SUBCASE("slow recovery one step after a crash") {
        std::vector<int> crashes = {9};
        const double y = step_speed(40.0, 0.0, 0, 0.0, 10, crashes, cfg, 0.0);
        CHECK(y == doctest::Approx(40.0).epsilon(1e-12));  // Base * 0.5
    }
    SUBCASE("guards") {
        CHECK_THROWS_AS(step_speed(-1.0, 0.0, 0, 0.0, 10, {}, cfg, 0.0), NumericError);
    }
}

TEST_CASE("treatment assignment") {
    SUBCASE("percentile 100 yields no crashes") {
        DgpConfig cfg = small_cfg();
        cfg.crash_percentile = 100.0;
        Unit u = UnitSim(cfg, 99, std::nullopt).factual();
        for (int v : u.t) CHECK(v == 0);
    }
    SUBCASE("crash frequency matches the configured percentile within 2%") {
        DgpConfig cfg;
        cfg.seq_len = 60;
        const int n_units = 1700;  // ~1e5 assignable steps
        // pool the population moving averages, then assign with the shared
        // threshold exactly as the benchmark does
        std::vector<double> samples;
        std::vector<uint64_t> seeds;
        for (int i = 0; i < n_units; ++i) {
            seeds.push_back(unit_seed_for(123, "train", i));
            UnitSim sim(cfg, seeds.back(), 0.0);
            auto xb = unit_xbar_samples(sim.covariates(), cfg.omega);
            samples.insert(samples.end(), xb.begin(), xb.end());
        }
        const double thr = percentile_threshold(samples, cfg.crash_percentile);
        int64_t treated = 0, total = 0;
        for (uint64_t s : seeds) {
            Unit u = UnitSim(cfg, s, thr).factual();
            for (int t = 1; t < u.len(); ++t) {
                treated += u.t[static_cast<size_t>(t)];
                total += 1;
            }
        }
        const double frac = static_cast<double>(treated) / static_cast<double>(total);
        CHECK(total >= 100000);
        CHECK(frac == doctest::Approx(0.10).epsilon(0.2));  // 10% +/- 2 points
        CHECK(std::fabs(frac - 0.10) < 0.02);
    }
    SUBCASE("severe-type share matches p_c within 2 points over 1e4 crashes") {
        DgpConfig cfg;
        cfg.seq_len = 60;
        int severe = 0, crashes = 0;
        for (int i = 0; crashes < 10000; ++i) {
            REQUIRE(i < 40000);
            UnitSim sim(cfg, unit_seed_for(77, "train", i), std::nullopt);
            Unit u = sim.factual();
            for (int t = 0; t < u.len(); ++t)
                if (u.t[static_cast<size_t>(t)]) {
                    crashes += 1;
                    if (u.t_type[static_cast<size_t>(t)] == 3) severe += 1;
                }
        }
        const double share = static_cast<double>(severe) / static_cast<double>(crashes);
        CHECK(std::fabs(share - 0.10) < 0.02);
    }
}

TEST_CASE("unit generation") {
    SUBCASE("same seed twice gives identical units") {
        DgpConfig cfg = small_cfg();
        Unit a = UnitSim(cfg, 4242, std::nullopt).factual();
        Unit b = UnitSim(cfg, 4242, std::nullopt).factual();
        CHECK(a.y == b.y);
        CHECK(a.t == b.t);
        CHECK(a.t_type == b.t_type);
        CHECK(a.x == b.x);
    }
    SUBCASE("crash-free config tracks the base trend plus noise") {
        DgpConfig cfg = small_cfg();
        cfg.crash_percentile = 100.0;
        UnitSim sim(cfg, 5, std::nullopt);
        Unit u = sim.factual();
        // manual crash-free recursion
        double y = base_speed(0, cfg);
        for (int t = 1; t < cfg.seq_len; ++t) {
            y = (cfg.beta1 * sim.covariates()[static_cast<size_t>(t)] +
                 sim.noise()[static_cast<size_t>(t)]) *
                    y +
                base_speed(t, cfg);
            y = std::max(y, cfg.y_floor);
            CHECK(u.y[static_cast<size_t>(t)] == y);
        }
    }
    SUBCASE("fixed point: flat trend, no noise, no crashes, no covariate effect") {
        DgpConfig cfg = small_cfg();
        cfg.amp = 0.0;
        cfg.eps_std = 0.0;
        cfg.beta1 = 0.0;
        cfg.crash_percentile = 100.0;
        Unit u = UnitSim(cfg, 9, std::nullopt).factual();
        for (double v : u.y) CHECK(v == 80.0);
    }
    SUBCASE("population mean off-peak stays near the max basic speed") {
        DgpConfig cfg;
        cfg.seq_len = 60;
        double sum = 0;
        int n = 0;
        for (int i = 0; i < 1000; ++i) {
            Unit u = UnitSim(cfg, unit_seed_for(321, "train", i), std::nullopt).factual();
            for (int t = 50; t < 60; ++t) {  // phi in [1.67, 1.97], far from the peak
                sum += u.y[static_cast<size_t>(t)];
                n += 1;
            }
        }
        const double mean = sum / n;
        CHECK(mean >= 75.0);
        CHECK(mean <= 82.0);
    }
}

TEST_CASE("counterfactual simulation") {
    DgpConfig cfg;
    cfg.seq_len = 40;
    cfg.seed = 31;
    SUBCASE("strategy sets") {
        auto s2 = single_sliding_strategies(2);
        REQUIRE(s2.size() == 3);
        CHECK(s2[0].treat == std::vector<int>{1, 0});
        CHECK(s2[1].treat == std::vector<int>{0, 1});
        CHECK(s2[2].treat == std::vector<int>{0, 0});
        CHECK(s2[2].label == kNoCrashLabel);
        CHECK(single_sliding_strategies(5).size() == 6);
    }
    SUBCASE("consistency: matching branch equals the factual trajectory exactly") {
        UnitSim sim(cfg, 8, std::nullopt);
        Unit u = sim.factual();
        for (int anchor = 1; anchor <= cfg.seq_len - 1 - cfg.tau_max; ++anchor) {
            std::vector<int> factual_treat;
            for (int k = 1; k <= cfg.tau_max; ++k)
                factual_treat.push_back(u.t[static_cast<size_t>(anchor + k)]);
            auto ys = sim.branch(u, anchor, factual_treat, cfg.tau_max);
            for (int k = 1; k <= cfg.tau_max; ++k)
                CHECK(ys[static_cast<size_t>(k - 1)] == u.y[static_cast<size_t>(anchor + k)]);
        }
    }
    SUBCASE("all-zero branch reproduces a crash-free factual window") {
        UnitSim sim(cfg, 8, std::nullopt);
        Unit u = sim.factual();
        int anchor = -1;
        for (int a = 1; a <= cfg.seq_len - 1 - cfg.tau_max; ++a) {
            bool clean = true;
            for (int k = 1; k <= cfg.tau_max; ++k)
                if (u.t[static_cast<size_t>(a + k)]) clean = false;
            if (clean) {
                anchor = a;
                break;
            }
        }
        REQUIRE(anchor >= 0);
        std::vector<int> zero(static_cast<size_t>(cfg.tau_max), 0);
        auto ys = sim.branch(u, anchor, zero, cfg.tau_max);
        for (int k = 1; k <= cfg.tau_max; ++k)
            CHECK(ys[static_cast<size_t>(k - 1)] == u.y[static_cast<size_t>(anchor + k)]);
    }
    SUBCASE("crash and clean branches diverge by exactly beta2 * Y(anchor)") {
        UnitSim sim(cfg, 8, std::nullopt);
        Unit u = sim.factual();
        // anchor with no factual crash within the impact window
        int anchor = -1;
        for (int a = 6; a <= cfg.seq_len - 1 - cfg.tau_max; ++a) {
            bool clean = true;
            for (int b = a - cfg.impact_duration + 1; b <= a; ++b)
                if (u.t[static_cast<size_t>(b)]) clean = false;
            if (clean) {
                anchor = a;
                break;
            }
        }
        REQUIRE(anchor >= 0);
        std::vector<int> crash0(static_cast<size_t>(cfg.tau_max), 0);
        crash0[0] = 1;
        std::vector<int> zero(static_cast<size_t>(cfg.tau_max), 0);
        auto y1 = sim.branch(u, anchor, crash0, 1);
        auto y0 = sim.branch(u, anchor, zero, 1);
        const double beta2 =
            cfg.beta2_menu[static_cast<size_t>(sim.crash_type_at(anchor + 1) - 1)];
        const double expect = beta2 * u.y[static_cast<size_t>(anchor)];
        CHECK(y0[0] - y1[0] == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("anchor too close to the end is a range error") {
        UnitSim sim(cfg, 8, std::nullopt);
        Unit u = sim.factual();
        std::vector<int> zero(static_cast<size_t>(cfg.tau_max), 0);
        CHECK_THROWS_AS(sim.branch(u, cfg.seq_len - 2, zero, cfg.tau_max), UsageError);
    }
}

TEST_CASE("benchmark build and round trip") {
    DgpConfig cfg;
    cfg.seq_len = 20;
    cfg.tau_max = 3;
    cfg.seed = 55;
    BenchmarkSizes sizes{12, 3, 3};
    Dataset ds = build_benchmark(cfg, sizes);
    SUBCASE("split sizes and factual-only training data") {
        CHECK(ds.train.size() == 12);
        CHECK(ds.val.size() == 3);
        CHECK(ds.test.size() == 3);
        for (const Unit& u : ds.train) CHECK(u.cf.empty());
        for (const Unit& u : ds.test) {
            CHECK(!u.cf.empty());
            for (const auto& [anchor, strategies] : u.cf) {
                CHECK(strategies.size() == 4);  // tau_max sliding + no-crash
                for (const auto& [label, ys] : strategies)
                    CHECK(ys.size() == static_cast<size_t>(cfg.tau_max));
            }
        }
    }
    SUBCASE("counterfactual coverage: both effect branches at every anchor") {
        for (const Unit& u : ds.test)
            for (const auto& [anchor, strategies] : u.cf) {
                CHECK(strategies.count(crash_at_label(0)) == 1);
                CHECK(strategies.count(kNoCrashLabel) == 1);
            }
    }
    SUBCASE("threshold recorded in the meta") {
        CHECK(ds.meta.dgp.contains("resolved_threshold"));
    }
    SUBCASE("save/load round trip is bitwise exact") {
        namespace fs = std::filesystem;
        const fs::path dir1 = fs::temp_directory_path() / "msct_dgp_rt1";
        const fs::path dir2 = fs::temp_directory_path() / "msct_dgp_rt2";
        fs::remove_all(dir1);
        fs::remove_all(dir2);
        save_dataset(ds, dir1);
        Dataset loaded = load_dataset(dir1);
        for (size_t i = 0; i < ds.test.size(); ++i) {
            CHECK(loaded.test[i].y == ds.test[i].y);
            CHECK(loaded.test[i].x == ds.test[i].x);
            CHECK(loaded.test[i].cf == ds.test[i].cf);
        }
        save_dataset(loaded, dir2);
        for (const char* f : {"config.json", "train.jsonl", "val.jsonl", "test.jsonl"})
            CHECK(slurp(dir1 / f) == slurp(dir2 / f));
        fs::remove_all(dir1);
        fs::remove_all(dir2);
    }
    SUBCASE("rebuild is deterministic") {
        Dataset ds2 = build_benchmark(cfg, sizes);
        for (size_t i = 0; i < ds.train.size(); ++i) CHECK(ds2.train[i].y == ds.train[i].y);
        for (size_t i = 0; i < ds.val.size(); ++i) CHECK(ds2.val[i].cf == ds.val[i].cf);
    }
}

TEST_CASE("config validation") {
    DgpConfig cfg;
    cfg.p_c = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DgpConfig{};
    cfg.omega = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DgpConfig{};
    cfg.crash_percentile = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DgpConfig{};
    cfg.assignment = "sometimes";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DgpConfig{};
    CHECK_NOTHROW(cfg.validate());
    // json round trip preserves every field
    DgpConfig back = DgpConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
}
