#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "msct/dataset.hpp"

using namespace msct;
namespace fs = std::filesystem;

namespace {

// 19-column toy CSV: one location, contiguous 5-min bins except one gap.
void write_toy_csv(const fs::path& p, int rows, bool with_gap, bool drop_column = false) {
    std::ofstream out(p);
    for (size_t c = 0; c < kRealCsvColumns.size(); ++c) {
        if (drop_column && kRealCsvColumns[c] == "volume") continue;
        if (c) out << ",";
        out << kRealCsvColumns[c];
    }
    out << "\n";
    int minute = 0;
    for (int i = 0; i < rows; ++i) {
        if (with_gap && i == rows / 2 + 5) minute += 10;  // one missing bin mid-window
        const int hh = (minute / 60) % 24, mm = minute % 60;
        char ts[32];
        std::snprintf(ts, sizeof(ts), "2020-03-01 %02d:%02d", hh, mm);
        const int crash = (i % 17 == 5) ? (i % 3) + 1 : 0;
        out << ts << ",139.5,1," << 60.0 + (i % 7) << "," << 0.1 + 0.001 * i << "," << 100 + i
            << "," << 0.9 << "," << 3.5 << ",58,57,61,62,0.8,0.85,0.95,0.92," << crash << ",3,1\n";
        minute += 5;
    }
    if (drop_column) return;
}

Unit toy_unit(int len, int crash_at = -1) {
    Unit u;
    for (int i = 0; i < len; ++i) {
        u.x.push_back({static_cast<double>(i)});
        u.y.push_back(50.0 + i);
        const bool crash = i == crash_at;
        u.t.push_back(crash ? 1 : 0);
        u.t_type.push_back(crash ? 2 : 0);
    }
    return u;
}

}  // namespace

TEST_CASE("unit alignment checks") {
    Unit u = toy_unit(5);
    CHECK_NOTHROW(u.check_aligned());
    u.t.pop_back();
    CHECK_THROWS_AS(u.check_aligned(), ShapeError);
    Unit v = toy_unit(5);
    v.t[2] = 3;
    CHECK_THROWS_AS(v.check_aligned(), ShapeError);
}

TEST_CASE("standardizer") {
    std::vector<Unit> units = {toy_unit(10), toy_unit(10)};
    Standardizer st = Standardizer::fit(units);
    CHECK(st.y_mean == doctest::Approx(54.5));
    CHECK(st.norm_y(st.y_mean) == doctest::Approx(0.0));
    CHECK(st.denorm_y(st.norm_y(61.0)) == doctest::Approx(61.0).epsilon(1e-12));
    Standardizer rt = Standardizer::from_json(st.to_json());
    CHECK(rt.to_json() == st.to_json());
}

TEST_CASE("unit json round trip keeps the exact field names") {
    Unit u = toy_unit(4, 2);
    u.cf[1]["no_crash"] = {51.0, 52.0};
    json j = unit_to_json(u);
    CHECK(j.contains("x"));
    CHECK(j.contains("t"));
    CHECK(j.contains("t_type"));
    CHECK(j.contains("y"));
    CHECK(j.contains("s"));
    CHECK(j.contains("cf"));
    Unit back = unit_from_json(j);
    CHECK(back.y == u.y);
    CHECK(back.cf == u.cf);
}

TEST_CASE("crash ratio subsampling") {
    Dataset ds;
    ds.meta.d_x = 1;
    for (int i = 0; i < 40; ++i) ds.train.push_back(toy_unit(8, i < 16 ? 3 : -1));
    ds.val.push_back(toy_unit(8));
    ds.test.push_back(toy_unit(8));
    SUBCASE("ratio zero removes crash units from training") {
        Dataset out = subsample_crash_ratio(ds, 0.0, 7, 5);
        CHECK(!out.train.empty());
        for (const Unit& u : out.train) CHECK(!u.has_crash());
        CHECK(out.val.size() == 1);
    }
    SUBCASE("target ratio is hit") {
        Dataset out = subsample_crash_ratio(ds, 0.3, 7, 5);
        int crash = 0;
        for (const Unit& u : out.train) crash += u.has_crash() ? 1 : 0;
        const double got = static_cast<double>(crash) / static_cast<double>(out.train.size());
        CHECK(std::fabs(got - 0.3) < 0.05);
    }
    SUBCASE("determinism under a fixed seed") {
        Dataset a = subsample_crash_ratio(ds, 0.4, 9, 5);
        Dataset b = subsample_crash_ratio(ds, 0.4, 9, 5);
        REQUIRE(a.train.size() == b.train.size());
        for (size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].y == b.train[i].y);
    }
    SUBCASE("infeasible ratio is an explicit error") {
        Dataset tiny;
        tiny.meta.d_x = 1;
        for (int i = 0; i < 30; ++i) tiny.train.push_back(toy_unit(8));  // no crash units
        CHECK_THROWS_AS(subsample_crash_ratio(tiny, 0.5, 7, 5), UsageError);
    }
}

TEST_CASE("csv ingestion") {
    const fs::path dir = fs::temp_directory_path() / "msct_ingest";
    fs::create_directories(dir);
    SUBCASE("missing column names the column") {
        const fs::path p = dir / "bad.csv";
        write_toy_csv(p, 10, false, true);
        try {
            ingest_csv(p, IngestConfig{.window = 5, .stride = 5});
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("volume") != std::string::npos);
        }
    }
    SUBCASE("non-overlapping windows count") {
        const fs::path p = dir / "ok.csv";
        write_toy_csv(p, 100, false);
        IngestStats stats;
        IngestConfig cfg{.window = 10, .stride = 10, .train_frac = 0.8, .val_frac = 0.1,
                         .seed = 3};
        Dataset ds = ingest_csv(p, cfg, &stats);
        CHECK(stats.windows == 10);
        CHECK(stats.skipped_gap_windows == 0);
        CHECK(ds.meta.k_treatments == 4);
        CHECK(ds.meta.d_x == 13);
        CHECK(ds.train.size() + ds.val.size() + ds.test.size() == 10);
        // one-hot treatment classes flow through t_type
        bool saw_class = false;
        for (const Unit& u : ds.train)
            for (int v : u.t_type)
                if (v > 0) saw_class = true;
        CHECK(saw_class);
    }
    SUBCASE("gaps in 5-minute bins skip windows and are counted") {
        const fs::path p = dir / "gap.csv";
        write_toy_csv(p, 100, true);
        IngestStats stats;
        ingest_csv(p, IngestConfig{.window = 10, .stride = 10}, &stats);
        CHECK(stats.skipped_gap_windows >= 1);
    }
    SUBCASE("unparsable row reports the line number") {
        const fs::path p = dir / "rowerr.csv";
        write_toy_csv(p, 6, false);
        std::ofstream app(p, std::ios::app);
        app << "2020-03-01 09:00,139.5,1,sixty,0.1,100,0.9,3.5,58,57,61,62,0.8,0.85,0.95,0.92,0,"
               "3,1\n";
        app.close();
        try {
            ingest_csv(p, IngestConfig{.window = 3, .stride = 3});
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find(":8") != std::string::npos);
        }
    }
    SUBCASE("crash type out of range is rejected") {
        const fs::path p = dir / "ct.csv";
        write_toy_csv(p, 6, false);
        std::ofstream app(p, std::ios::app);
        app << "2020-03-01 09:00,139.5,1,60,0.1,100,0.9,3.5,58,57,61,62,0.8,0.85,0.95,0.92,7,3,"
               "1\n";
        app.close();
        CHECK_THROWS_AS(ingest_csv(p, IngestConfig{.window = 3, .stride = 3}), IoError);
    }
    fs::remove_all(dir);
}
