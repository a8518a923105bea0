#include <gtest/gtest.h>

#include <filesystem>

#include "saml/report.hpp"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("saml_report_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

saml::EvalRecord record(int held_out, std::vector<int> sources, const std::string& arm, std::uint64_t seed,
                        double dice) {
    saml::EvalRecord r;
    r.held_out_domain = held_out;
    r.source_domains = std::move(sources);
    r.arm = arm;
    r.seed = seed;
    r.samples = {{dice, 2.0, 0.6}, {dice + 0.02, 1.0, 0.5}};
    return r;
}

// 4 held-out domains x 3 arms x 5 seeds.
fs::path sixty_records(const std::string& name) {
    const auto dir = scratch(name);
    const std::vector<std::string> arms{"deepall", "meta-plain", "saml"};
    for (int h = 0; h < 4; ++h)
        for (std::size_t a = 0; a < arms.size(); ++a)
            for (std::uint64_t s = 0; s < 5; ++s) {
                std::vector<int> src;
                for (int d = 0; d < 4; ++d)
                    if (d != h) src.push_back(d);
                saml::RunSpec spec{h, src, saml::parse_arm(arms[a]), s};
                saml::save_record(saml::record_path(dir, spec),
                                  record(h, src, arms[a], s, 0.6 + 0.05 * a + 0.01 * h + 0.001 * s));
            }
    return dir;
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
    return n;
}

}  // namespace

TEST(Report, SixtyRecordsGiveOneTableOneCurveOneResultsCsv) {
    const auto dir = sixty_records("sixty");
    saml::write_report(dir, dir / "report");
    EXPECT_TRUE(fs::exists(dir / "report" / "table.svg"));
    EXPECT_TRUE(fs::exists(dir / "report" / "curve.svg"));
    EXPECT_TRUE(fs::exists(dir / "report" / "results.csv"));
    EXPECT_FALSE(fs::exists(dir / "report" / "losses.svg"));  // no loss CSVs
    EXPECT_EQ(count_files(dir / "report", ".svg"), 2u);
    const std::string csv = saml::read_file(dir / "report" / "results.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 61);
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "held_out_domain,arm,seed,source_domains,dice_mean,dice_std,asd_mean,asd_std,n_undefined_asd,ipq_mean");
}

TEST(Report, PureFunctionOfRecords) {
    const auto a = sixty_records("pure_a");
    const auto b = scratch("pure_b");
    fs::copy(a / "records", b / "records");
    saml::write_report(a, a / "report");
    saml::write_report(b, b / "report");
    for (const char* f : {"results.csv", "sweep.csv", "summary.md", "table.svg", "curve.svg"})
        EXPECT_EQ(saml::read_file(a / "report" / f), saml::read_file(b / "report" / f)) << f;
}

TEST(Report, EmptyDirectoryIsAnIoError) {
    EXPECT_THROW(saml::write_report(scratch("empty"), scratch("empty_out")), saml::IoError);
}

TEST(Report, TableAverageIsMedianOfPerSeedMeans) {
    std::vector<saml::EvalRecord> rs;
    // seed s: domain dice 0.5 + 0.1 h + 0.01 s, pair mean +0.01 -> per-seed average 66 + s (percent).
    for (int h = 0; h < 4; ++h)
        for (std::uint64_t s = 0; s < 3; ++s) {
            std::vector<int> src;
            for (int d = 0; d < 4; ++d)
                if (d != h) src.push_back(d);
            rs.push_back(record(h, src, "saml", s, 0.5 + 0.1 * h + 0.01 * s));
        }
    const auto t = saml::loo_table(rs);
    EXPECT_NEAR(t.at("saml").at(-1).dice, 67.0, 1e-9);
    EXPECT_NEAR(t.at("saml").at(0).dice, 52.0, 1e-9);
    EXPECT_NEAR(t.at("saml").at(-1).asd, 1.5, 1e-12);
}

TEST(Report, SweepCurveGroupsBySourceCount) {
    std::vector<saml::EvalRecord> rs;
    for (std::uint64_t s = 0; s < 5; ++s) {
        rs.push_back(record(3, {0}, "saml", s, 0.5 + 0.01 * s));
        rs.push_back(record(3, {0, 1}, "saml", s, 0.6));
        rs.push_back(record(3, {0, 1, 2}, "saml", s, 0.7));
        rs.push_back(record(1, {0, 2, 3}, "saml", s, 0.9));
    }
    EXPECT_EQ(saml::curve_target(rs), 3);
    const auto m = saml::sweep_medians(rs, 3);
    EXPECT_NEAR(m.at("saml").at(1), 53.0, 1e-9);
    EXPECT_NEAR(m.at("saml").at(3), 71.0, 1e-9);
    const auto csv = saml::sweep_csv(rs);
    EXPECT_NE(csv.find("3,saml,2,5,61.0000"), std::string::npos) << csv;
}

TEST(Report, LossCurvesFromRunDirectory) {
    const auto dir = sixty_records("losses");
    saml::write_file_atomic(dir / "runs" / "h3_src012_saml_s0.loss.csv",
                            "iteration,l_seg_tr,l_seg_te,l_compact,l_smooth,total\n1,0.5,0.5,1,1,2\n2,0.4,0.4,1,1,1.5\n");
    saml::write_report(dir, dir / "report");
    const auto svg = saml::read_file(dir / "report" / "losses.svg");
    EXPECT_NE(svg.find("<polyline"), std::string::npos);
    EXPECT_NE(svg.find(">saml<"), std::string::npos);
}
