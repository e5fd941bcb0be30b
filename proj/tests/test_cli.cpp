#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "scenarios.hpp"
#include "terrapose/cli.hpp"
#include "test_util.hpp"

using namespace terrapose;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = -1;
    std::string out, err;
};

Outcome invoke(const std::vector<std::string>& args) {
    std::vector<const char*> argv{"terrapose"};
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Outcome o;
    o.code = terrapose::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    o.out = out.str();
    o.err = err.str();
    set_thread_count(0);
    return o;
}

std::set<std::string> listing(const fs::path& dir) {
    std::set<std::string> s;
    for (const auto& e : fs::directory_iterator(dir)) s.insert(e.path().filename().string());
    return s;
}

bool single_error_line(const std::string& err, const std::string& code) {
    const std::string prefix = "ERROR " + code + ": ";
    return err.rfind(prefix, 0) == 0 && err.find('\n') == err.size() - 1;
}

std::string pose_json(double x, double y, double heading_deg, int w = 640, int h = 360, double f = 400) {
    nlohmann::json j{{"x", x},       {"y", y},          {"z", -1.0}, {"heading_deg", heading_deg},
                     {"tilt_deg", 0}, {"roll_deg", 0}, {"focal_px", f}, {"width", w},
                     {"height", h}};
    return j.dump();
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override { dir = testutil::temp_dir("cli"); }
    void TearDown() override { fs::remove_all(dir); }
    std::string p(const std::string& name) const { return (dir / name).string(); }
    fs::path dir;
};

}  // namespace

TEST_F(CliTest, GenDemGaussianHillLoadsAndMatchesFormula) {
    const auto r = invoke({"gen-dem", "--kind", "gaussian_hill", "--amp", "500", "--sigma", "800", "--size", "512",
                        "--cell", "25", "-o", p("hill.asc")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto g = load_ascii_grid(p("hill.asc"));
    ASSERT_EQ(g.n_cols, 512);
    ASSERT_EQ(g.n_rows, 512);
    EXPECT_DOUBLE_EQ(g.cell_size, 25.0);
    const double cx = 511 * 25 / 2.0, cy = cx;
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> ui(0, 511);
    for (int k = 0; k < 50; ++k) {
        const int c = ui(rng), row = ui(rng);
        const double x = g.node_x(c), y = g.node_y(row);
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        EXPECT_NEAR(g.at(c, row), 500 * std::exp(-d2 / (2 * 800.0 * 800.0)), 1e-9);
    }
}

TEST_F(CliTest, OrientDtwRecoversSelfRenderedHeading) {
    ASSERT_EQ(invoke({"gen-dem", "--kind", "gaussian_hill", "--amp", "500", "--sigma", "800", "--size", "512", "--cell",
                      "25", "-o", p("hill.asc")})
                  .code,
              0);
    // cameras around the hill (center 6387.5, 6387.5) with the hill somewhere in frame
    const double c = 6387.5;
    int k = 0;
    for (double bearing : {10.0, 100.0, 170.0, 250.0, 300.0}) {
        const double b = deg2rad(bearing), dist = 3500;
        const double x = c - dist * std::sin(b), y = c - dist * std::cos(b);  // hill lies at azimuth `bearing`
        const double heading = bearing + (k % 2 ? 18.0 : -12.0);
        const auto truth = p("truth" + std::to_string(k) + ".json");
        const auto prior = p("prior" + std::to_string(k) + ".json");
        testutil::write_text(truth, pose_json(x, y, heading));
        testutil::write_text(prior, pose_json(x, y, 0.0));
        ASSERT_EQ(invoke({"render-view", "--dem", p("hill.asc"), "--pose", truth, "-o", p("query.pgm")}).code, 0);
        const auto r = invoke({"orient-dtw", "--dem", p("hill.asc"), "--pose", prior, "--image", p("query.pgm"), "-o",
                               p("orient.json")});
        ASSERT_EQ(r.code, 0) << r.err;
        const auto j = nlohmann::json::parse(testutil::read_text(p("orient.json")));
        EXPECT_EQ(j.at("method"), "dtw");
        const double err = std::abs(rad2deg(wrap_pi(deg2rad(j.at("heading_deg").get<double>() - heading))));
        EXPECT_LT(err, 5.0) << "heading " << heading;
        ++k;
    }
}

TEST_F(CliTest, OrientDtwAcceptsPrecomputedSkyline) {
    ASSERT_EQ(invoke({"gen-dem", "--kind", "hill_mixture", "--size", "201", "--cell", "50", "-o", p("dem.asc")}).code, 0);
    testutil::write_text(p("truth.json"), pose_json(4000, 6000, 140));
    testutil::write_text(p("prior.json"), pose_json(4000, 6000, 0));
    ASSERT_EQ(invoke({"render-view", "--dem", p("dem.asc"), "--pose", p("truth.json"), "-o", p("q.pgm")}).code, 0);
    ASSERT_EQ(invoke({"skyline", "--image", p("q.pgm"), "-o", p("sky.csv")}).code, 0);
    const auto r = invoke({"orient-dtw", "--dem", p("dem.asc"), "--pose", p("prior.json"), "--skyline", p("sky.csv"),
                        "-o", p("o.json"), "--reference-out", p("ref.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(testutil::read_text(p("o.json")));
    EXPECT_LT(std::abs(j.at("heading_deg").get<double>() - 140.0), 5.0);
    EXPECT_TRUE(fs::exists(p("ref.csv")));
    // both sources at once is a usage error
    const auto both = invoke({"orient-dtw", "--dem", p("dem.asc"), "--pose", p("prior.json"), "--skyline", p("sky.csv"),
                           "--image", p("q.pgm"), "-o", p("o2.json")});
    EXPECT_EQ(both.code, 2);
    EXPECT_FALSE(fs::exists(p("o2.json")));
}

TEST_F(CliTest, OrientHogRecoversSelfRenderedHeading) {
    ASSERT_EQ(invoke({"gen-dem", "--kind", "hill_mixture", "--size", "201", "--cell", "50", "--seed", "4", "-o",
                   p("dem.asc")})
                  .code,
              0);
    testutil::write_text(p("truth.json"), pose_json(5000, 5000, 222));
    testutil::write_text(p("prior.json"), pose_json(5000, 5000, 0));
    ASSERT_EQ(invoke({"render-view", "--dem", p("dem.asc"), "--pose", p("truth.json"), "-o", p("q.pgm")}).code, 0);
    const auto r =
        invoke({"orient-hog", "--dem", p("dem.asc"), "--pose", p("prior.json"), "--image", p("q.pgm"), "-o", p("h.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(testutil::read_text(p("h.json")));
    EXPECT_EQ(j.at("method"), "hog");
    EXPECT_LT(std::abs(j.at("heading_deg").get<double>() - 222.0), 1.0);
}

TEST_F(CliTest, MissingDemExitsTwoWithoutOutputs) {
    testutil::write_text(p("prior.json"), pose_json(0, 0, 0));
    const auto before = listing(dir);
    const auto r = invoke({"orient-dtw", "--dem", p("missing.asc"), "--pose", p("prior.json"), "--image", p("q.pgm"),
                        "-o", p("orient.json")});
    EXPECT_EQ(r.code, 2);
    EXPECT_TRUE(single_error_line(r.err, "IoError")) << r.err;
    EXPECT_EQ(listing(dir), before);
}

TEST_F(CliTest, CameraOutsideDemIsAValidationError) {
    ASSERT_EQ(invoke({"gen-dem", "--kind", "flat", "--size", "10", "--cell", "10", "-o", p("flat.asc")}).code, 0);
    const auto r = invoke({"render-pano", "--dem", p("flat.asc"), "--x", "500", "--y", "5", "-o", p("h.csv")});
    EXPECT_EQ(r.code, 2);
    EXPECT_TRUE(single_error_line(r.err, "CameraOutsideGrid")) << r.err;
    EXPECT_FALSE(fs::exists(p("h.csv")));
}

TEST_F(CliTest, FailingLaterOutputLeavesNoEarlierOutput) {
    ASSERT_EQ(invoke({"gen-dem", "--kind", "gaussian_hill", "--size", "64", "--cell", "50", "-o", p("dem.asc")}).code, 0);
    testutil::write_text(p("pose.json"), pose_json(1000, 1000, 0, 64, 48, 40));
    const auto before = listing(dir);
    const auto r = invoke({"render-view", "--dem", p("dem.asc"), "--pose", p("pose.json"), "-o", p("ok.pgm"), "--xyz",
                        p("no_such_dir/xyz")});
    EXPECT_EQ(r.code, 2);
    EXPECT_TRUE(single_error_line(r.err, "IoError")) << r.err;
    EXPECT_EQ(listing(dir), before);
}

TEST_F(CliTest, UnknownSubcommandAndFlag) {
    auto r = invoke({"make-coffee"});
    EXPECT_EQ(r.code, 2);
    EXPECT_TRUE(single_error_line(r.err, "UnknownSubcommand")) << r.err;
    r = invoke({});
    EXPECT_EQ(r.code, 2);
    r = invoke({"gen-dem", "--frobnicate", "-o", p("a.asc")});
    EXPECT_EQ(r.code, 2);
    EXPECT_TRUE(single_error_line(r.err, "UnknownFlag")) << r.err;
    r = invoke({"gen-dem", "--amp", "-1", "-o", p("a.asc")});
    EXPECT_EQ(r.code, 2);
    EXPECT_TRUE(single_error_line(r.err, "InvalidParameter")) << r.err;
    r = invoke({"gen-dem"});
    EXPECT_EQ(r.code, 2);
    EXPECT_TRUE(single_error_line(r.err, "MissingArgument")) << r.err;
    EXPECT_FALSE(fs::exists(p("a.asc")));
}

TEST_F(CliTest, HelpListsDefaultUnitAndRangeForEveryFlag) {
    const auto top = invoke({"--help"});
    EXPECT_EQ(top.code, 0);
    for (const auto& sc : cli::detail::subcommands()) {
        EXPECT_NE(top.out.find(sc.name), std::string::npos);
        const auto r = invoke({sc.name, "--help"});
        ASSERT_EQ(r.code, 0) << sc.name;
        // gather option entries (a line starting with "  -" plus its continuation lines)
        std::vector<std::string> entries;
        std::istringstream in(r.out);
        std::string line;
        bool in_options = false;
        while (std::getline(in, line)) {
            if (line.rfind("Options:", 0) == 0) {
                in_options = true;
                continue;
            }
            if (!in_options || line.empty()) continue;
            if (line.rfind("  -", 0) == 0) entries.push_back(line);
            else if (!entries.empty()) entries.back() += " " + line;
        }
        ASSERT_GE(entries.size(), 4u) << sc.name;
        for (const auto& e : entries) {
            if (e.find("--help") != std::string::npos) continue;
            EXPECT_NE(e.find("unit:"), std::string::npos) << sc.name << ": " << e;
            EXPECT_NE(e.find("range:"), std::string::npos) << sc.name << ": " << e;
            const bool has_default = e.find("REQUIRED") != std::string::npos ||
                                     e.find("default: none") != std::string::npos ||
                                     e.substr(0, e.find("unit:")).find(" [") != std::string::npos;
            EXPECT_TRUE(has_default) << sc.name << ": " << e;
        }
    }
}

TEST_F(CliTest, SeededOutputsIdenticalAcrossRunsAndThreads) {
    std::vector<std::string> outs;
    for (const char* threads : {"1", "4", "1"}) {
        const auto name = p(std::string("m") + std::to_string(outs.size()) + ".asc");
        ASSERT_EQ(invoke({"gen-dem", "--kind", "hill_mixture", "--size", "128", "--cell", "50", "--seed", "99",
                       "--threads", threads, "-o", name})
                      .code,
                  0);
        outs.push_back(testutil::read_text(name));
    }
    EXPECT_EQ(outs[0], outs[1]);
    EXPECT_EQ(outs[0], outs[2]);
    ASSERT_EQ(invoke({"gen-dem", "--kind", "hill_mixture", "--size", "128", "--cell", "50", "--seed", "100", "-o",
                   p("other.asc")})
                  .code,
              0);
    EXPECT_NE(testutil::read_text(p("other.asc")), outs[0]);

    // render through the thread pool, then through the environment fallback
    testutil::write_text(p("pose.json"), pose_json(3200, 3200, 45, 160, 90, 100));
    ASSERT_EQ(invoke({"render-view", "--dem", p("m0.asc"), "--pose", p("pose.json"), "-o", p("a.pgm"), "--threads", "1"})
                  .code,
              0);
    ASSERT_EQ(invoke({"render-view", "--dem", p("m0.asc"), "--pose", p("pose.json"), "-o", p("b.pgm"), "--threads", "4"})
                  .code,
              0);
    ::setenv("TERRAPOSE_THREADS", "3", 1);
    EXPECT_EQ(thread_count(), 3);
    ASSERT_EQ(invoke({"render-view", "--dem", p("m0.asc"), "--pose", p("pose.json"), "-o", p("c.pgm")}).code, 0);
    ::unsetenv("TERRAPOSE_THREADS");
    EXPECT_EQ(testutil::read_text(p("a.pgm")), testutil::read_text(p("b.pgm")));
    EXPECT_EQ(testutil::read_text(p("a.pgm")), testutil::read_text(p("c.pgm")));
}

TEST_F(CliTest, RenderViewXyzBandsMatchBackprojection) {
    ASSERT_EQ(invoke({"gen-dem", "--kind", "hill_mixture", "--size", "128", "--cell", "50", "-o", p("dem.asc")}).code, 0);
    testutil::write_text(p("pose.json"), pose_json(3200, 3200, 10, 80, 60, 60));
    ASSERT_EQ(invoke({"render-view", "--dem", p("dem.asc"), "--pose", p("pose.json"), "-o", p("v.pgm"), "--xyz",
                   p("xyz"), "--pose-out", p("placed.json")})
                  .code,
              0);
    const auto z = read_float32(p("xyz.z.f32"), p("xyz.json"));
    const auto x = read_float32(p("xyz.x.f32"), p("xyz.json"));
    const auto y = read_float32(p("xyz.y.f32"), p("xyz.json"));
    const auto placed = pose_from_json(nlohmann::json::parse(testutil::read_text(p("placed.json"))));
    const auto grid = load_ascii_grid(p("dem.asc"));
    int ground = 0;
    for (int v = 0; v < 60; ++v)
        for (int u = 0; u < 80; ++u) {
            if (std::isnan(z.at(u, v))) continue;
            ++ground;
            // each stored point lies on the terrain and projects back to its pixel (float32 storage)
            EXPECT_NEAR(z.at(u, v), sample_elevation(grid, x.at(u, v), y.at(u, v)), 0.05);
            const Vec2 px = project_point(placed, Vec3(x.at(u, v), y.at(u, v), z.at(u, v)));
            EXPECT_NEAR(px.x(), u, 0.05);
            EXPECT_NEAR(px.y(), v, 0.05);
        }
    EXPECT_GT(ground, 100);
}

TEST_F(CliTest, RenderPanoEquirectFeedsWarpTopdown) {
    ASSERT_EQ(invoke({"gen-dem", "--kind", "hill_mixture", "--size", "128", "--cell", "50", "-o", p("dem.asc")}).code, 0);
    const auto r = invoke({"render-pano", "--dem", p("dem.asc"), "--x", "3100", "--y", "3300", "-o", p("h.csv"),
                        "--equirect", p("pano.pgm"), "--equirect-height", "180", "--strip", p("strip.pgm")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto pano = read_pnm(p("pano.pgm"));
    EXPECT_EQ(pano.width, 360);
    EXPECT_EQ(pano.height, 180);
    // horizon CSV: one row per 0.25 deg azimuth plus a header
    std::istringstream csv(testutil::read_text(p("h.csv")));
    std::string line;
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    EXPECT_EQ(rows, 1441);
    const auto w = invoke({"warp-topdown", "--pano", p("pano.pgm"), "--camera-height", "1.6", "--gsd", "0.5", "--extent",
                        "40", "-o", p("td.pgm"), "--float-out", p("td.f32")});
    ASSERT_EQ(w.code, 0) << w.err;
    const auto td = read_pnm(p("td.pgm"));
    EXPECT_EQ(td.width, 80);
    const auto tf = read_float32(p("td.f32"), p("td.f32.json"));
    EXPECT_EQ(tf.width, 80);
    EXPECT_FALSE(std::isnan(tf.at(40, 40)));
    // 40 m window at 1.6 m height: corners (28 m away, 3.2 deg depression) are nodata
    EXPECT_TRUE(std::isnan(tf.at(0, 0)));
}

TEST_F(CliTest, PoseInitRecoversExactPose) {
    const auto s = scenario::pose_scene(21, 40, 0.0, 0.0);
    std::ostringstream csv;
    csv.precision(17);
    csv << "u,v,x,y,z\n";
    for (std::size_t i = 0; i < s.landmarks.size(); ++i)
        csv << s.queries[i].pixel.x() << ',' << s.queries[i].pixel.y() << ',' << s.landmarks[i].world.x() << ','
            << s.landmarks[i].world.y() << ',' << s.landmarks[i].world.z() << '\n';
    testutil::write_text(p("corr.csv"), csv.str());
    testutil::write_text(p("cam.json"), pose_to_json(s.truth).dump());
    const auto r = invoke({"pose-init", "--correspondences", p("corr.csv"), "--camera", p("cam.json"), "-o", p("p.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(testutil::read_text(p("p.json")));
    const auto est = pose_from_json(j);
    EXPECT_LT((est.t - s.truth.t).norm(), 1e-3);
    EXPECT_LT(std::abs(wrap_pi(est.r.heading - s.truth.r.heading)), deg2rad(0.01));
    EXPECT_EQ(j.at("inliers").get<int>(), 40);
}

TEST_F(CliTest, RefinePepalpConvergesOrExitsThree) {
    const auto s = scenario::pose_scene(5);
    std::mt19937_64 rng(8);
    const auto prior = scenario::displaced_prior(s, rng, 200.0, 5.0);
    testutil::write_text(p("prior.json"), pose_to_json(prior).dump());
    testutil::write_text(p("lm.csv"), landmarks_to_csv(s.landmarks));
    testutil::write_text(p("kp.csv"), keypoints_to_csv(s.queries));
    const auto r = invoke({"refine-pepalp", "--prior", p("prior.json"), "--landmarks", p("lm.csv"), "--keypoints",
                        p("kp.csv"), "-o", p("post.json"), "--diagnostics", p("diag.jsonl")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto post = pose_from_json(nlohmann::json::parse(testutil::read_text(p("post.json"))));
    EXPECT_LT((post.t - s.truth.t).norm(), 10.0);
    std::istringstream diag(testutil::read_text(p("diag.jsonl")));
    std::string line;
    int n = 0;
    while (std::getline(diag, line)) {
        EXPECT_NO_THROW((void)nlohmann::json::parse(line));
        ++n;
    }
    EXPECT_GE(n, 1);

    // keypoints that match nothing: divergence is a numerical failure
    std::vector<QueryKeypoint> far;
    for (const auto& q : s.queries) far.push_back({Vec2(-5000, -5000), q.descriptor});
    testutil::write_text(p("far.csv"), keypoints_to_csv(far));
    const auto d = invoke({"refine-pepalp", "--prior", p("prior.json"), "--landmarks", p("lm.csv"), "--keypoints",
                        p("far.csv"), "-o", p("post2.json"), "--diagnostics", p("diag2.jsonl")});
    EXPECT_EQ(d.code, 3);
    EXPECT_TRUE(single_error_line(d.err, "Diverged")) << d.err;
    EXPECT_FALSE(fs::exists(p("post2.json")));
    EXPECT_FALSE(fs::exists(p("diag2.jsonl")));
}

TEST_F(CliTest, RegisterWithMatchesAndChangeScore) {
    // textured aerial; the top-down view is its crop shifted by (30, 20) px
    const int W = 200, H = 200, n = 96;
    Image aerial(W, H);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<float> u(0, 1);
    for (auto& v : aerial.data) v = u(rng);
    Image td(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) td.at(x, y) = aerial.at(x + 30, y + 20);
    testutil::write_text(p("aerial.pgm"), encode_pgm16(aerial));
    testutil::write_text(p("td.pgm"), encode_pgm16(td));
    std::vector<PointMatch> m;
    std::uniform_real_distribution<double> up(0, n - 1);
    for (int i = 0; i < 30; ++i) {
        const Vec2 a(up(rng), up(rng));
        m.push_back({a, a + Vec2(30, 20)});
    }
    for (int i = 0; i < 10; ++i) m.push_back({Vec2(up(rng), up(rng)), Vec2(up(rng), up(rng))});
    testutil::write_text(p("m.csv"), matches_to_csv(m));
    const auto r = invoke({"register", "--topdown", p("td.pgm"), "--aerial", p("aerial.pgm"), "--matches", p("m.csv"),
                        "-o", p("H.json"), "--aligned", p("aligned.pgm"), "--crop", p("crop.pgm"), "--footprint",
                        p("fp.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    const Mat3 Hm = homography_from_json(nlohmann::json::parse(testutil::read_text(p("H.json"))));
    const Vec2 q = apply_homography(Hm, Vec2(10, 10));
    EXPECT_NEAR(q.x(), 40, 1e-6);
    EXPECT_NEAR(q.y(), 30, 1e-6);
    const auto fp = nlohmann::json::parse(testutil::read_text(p("fp.json")));
    EXPECT_NEAR(fp.at("coverage").get<double>(), 1.0, 1e-9);
    EXPECT_GE(fp.at("inliers").get<int>(), 30);

    const auto c = invoke({"change-score", "--topdown", p("td.pgm"), "--aerial", p("aligned.pgm"), "--tile", "16",
                        "--scene", "urban", "-o", p("report.json")});
    ASSERT_EQ(c.code, 0) << c.err;
    const auto rep = nlohmann::json::parse(testutil::read_text(p("report.json")));
    EXPECT_EQ(rep.at("tiles").size(), 36u);
    EXPECT_EQ(rep.at("scene_class"), "urban");
    for (const auto& t : rep.at("tiles")) EXPECT_NEAR(t.at("r").get<double>(), 1.0, 1e-6);

    // too few matches for a homography
    m.resize(3);
    testutil::write_text(p("few.csv"), matches_to_csv(m));
    const auto f = invoke({"register", "--topdown", p("td.pgm"), "--aerial", p("aerial.pgm"), "--matches", p("few.csv"),
                        "-o", p("H2.json")});
    EXPECT_EQ(f.code, 2);
    EXPECT_TRUE(single_error_line(f.err, "TooFewMatches")) << f.err;
}

TEST_F(CliTest, RegisterWithCollinearMatchesHasNoConsensus) {
    Image img(64, 64, 0.5f);
    testutil::write_text(p("a.pgm"), encode_pgm16(img));
    std::vector<PointMatch> m;
    for (int i = 0; i < 12; ++i) m.push_back({Vec2(2.0 + 5 * i, 3.0 + 2 * i), Vec2(1.0 + 3 * i, 9.0 - i)});
    testutil::write_text(p("m.csv"), matches_to_csv(m));
    const auto r =
        invoke({"register", "--topdown", p("a.pgm"), "--aerial", p("a.pgm"), "--matches", p("m.csv"), "-o", p("H.json")});
    EXPECT_EQ(r.code, 3);
    EXPECT_TRUE(single_error_line(r.err, "NoConsensus")) << r.err;
    EXPECT_FALSE(fs::exists(p("H.json")));
}

TEST_F(CliTest, LearnPriorsThenFuseTwoPanoramas) {
    // training trees every 8 m along a road at easting 0
    std::ostringstream pos;
    pos << "easting,northing\n";
    for (int i = 0; i < 20; ++i) pos << 6 << ',' << 8 * i << '\n';
    testutil::write_text(p("train.csv"), pos.str());
    const auto road = scenario::street_road();
    testutil::write_text(p("road.f32"), encode_float32(road.distance, -9999.0f));
    auto side = float32_sidecar(road.distance.width, road.distance.height, -9999.0f);
    side["origin_easting"] = road.origin_easting;
    side["origin_northing"] = road.origin_northing;
    side["cell_size"] = road.cell_size;
    testutil::write_text(p("road.f32.json"), side.dump());
    auto r = invoke({"learn-priors", "--positions", p("train.csv"), "--road", p("road.f32"), "-o", p("priors.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto pr = priors_from_json(nlohmann::json::parse(testutil::read_text(p("priors.json"))));
    ASSERT_EQ(pr.spacing.probs.size(), 9u);
    EXPECT_EQ(std::max_element(pr.spacing.probs.begin(), pr.spacing.probs.end()) - pr.spacing.probs.begin(), 8);

    // two panoramas 10 m apart both see a tree at (6, 20)
    const Vec2 tree(6, 20);
    std::vector<PanoramicView> pv(2);
    pv[0].position = Vec2(0, 10);
    pv[1].position = Vec2(0, 30);
    nlohmann::json views = nlohmann::json::array();
    std::ostringstream dets;
    dets << "view_id,umin,vmin,umax,vmax,score\n";
    Image scores(720, 360, 0.8f);
    testutil::write_text(p("s.pgm"), encode_pgm16(scores));
    for (int v = 0; v < 2; ++v) {
        pv[v].width = 720;
        pv[v].height = 360;
        views.push_back({{"id", v},
                         {"type", "panoramic"},
                         {"x", pv[v].position.x()},
                         {"y", pv[v].position.y()},
                         {"camera_height", 2.5},
                         {"heading0_deg", 0},
                         {"width", 720},
                         {"height", 360},
                         {"scores", "s.pgm"}});
        const auto px = geo_to_pixel(tree, pv[v]);
        ASSERT_TRUE(px.has_value());
        // box whose bottom edge sits on the ground contact point
        dets << v << ',' << px->x() - 3 << ',' << px->y() - 40 << ',' << px->x() + 3 << ',' << px->y() << ",0.9\n";
    }
    testutil::write_text(p("views.json"), views.dump());
    testutil::write_text(p("dets.csv"), dets.str());
    r = invoke({"fuse", "--detections", p("dets.csv"), "--views", p("views.json"), "--priors", p("priors.json"), "--road",
             p("road.f32"), "-o", p("props.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream csv(testutil::read_text(p("props.csv")));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "easting,northing,score,selected");
    std::vector<std::string> rows;
    while (std::getline(csv, line)) rows.push_back(line);
    ASSERT_EQ(rows.size(), 1u);
    double e, n, s;
    int sel;
    char c;
    std::istringstream row(rows[0]);
    row >> e >> c >> n >> c >> s >> c >> sel;
    EXPECT_NEAR(e, 6, 0.6);
    EXPECT_NEAR(n, 20, 0.6);
    EXPECT_NEAR(s, 0.8, 1e-3);
    EXPECT_EQ(sel, 1);

    // view id without geometry
    testutil::write_text(p("bad.csv"), "view_id,umin,vmin,umax,vmax,score\n7,1,1,2,300,0.9\n");
    r = invoke({"fuse", "--detections", p("bad.csv"), "--views", p("views.json"), "-o", p("props2.csv")});
    EXPECT_EQ(r.code, 2);
    EXPECT_TRUE(single_error_line(r.err, "UnknownView")) << r.err;
}
