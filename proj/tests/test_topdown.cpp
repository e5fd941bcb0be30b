#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "terrapose/topdown.hpp"

using namespace terrapose;

namespace {

std::string code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

// Angular checkerboard: 10 degree squares in azimuth and elevation.
PanoramaImage checker_pano(int h, double heading0, double height) {
    PanoramaImage p;
    p.image = Image(2 * h, h);
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < 2 * h; ++u) {
            const int a = (u * 36) / (2 * h), e = (v * 18) / h;
            p.image.at(u, v) = ((a + e) % 2) ? 0.9f : 0.1f;
        }
    p.heading0 = heading0;
    p.camera_height = height;
    return p;
}

// Direct evaluation from the viewing ray to the ground point.
Vec2 oracle_coordinate(double dx, double dy, double h, double heading0, int width, int height) {
    const Vec3 ray = Vec3(dx, dy, -h).normalized();
    const double elev = std::asin(ray.z());
    double az = std::atan2(ray.x(), ray.y()) - heading0;
    az = std::fmod(std::fmod(az, 2 * M_PI) + 2 * M_PI, 2 * M_PI);
    return {az / (2 * M_PI) * width, (M_PI / 2 - elev) / M_PI * height - 0.5};
}

double oracle_bilinear(const Image& img, double u, double v) {
    v = std::min(std::max(v, 0.0), img.height - 1.0);
    const int x0 = static_cast<int>(std::floor(u)) % img.width;
    const int x1 = (x0 + 1) % img.width;
    const int y0 = std::min(static_cast<int>(v), img.height - 2);
    const double fx = u - std::floor(u), fy = v - y0;
    return (1 - fy) * ((1 - fx) * img.at(x0, y0) + fx * img.at(x1, y0)) +
           fy * ((1 - fx) * img.at(x0, y0 + 1) + fx * img.at(x1, y0 + 1));
}

Mat3 random_homography(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1, 1);
    const double th = 0.5 * u(rng), s = 1 + 0.2 * u(rng);
    Mat3 H;
    H << s * std::cos(th) + 0.05 * u(rng), -s * std::sin(th) + 0.05 * u(rng), 100 + 50 * u(rng),
        s * std::sin(th) + 0.05 * u(rng), s * std::cos(th) + 0.05 * u(rng), 80 + 50 * u(rng), 2e-4 * u(rng),
        2e-4 * u(rng), 1.0;
    return H;
}

Image noise_image(int w, int h, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0, 1);
    Image img(w, h);
    for (auto& v : img.data) v = u(rng);
    return img;
}

}  // namespace

TEST(TopDown, CellAtCameraHeightDueNorthLooksDownFortyFive) {
    const auto p = checker_pano(90, 0.0, 2.5);
    const auto s = topdown_sample_coordinate(p, 0.0, 2.5);
    EXPECT_NEAR(s.azimuth, 0.0, 1e-12);
    EXPECT_NEAR(rad2deg(s.depression), 45.0, 1e-12);
    EXPECT_NEAR(s.u, 0.0, 1e-12);
    // 90 rows span 180 degrees: elevation -45 sits 135 degrees below the zenith
    EXPECT_NEAR(s.v, 135.0 / 2.0 - 0.5, 1e-9);
}

TEST(TopDown, CheckerboardUnwarpMatchesDirectFormula) {
    const auto p = checker_pano(180, deg2rad(37.0), 3.0);
    TopDownParams tp;
    tp.gsd = 0.5;
    tp.extent = 80.0;
    const auto td = pano_to_topdown(p, tp);
    ASSERT_EQ(td.raster.width, 160);
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> ui(0, 159);
    int checked = 0;
    for (int k = 0; k < 500; ++k) {
        const int i = ui(rng), j = ui(rng);
        const double dx = (i + 0.5 - 80) * 0.5, dy = (80 - j - 0.5) * 0.5;
        const Vec2 o = oracle_coordinate(dx, dy, 3.0, p.heading0, 360, 180);
        const auto s = topdown_sample_coordinate(p, dx, dy);
        double du = std::abs(s.u - o.x());
        du = std::min(du, 360 - du);
        EXPECT_LE(du, 1e-6);
        EXPECT_LE(std::abs(s.v - o.y()), 1e-6);
        const double depression = std::atan(3.0 / std::hypot(dx, dy));
        if (depression < deg2rad(5.0)) {
            EXPECT_TRUE(std::isnan(td.raster.at(i, j)));
        } else {
            EXPECT_NEAR(td.raster.at(i, j), oracle_bilinear(p.image, o.x(), o.y()), 1e-5);
            ++checked;
        }
    }
    EXPECT_GT(checked, 50);
}

TEST(TopDown, DefaultExtentIs150Metres) {
    const auto td = pano_to_topdown(checker_pano(90, 0.0, 2.5));
    EXPECT_DOUBLE_EQ(td.extent, 150.0);
    EXPECT_DOUBLE_EQ(td.extent, td.gsd * td.raster.width);
    EXPECT_TRUE(td.north_up);
}

TEST(TopDown, NonPositiveHeightRejected) {
    auto p = checker_pano(90, 0.0, 0.0);
    EXPECT_EQ(code_of([&] { pano_to_topdown(p); }), "NonPositiveHeight");
    p.image = Image(100, 90);
    p.camera_height = 2.0;
    EXPECT_EQ(code_of([&] { pano_to_topdown(p); }), "InvalidPanorama");
}

TEST(TopDown, SamplingDependsOnlyOnGroundOffset) {
    const auto p = checker_pano(180, 0.3, 2.5);
    TopDownParams fine, coarse;
    fine.gsd = 0.25;
    fine.extent = 40;
    coarse.gsd = 0.5;
    coarse.extent = 40;
    const auto a = pano_to_topdown(p, fine), b = pano_to_topdown(p, coarse);
    ASSERT_EQ(b.raster.width * 2, a.raster.width);
    // every cell of either view is the panorama sampled at its ground offset
    for (int j = 0; j < b.raster.height; ++j)
        for (int i = 0; i < b.raster.width; ++i)
            for (const auto* view : {&a, &b}) {
                const int n = view->raster.width, k = n / b.raster.width;
                const Vec2 d = topdown_cell_offset(i * k, j * k, n, view->gsd);
                const auto s = topdown_sample_coordinate(p, d.x(), d.y());
                const float v = view->raster.at(i * k, j * k);
                if (!s.valid) {
                    EXPECT_TRUE(std::isnan(v));
                    continue;
                }
                EXPECT_EQ(v, static_cast<float>(sample_wrapped(p.image, s.u, s.v)));
            }
    // the coordinate depends on (dx, dy, h) only through their ratios
    for (int j = 0; j < a.raster.height; ++j)
        for (int i = 0; i < a.raster.width; ++i) {
            const Vec2 d = topdown_cell_offset(i, j, a.raster.width, a.gsd);
            const auto s1 = topdown_sample_coordinate(p, d.x(), d.y());
            PanoramaImage scaled = p;
            scaled.camera_height *= 2;
            const auto s2 = topdown_sample_coordinate(scaled, 2 * d.x(), 2 * d.y());
            EXPECT_NEAR(s1.u, s2.u, 1e-9);
            EXPECT_NEAR(s1.v, s2.v, 1e-9);
        }
}

TEST(Keypoints, UniformRasterHasNone) {
    Image img(96, 96, 0.5f);
    EXPECT_EQ(code_of([&] { detect_and_describe(img); }), "NoKeypoints");
}

TEST(MatchKnn, SelfMatch) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0, 1);
    std::vector<std::vector<double>> A(30, std::vector<double>(16));
    for (auto& d : A)
        for (auto& v : d) v = n(rng);
    const auto m = match_knn(A, A);
    ASSERT_EQ(m.size(), 30u);
    for (const auto& x : m) {
        EXPECT_EQ(x.a, x.b);
        EXPECT_EQ(x.d1, 0.0);
    }
}

TEST(MatchKnn, EquidistantPairRejected) {
    const std::vector<std::vector<double>> A{{0, 0}}, B{{1, 0}, {-1, 0}, {5, 5}};
    EXPECT_TRUE(match_knn(A, B).empty());
}

TEST(MatchKnn, EqualsBruteForce) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0, 1);
    std::vector<std::vector<double>> A(200, std::vector<double>(8)), B(200, std::vector<double>(8));
    for (auto& d : A)
        for (auto& v : d) v = n(rng);
    for (auto& d : B)
        for (auto& v : d) v = n(rng);
    // plant some close twins so both outcomes of the ratio test occur
    for (int i = 0; i < 60; ++i)
        for (int k = 0; k < 8; ++k) B[3 * i][k] = A[i][k] + 0.05 * n(rng);
    const auto got = match_knn(A, B, 0.8);
    std::vector<std::pair<int, int>> expect;
    for (int i = 0; i < 200; ++i) {
        std::vector<std::pair<double, int>> d;
        for (int j = 0; j < 200; ++j) {
            double s = 0;
            for (int k = 0; k < 8; ++k) s += std::pow(A[i][k] - B[j][k], 2);
            d.emplace_back(std::sqrt(s), j);
        }
        std::sort(d.begin(), d.end());
        if (d[0].first / d[1].first < 0.8) expect.emplace_back(i, d[0].second);
    }
    std::vector<std::pair<int, int>> have;
    for (const auto& m : got) have.emplace_back(m.a, m.b);
    EXPECT_EQ(have, expect);
    EXPECT_GT(have.size(), 50u);
}

TEST(Homography, FourExactCorrespondences) {
    std::mt19937_64 rng(4);
    const Mat3 H = random_homography(rng);
    std::vector<PointMatch> m;
    for (const Vec2& a : {Vec2(0, 0), Vec2(300, 10), Vec2(290, 250), Vec2(-20, 240)})
        m.push_back({a, apply_homography(H, a)});
    const auto r = ransac_homography(m);
    EXPECT_EQ(r.inliers.size(), 4u);
    for (const auto& x : m) EXPECT_LE((apply_homography(r.H, x.a) - x.b).norm(), 1e-6);
}

TEST(Homography, ThreeMatchesAreTooFew) {
    std::vector<PointMatch> m{{Vec2(0, 0), Vec2(1, 1)}, {Vec2(5, 0), Vec2(6, 1)}, {Vec2(0, 5), Vec2(1, 6)}};
    EXPECT_EQ(code_of([&] { ransac_homography(m); }), "TooFewMatches");
}

TEST(Homography, PlantedWarpUnderHalfOutliers) {
    for (int seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const Mat3 H = random_homography(rng);
        std::uniform_real_distribution<double> ua(0, 600);
        std::normal_distribution<double> n(0, 0.3);
        std::vector<PointMatch> m;
        for (int i = 0; i < 50; ++i) {
            const Vec2 a(ua(rng), ua(rng));
            m.push_back({a, apply_homography(H, a) + Vec2(n(rng), n(rng))});
        }
        for (int i = 0; i < 50; ++i) m.push_back({Vec2(ua(rng), ua(rng)), Vec2(ua(rng), ua(rng))});
        HomographyRansacParams p;
        p.seed = seed;
        const auto r = ransac_homography(m, p);
        const Mat3 Hi = r.H.inverse();
        for (int i = 0; i < 50; ++i) EXPECT_LT(transfer_error(r.H, Hi, m[i]), p.inlier_tol_px);
        const Mat3 a = r.H / r.H.norm(), b = H / H.norm();
        EXPECT_LT((a - b).norm(), 0.01) << "seed " << seed;
    }
}

TEST(Homography, DeterministicAcrossThreadCounts) {
    std::mt19937_64 rng(5);
    const Mat3 H = random_homography(rng);
    std::uniform_real_distribution<double> ua(0, 600);
    std::vector<PointMatch> m;
    for (int i = 0; i < 40; ++i) {
        const Vec2 a(ua(rng), ua(rng));
        m.push_back({a, i % 2 ? apply_homography(H, a) : Vec2(ua(rng), ua(rng))});
    }
    set_thread_count(1);
    const auto a = ransac_homography(m);
    set_thread_count(4);
    const auto b = ransac_homography(m);
    set_thread_count(0);
    EXPECT_EQ(a.H, b.H);
    EXPECT_EQ(a.inliers, b.inliers);
}

TEST(Homography, JsonAndMatchesCsvRoundTrip) {
    std::mt19937_64 rng(6);
    const Mat3 H = normalize_homography(random_homography(rng));
    EXPECT_EQ(homography_from_json(homography_to_json(H)), H);
    std::vector<PointMatch> m{{Vec2(1.25, 2), Vec2(3, 4.5)}, {Vec2(-1, 0.1), Vec2(7, 8)}};
    std::istringstream in(matches_to_csv(m));
    const auto back = matches_from_csv(in);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].a, m[1].a);
    EXPECT_EQ(back[0].b, m[0].b);
    Mat3 Z = Mat3::Zero();
    EXPECT_EQ(code_of([&] { normalize_homography(Z); }), "SingularHomography");
}

TEST(RegisterCrop, IdentityReturnsOwnRectangle) {
    TopDownView td;
    td.raster = Image(40, 30, 0.5f);
    td.gsd = 0.3;
    std::mt19937_64 rng(7);
    AerialTile aerial{noise_image(40, 30, rng), 0.3};
    const auto r = register_crop(td, aerial, Mat3::Identity());
    const auto c = image_corners(40, 30);
    for (int k = 0; k < 4; ++k) EXPECT_EQ(r.polygon[k], c[k]);
    EXPECT_EQ(r.x0, 0);
    EXPECT_EQ(r.y0, 0);
    EXPECT_EQ(r.crop.width, 40);
    EXPECT_EQ(r.crop.height, 30);
    EXPECT_DOUBLE_EQ(r.coverage, 1.0);
    EXPECT_EQ(r.aligned.data, aerial.image.data);
}

TEST(RegisterCrop, TranslationShiftsPolygon) {
    TopDownView td;
    td.raster = Image(40, 30, 0.5f);
    std::mt19937_64 rng(8);
    AerialTile aerial{noise_image(200, 200, rng), 0.3};
    Mat3 H = Mat3::Identity();
    H(0, 2) = 50;
    H(1, 2) = 70;
    const auto r = register_crop(td, aerial, H);
    const auto c = image_corners(40, 30);
    for (int k = 0; k < 4; ++k) EXPECT_EQ(r.polygon[k], c[k] + Vec2(50, 70));
    EXPECT_EQ(r.x0, 50);
    EXPECT_EQ(r.y0, 70);
    EXPECT_EQ(r.crop.at(3, 4), aerial.image.at(53, 74));
    EXPECT_EQ(r.aligned.at(3, 4), aerial.image.at(53, 74));
}

TEST(RegisterCrop, SimilarityCornersMatchDirectApplication) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-1, 1);
    TopDownView td;
    td.raster = Image(64, 64, 0.5f);
    AerialTile aerial{noise_image(300, 300, rng), 0.3};
    for (int t = 0; t < 20; ++t) {
        const double s = 1 + 0.3 * u(rng), th = 3 * u(rng);
        Mat3 H;
        H << s * std::cos(th), -s * std::sin(th), 150 + 20 * u(rng), s * std::sin(th), s * std::cos(th),
            150 + 20 * u(rng), 0, 0, 1;
        const auto r = register_crop(td, aerial, H);
        const auto c = image_corners(64, 64);
        for (int k = 0; k < 4; ++k) {
            const Vec3 q = H * Vec3(c[k].x(), c[k].y(), 1);
            EXPECT_NEAR(r.polygon[k].x(), q.x() / q.z(), 1e-9);
            EXPECT_NEAR(r.polygon[k].y(), q.y() / q.z(), 1e-9);
        }
    }
}

TEST(RegisterCrop, CompositionConsistent) {
    std::mt19937_64 rng(10);
    TopDownView td;
    td.raster = Image(64, 64, 0.5f);
    AerialTile aerial{noise_image(400, 400, rng), 0.3};
    for (int t = 0; t < 10; ++t) {
        const Mat3 H1 = random_homography(rng), H2 = random_homography(rng);
        const auto r1 = register_crop(td, aerial, H1);
        const auto r21 = register_crop(td, aerial, H2 * H1);
        for (int k = 0; k < 4; ++k) {
            const Vec2 p = apply_homography(H2, r1.polygon[k]);
            EXPECT_NEAR(p.x(), r21.polygon[k].x(), 1e-9);
            EXPECT_NEAR(p.y(), r21.polygon[k].y(), 1e-9);
        }
    }
}

TEST(RegisterCrop, FootprintOutsideAerial) {
    TopDownView td;
    td.raster = Image(40, 30, 0.5f);
    AerialTile aerial{Image(100, 100, 0.2f), 0.3};
    Mat3 H = Mat3::Identity();
    H(0, 2) = 95;
    H(1, 2) = 95;
    EXPECT_EQ(code_of([&] { register_crop(td, aerial, H); }), "FootprintOutsideAerial");
}

TEST(ChangeScore, IdenticalRegionsAllOne) {
    std::mt19937_64 rng(11);
    const Image a = noise_image(64, 64, rng);
    const auto rep = change_zscore(a, a, 16, SceneClass::Rural);
    ASSERT_EQ(rep.tiles.size(), 16u);
    for (const auto& t : rep.tiles) {
        EXPECT_NEAR(t.r, 1.0, 1e-12);
        EXPECT_FALSE(t.changed);
    }
    EXPECT_FALSE(rep.changed);
}

TEST(ChangeScore, PlantedNoiseTileIsMinimum) {
    for (int seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(200 + seed);
        Image a = noise_image(96, 96, rng);
        // smooth so that the unchanged tiles correlate strongly but not perfectly
        a = gaussian_blur(a, 2.0);
        Image b = a;
        std::normal_distribution<float> n(0, 0.01f);
        for (auto& v : b.data) v += n(rng);
        std::uniform_int_distribution<int> ut(0, 5);
        const int tr = ut(rng), tc = ut(rng);
        std::uniform_real_distribution<float> u(0, 1);
        for (int y = tr * 16; y < tr * 16 + 16; ++y)
            for (int x = tc * 16; x < tc * 16 + 16; ++x) b.at(x, y) = u(rng);
        const auto rep = change_zscore(a, b, 16, SceneClass::Urban);
        const ChangeScore* rmin = &rep.tiles[0];
        const ChangeScore* zmin = &rep.tiles[0];
        for (const auto& t : rep.tiles) {
            if (t.r < rmin->r) rmin = &t;
            if (t.z < zmin->z) zmin = &t;
        }
        EXPECT_EQ(rmin->row, tr);
        EXPECT_EQ(rmin->col, tc);
        EXPECT_EQ(zmin->row, tr);
        EXPECT_EQ(zmin->col, tc);
        EXPECT_TRUE(rmin->changed);
    }
}

TEST(ChangeScore, AffineIntensityInvariance) {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u01(0, 1);
    Raster<double> a(64, 64), b(64, 64);
    for (auto& v : a.data) v = u01(rng);
    for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] = 0.5 * u01(rng) + 0.5 * a.data[i];
    const auto base = change_zscore(a, b, 16, SceneClass::Rural);
    std::uniform_real_distribution<double> ug(0.2, 3.0), uo(-2, 2);
    Raster<double> c = b;
    for (int ty = 0; ty < 4; ++ty)
        for (int tx = 0; tx < 4; ++tx) {
            const double g = ug(rng), o = uo(rng);
            for (int y = ty * 16; y < ty * 16 + 16; ++y)
                for (int x = tx * 16; x < tx * 16 + 16; ++x) c.at(x, y) = g * b.at(x, y) + o;
        }
    const auto mod = change_zscore(a, c, 16, SceneClass::Rural);
    for (std::size_t k = 0; k < base.tiles.size(); ++k) EXPECT_NEAR(base.tiles[k].r, mod.tiles[k].r, 1e-9);
}

TEST(ChangeScore, DegenerateTileReportedAndExcluded) {
    std::mt19937_64 rng(13);
    Image a = noise_image(32, 32, rng);
    Image b = a;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) b.at(x, y) = 0.3f;
    const auto rep = change_zscore(a, b, 16, SceneClass::Rural);
    EXPECT_TRUE(rep.tiles[0].degenerate);
    EXPECT_EQ(rep.degenerate_tiles, 1);
    EXPECT_FALSE(rep.tiles[0].changed);
    Image flat(32, 32, 0.2f);
    EXPECT_EQ(code_of([&] { change_zscore(flat, flat, 16, SceneClass::Rural); }), "DegenerateTile");
    EXPECT_EQ(code_of([&] { change_zscore(a, b, 10, SceneClass::Rural); }), "InvalidParameter");
}
