#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "terrapose/camera.hpp"
#include "terrapose/features.hpp"
#include "terrapose/parallel.hpp"
#include "terrapose/raster.hpp"

namespace terrapose {

// ---------------------------------------------------------------------------
// Panorama to bird's-eye view

/// Equirectangular panorama. Column u is centered on azimuth
/// heading0 + u * 2pi / width; row v on elevation pi/2 - (v + 0.5) * pi / height.
struct PanoramaImage {
    Image image;
    double heading0 = 0.0;
    double camera_height = 2.5;
};

inline void validate(const PanoramaImage& p) {
    if (p.image.empty() || p.image.width != 2 * p.image.height)
        fail("InvalidPanorama", "equirectangular panorama needs width = 2 * height");
    if (!(p.camera_height > 0) || !std::isfinite(p.camera_height)) fail("NonPositiveHeight", "camera height must be > 0");
}

struct TopDownParams {
    double gsd = 0.25;      // m/px
    double extent = 150.0;  // m, square, camera-centered
    double min_depression = deg2rad(5.0);
};

struct TopDownView {
    Image raster;
    double gsd = 0.0;
    double extent = 0.0;
    bool north_up = true;
};

struct SampleCoordinate {
    double u = 0.0;  // panorama column
    double v = 0.0;  // panorama row
    double azimuth = 0.0;
    double depression = 0.0;
    bool valid = false;
};

/// Panorama coordinate seen at ground offset (dx east, dy north) from the camera.
inline SampleCoordinate topdown_sample_coordinate(const PanoramaImage& p, double dx, double dy,
                                                  double min_depression = deg2rad(5.0)) {
    SampleCoordinate s;
    const int w = p.image.width, h = p.image.height;
    s.azimuth = wrap_two_pi(std::atan2(dx, dy));
    s.depression = std::atan2(p.camera_height, std::hypot(dx, dy));
    s.u = wrap_two_pi(s.azimuth - p.heading0) * w / kTwoPi;
    s.v = (kPi / 2 + s.depression) * h / kPi - 0.5;
    s.valid = s.depression >= min_depression;
    return s;
}

/// Bilinear sample wrapping horizontally and clamping vertically.
inline double sample_wrapped(const Image& img, double u, double v) {
    const int w = img.width, h = img.height;
    v = std::clamp(v, 0.0, static_cast<double>(h - 1));
    const double fu = std::floor(u);
    const int x0 = ((static_cast<long>(fu) % w) + w) % w;
    const int x1 = (x0 + 1) % w;
    const int y0 = std::min(static_cast<int>(v), std::max(h - 2, 0));
    const int y1 = std::min(y0 + 1, h - 1);
    const double ax = u - fu, ay = v - y0;
    return (1 - ay) * ((1 - ax) * img.at(x0, y0) + ax * img.at(x1, y0)) +
           ay * ((1 - ax) * img.at(x0, y1) + ax * img.at(x1, y1));
}

/// Ground offset of top-down cell (i, j): cell centers, north up, camera at
/// the raster center.
inline Vec2 topdown_cell_offset(int i, int j, int n, double gsd) {
    return {(i + 0.5 - 0.5 * n) * gsd, (0.5 * n - j - 0.5) * gsd};
}

inline TopDownView pano_to_topdown(const PanoramaImage& p, const TopDownParams& tp = {}) {
    validate(p);
    if (!(tp.gsd > 0) || !(tp.extent / 2 >= tp.gsd)) fail("InvalidParameter", "need gsd > 0 and extent/2 >= gsd");
    const int n = static_cast<int>(std::lround(tp.extent / tp.gsd));
    TopDownView out;
    out.gsd = tp.gsd;
    out.extent = n * tp.gsd;
    out.raster = Image(n, n, std::numeric_limits<float>::quiet_NaN());
    parallel_for(0, static_cast<std::size_t>(n), [&](std::size_t row) {
        const int j = static_cast<int>(row);
        for (int i = 0; i < n; ++i) {
            const Vec2 d = topdown_cell_offset(i, j, n, tp.gsd);
            const auto s = topdown_sample_coordinate(p, d.x(), d.y(), tp.min_depression);
            if (s.valid) out.raster.at(i, j) = static_cast<float>(sample_wrapped(p.image, s.u, s.v));
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Descriptor matching

struct KnnMatch {
    int a = -1;
    int b = -1;
    double d1 = 0.0;
    double d2 = 0.0;
};

/// Exact two-nearest-neighbour search with the ratio test d1/d2 < ratio.
inline std::vector<KnnMatch> match_knn(const std::vector<std::vector<double>>& A,
                                       const std::vector<std::vector<double>>& B, double ratio = 0.8) {
    if (A.empty() || B.empty()) fail("EmptyInput", "both descriptor sets must be non-empty");
    std::vector<KnnMatch> best(A.size());
    std::vector<char> keep(A.size(), 0);
    parallel_for(0, A.size(), [&](std::size_t i) {
        double d1 = std::numeric_limits<double>::infinity(), d2 = d1;
        int b1 = -1;
        for (std::size_t j = 0; j < B.size(); ++j) {
            if (B[j].size() != A[i].size()) fail("DescriptorMismatch", "descriptor lengths differ");
            double s = 0;
            for (std::size_t k = 0; k < A[i].size(); ++k) s += (A[i][k] - B[j][k]) * (A[i][k] - B[j][k]);
            const double d = std::sqrt(s);
            if (d < d1) {
                d2 = d1;
                d1 = d;
                b1 = static_cast<int>(j);
            } else if (d < d2) {
                d2 = d;
            }
        }
        best[i] = {static_cast<int>(i), b1, d1, d2};
        keep[i] = d1 < ratio * d2;
    });
    std::vector<KnnMatch> out;
    for (std::size_t i = 0; i < A.size(); ++i)
        if (keep[i]) out.push_back(best[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Homography

struct PointMatch {
    Vec2 a;  // source (top-down) pixel
    Vec2 b;  // target (aerial) pixel
};

inline Vec2 apply_homography(const Mat3& H, const Vec2& p) {
    const Vec3 q = H * Vec3(p.x(), p.y(), 1.0);
    return q.head<2>() / q.z();
}

/// Scales H so that H(2,2) = 1 when it is nonzero; raises SingularHomography
/// when the result is not invertible.
inline Mat3 normalize_homography(Mat3 H) {
    if (std::abs(H(2, 2)) > 1e-12) H /= H(2, 2);
    else H /= H.norm();
    if (!H.allFinite() || std::abs(H.determinant()) <= 1e-12) fail("SingularHomography", "homography is not invertible");
    return H;
}

namespace detail {

inline Mat3 hartley_normalizer(const std::vector<Vec2>& pts) {
    Vec2 c = Vec2::Zero();
    for (const auto& p : pts) c += p;
    c /= static_cast<double>(pts.size());
    double d = 0;
    for (const auto& p : pts) d += (p - c).norm();
    d /= static_cast<double>(pts.size());
    const double s = d > 0 ? std::sqrt(2.0) / d : 1.0;
    Mat3 T;
    T << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
    return T;
}

/// Normalized DLT over all given matches. Returns false for degenerate input.
inline bool dlt_homography(const std::vector<PointMatch>& m, Mat3& H) {
    std::vector<Vec2> a, b;
    for (const auto& x : m) {
        a.push_back(x.a);
        b.push_back(x.b);
    }
    const Mat3 Ta = hartley_normalizer(a), Tb = hartley_normalizer(b);
    Eigen::MatrixXd A(2 * m.size(), 9);
    for (std::size_t i = 0; i < m.size(); ++i) {
        const Vec3 p = Ta * Vec3(a[i].x(), a[i].y(), 1), q = Tb * Vec3(b[i].x(), b[i].y(), 1);
        A.row(2 * i) << 0, 0, 0, -q.z() * p.transpose(), q.y() * p.transpose();
        A.row(2 * i + 1) << q.z() * p.transpose(), 0, 0, 0, -q.x() * p.transpose();
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
    const auto sv = svd.singularValues();
    // a unique solution needs rank 8
    if (sv.size() >= 8 && sv(7) <= 1e-10 * sv(0)) return false;
    const Eigen::VectorXd h = svd.matrixV().col(8);
    Mat3 Hn;
    Hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
    H = Tb.inverse() * Hn * Ta;
    if (!H.allFinite() || std::abs(H.determinant()) < 1e-300) return false;
    if (std::abs(H(2, 2)) > 1e-12) H /= H(2, 2);
    return std::abs(H.determinant()) > 1e-12;
}

inline bool collinear(const Vec2& a, const Vec2& b, const Vec2& c) {
    const Vec2 u = b - a, v = c - a;
    const double cr = std::abs(u.x() * v.y() - u.y() * v.x());
    return cr <= 1e-9 * std::max(1.0, u.norm() * v.norm());
}

inline bool sample_degenerate(const std::vector<PointMatch>& s) {
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j)
            for (int k = j + 1; k < 4; ++k)
                if (collinear(s[i].a, s[j].a, s[k].a) || collinear(s[i].b, s[j].b, s[k].b)) return true;
    return false;
}

}  // namespace detail

/// Larger of the forward and backward transfer distances.
inline double transfer_error(const Mat3& H, const Mat3& Hinv, const PointMatch& m) {
    const Vec2 f = apply_homography(H, m.a), r = apply_homography(Hinv, m.b);
    const double e = std::max((f - m.b).norm(), (r - m.a).norm());
    return std::isfinite(e) ? e : std::numeric_limits<double>::infinity();
}

struct HomographyRansacParams {
    int iterations = 2000;
    double inlier_tol_px = 3.0;
    std::uint64_t seed = 1;
};

struct HomographyResult {
    Mat3 H = Mat3::Identity();
    std::vector<int> inliers;
};

inline std::vector<int> homography_inliers(const Mat3& H, const std::vector<PointMatch>& m, double tol) {
    const Mat3 Hi = H.inverse();
    std::vector<int> in;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (transfer_error(H, Hi, m[i]) < tol) in.push_back(static_cast<int>(i));
    return in;
}

inline HomographyResult ransac_homography(const std::vector<PointMatch>& m, const HomographyRansacParams& p = {}) {
    if (m.size() < 4) fail("TooFewMatches", "need at least 4 matches, got " + std::to_string(m.size()));
    if (p.iterations <= 0 || !(p.inlier_tol_px > 0)) fail("InvalidParameter", "iterations and tolerance must be > 0");
    std::mt19937_64 rng(p.seed);
    const int n = static_cast<int>(m.size());
    std::vector<std::array<int, 4>> samples(static_cast<std::size_t>(p.iterations));
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (auto& s : samples) {
        for (int i = 0; i < n; ++i) idx[i] = i;
        for (int k = 0; k < 4; ++k) {
            std::uniform_int_distribution<int> u(k, n - 1);
            std::swap(idx[k], idx[u(rng)]);
            s[k] = idx[k];
        }
    }
    std::vector<int> counts(samples.size(), -1);
    std::vector<Mat3> models(samples.size(), Mat3::Identity());
    parallel_for(0, samples.size(), [&](std::size_t t) {
        std::vector<PointMatch> s;
        for (int k : samples[t]) s.push_back(m[k]);
        if (detail::sample_degenerate(s)) return;
        Mat3 H;
        if (!detail::dlt_homography(s, H)) return;
        models[t] = H;
        counts[t] = static_cast<int>(homography_inliers(H, m, p.inlier_tol_px).size());
    });
    std::size_t best = 0;
    for (std::size_t t = 1; t < samples.size(); ++t)
        if (counts[t] > counts[best]) best = t;
    if (counts[best] < 4) fail("NoConsensus", "best consensus below 4 matches");
    HomographyResult r;
    r.H = models[best];
    r.inliers = homography_inliers(r.H, m, p.inlier_tol_px);
    for (int round = 0; round < 3; ++round) {
        std::vector<PointMatch> in;
        for (int i : r.inliers) in.push_back(m[i]);
        Mat3 H;
        if (!detail::dlt_homography(in, H)) break;
        auto next = homography_inliers(H, m, p.inlier_tol_px);
        if (next.size() < r.inliers.size()) break;
        const bool same = next == r.inliers;
        r.H = H;
        r.inliers = std::move(next);
        if (same) break;
    }
    r.H = normalize_homography(r.H);
    return r;
}

inline nlohmann::json homography_to_json(const Mat3& H) {
    nlohmann::json a = nlohmann::json::array();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) a.push_back(H(i, j));
    return a;
}

inline Mat3 homography_from_json(const nlohmann::json& j) {
    const auto& a = j.is_object() && j.contains("H") ? j.at("H") : j;
    if (!a.is_array() || a.size() != 9) fail("InvalidHomography", "expected 9 row-major numbers");
    Mat3 H;
    for (int i = 0; i < 9; ++i) {
        if (!a[i].is_number()) fail("InvalidHomography", "non-numeric entry");
        H(i / 3, i % 3) = a[i].get<double>();
    }
    return normalize_homography(H);
}

inline std::vector<PointMatch> matches_from_csv(std::istream& in) {
    std::string line;
    std::vector<PointMatch> out;
    bool header = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!header) {
            if (line != "uA,vA,uB,vB") fail("MissingHeaderKey", "matches CSV header must be uA,vA,uB,vB");
            header = true;
            continue;
        }
        std::stringstream ss(line);
        std::string tok;
        std::vector<double> v;
        while (std::getline(ss, tok, ',')) {
            try {
                std::size_t used = 0;
                v.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (...) {
                fail("UnparsableNumber", "line " + std::to_string(lineno) + ": '" + tok + "'");
            }
        }
        if (v.size() != 4) fail("NonRectangularBody", "line " + std::to_string(lineno) + ": expected 4 fields");
        out.push_back({Vec2(v[0], v[1]), Vec2(v[2], v[3])});
    }
    if (!header) fail("MissingHeaderKey", "empty matches CSV");
    return out;
}

inline std::string matches_to_csv(const std::vector<PointMatch>& m) {
    std::ostringstream out;
    out << std::setprecision(17) << "uA,vA,uB,vB\n";
    for (const auto& x : m) out << x.a.x() << ',' << x.a.y() << ',' << x.b.x() << ',' << x.b.y() << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Registration

struct AerialTile {
    Image image;
    double gsd = 0.3;
};

struct RegisteredCrop {
    Image crop;                    // axis-aligned aerial crop containing the footprint
    int x0 = 0, y0 = 0;            // crop origin in aerial pixels
    std::array<Vec2, 4> polygon;   // footprint corners in aerial pixels
    double coverage = 0.0;         // fraction of the footprint inside the aerial tile
    double footprint_area_m2 = 0.0;
    Image aligned;                 // aerial resampled onto the top-down grid (NaN outside)
};

/// Outer corners of an image in pixel-center coordinates.
inline std::array<Vec2, 4> image_corners(int w, int h) {
    return {Vec2(-0.5, -0.5), Vec2(w - 0.5, -0.5), Vec2(w - 0.5, h - 0.5), Vec2(-0.5, h - 0.5)};
}

inline double polygon_area(const std::vector<Vec2>& p) {
    double a = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const Vec2& u = p[i];
        const Vec2& v = p[(i + 1) % p.size()];
        a += u.x() * v.y() - v.x() * u.y();
    }
    return 0.5 * std::abs(a);
}

/// Sutherland-Hodgman clip of a polygon against an axis-aligned box.
inline std::vector<Vec2> clip_to_box(std::vector<Vec2> poly, double xmin, double ymin, double xmax, double ymax) {
    auto clip = [&](auto inside, auto cross) {
        std::vector<Vec2> out;
        for (std::size_t i = 0; i < poly.size(); ++i) {
            const Vec2 cur = poly[i], prev = poly[(i + poly.size() - 1) % poly.size()];
            const bool ci = inside(cur), pi = inside(prev);
            if (ci) {
                if (!pi) out.push_back(cross(prev, cur));
                out.push_back(cur);
            } else if (pi) {
                out.push_back(cross(prev, cur));
            }
        }
        poly = std::move(out);
    };
    auto at_x = [](double x) {
        return [x](const Vec2& a, const Vec2& b) { return Vec2(x, a.y() + (b.y() - a.y()) * (x - a.x()) / (b.x() - a.x())); };
    };
    auto at_y = [](double y) {
        return [y](const Vec2& a, const Vec2& b) { return Vec2(a.x() + (b.x() - a.x()) * (y - a.y()) / (b.y() - a.y()), y); };
    };
    clip([&](const Vec2& p) { return p.x() >= xmin; }, at_x(xmin));
    clip([&](const Vec2& p) { return p.x() <= xmax; }, at_x(xmax));
    clip([&](const Vec2& p) { return p.y() >= ymin; }, at_y(ymin));
    clip([&](const Vec2& p) { return p.y() <= ymax; }, at_y(ymax));
    return poly;
}

/// H maps top-down pixels to aerial pixels.
inline RegisteredCrop register_crop(const TopDownView& td, const AerialTile& aerial, const Mat3& H_in) {
    const Mat3 H = normalize_homography(H_in);
    const Image& a = aerial.image;
    if (td.raster.empty() || a.empty()) fail("EmptyInput", "top-down view and aerial tile must be non-empty");
    RegisteredCrop r;
    const auto corners = image_corners(td.raster.width, td.raster.height);
    for (int k = 0; k < 4; ++k) r.polygon[k] = apply_homography(H, corners[k]);
    std::vector<Vec2> poly(r.polygon.begin(), r.polygon.end());
    const double area = polygon_area(poly);
    const auto inside = clip_to_box(poly, -0.5, -0.5, a.width - 0.5, a.height - 0.5);
    r.coverage = area > 0 && inside.size() >= 3 ? polygon_area(inside) / area : 0.0;
    r.footprint_area_m2 = area * aerial.gsd * aerial.gsd;
    if (!(r.coverage >= 0.1)) fail("FootprintOutsideAerial", "footprint coverage below 10%");
    double xmin = inside[0].x(), xmax = xmin, ymin = inside[0].y(), ymax = ymin;
    for (const auto& p : inside) {
        xmin = std::min(xmin, p.x());
        xmax = std::max(xmax, p.x());
        ymin = std::min(ymin, p.y());
        ymax = std::max(ymax, p.y());
    }
    r.x0 = std::clamp(static_cast<int>(std::floor(xmin + 0.5)), 0, a.width - 1);
    r.y0 = std::clamp(static_cast<int>(std::floor(ymin + 0.5)), 0, a.height - 1);
    const int x1 = std::clamp(static_cast<int>(std::ceil(xmax - 0.5)), r.x0, a.width - 1);
    const int y1 = std::clamp(static_cast<int>(std::ceil(ymax - 0.5)), r.y0, a.height - 1);
    r.crop = Image(x1 - r.x0 + 1, y1 - r.y0 + 1);
    for (int y = 0; y < r.crop.height; ++y)
        for (int x = 0; x < r.crop.width; ++x) r.crop.at(x, y) = a.at(r.x0 + x, r.y0 + y);
    const int w = td.raster.width, h = td.raster.height;
    r.aligned = Image(w, h, std::numeric_limits<float>::quiet_NaN());
    parallel_for(0, static_cast<std::size_t>(h), [&](std::size_t row) {
        const int y = static_cast<int>(row);
        for (int x = 0; x < w; ++x) {
            const Vec2 q = apply_homography(H, Vec2(x, y));
            if (q.x() >= -0.5 && q.y() >= -0.5 && q.x() <= a.width - 0.5 && q.y() <= a.height - 0.5)
                r.aligned.at(x, y) = static_cast<float>(sample_bilinear(a, q.x(), q.y()));
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// Change scoring

enum class SceneClass { Urban, Rural };

inline SceneClass scene_class_from_string(const std::string& s) {
    if (s == "urban") return SceneClass::Urban;
    if (s == "rural") return SceneClass::Rural;
    fail("InvalidParameter", "scene class must be urban or rural, got '" + s + "'");
}

inline std::string to_string(SceneClass c) { return c == SceneClass::Urban ? "urban" : "rural"; }

struct ChangeThresholds {
    double r_min_rural = 0.35;
    double r_min_urban = 0.20;
    double z_min = -2.5;
    double changed_fraction = 0.25;
    double mad_floor = 1e-6;

    double r_min(SceneClass c) const { return c == SceneClass::Urban ? r_min_urban : r_min_rural; }
};

struct ChangeScore {
    int row = 0;
    int col = 0;
    double r = std::numeric_limits<double>::quiet_NaN();
    double z = std::numeric_limits<double>::quiet_NaN();
    bool changed = false;
    bool degenerate = false;
};

struct ChangeReport {
    std::vector<ChangeScore> tiles;
    SceneClass scene = SceneClass::Rural;
    double flagged_fraction = 0.0;
    bool changed = false;
    int degenerate_tiles = 0;
};

/// Zero-mean normalized cross-correlation over pixels valid in both inputs.
/// NaN when fewer than 2 shared pixels or either side has zero variance.
inline double ncc(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0, mb = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::isfinite(a[i]) && std::isfinite(b[i])) {
            ma += a[i];
            mb += b[i];
            ++n;
        }
    if (n < 2) return std::numeric_limits<double>::quiet_NaN();
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::isfinite(a[i]) && std::isfinite(b[i])) {
            const double x = a[i] - ma, y = b[i] - mb;
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
    // relative floor: constant tiles leave only rounding residue
    const double scale_a = std::max(std::abs(ma), 1.0), scale_b = std::max(std::abs(mb), 1.0);
    if (saa <= 1e-24 * n * scale_a * scale_a || sbb <= 1e-24 * n * scale_b * scale_b)
        return std::numeric_limits<double>::quiet_NaN();
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per-tile NCC against the aerial region, robust z = (r - median) / (1.4826 MAD).
template <typename T>
ChangeReport change_zscore(const Raster<T>& topdown, const Raster<T>& aerial, int tile, SceneClass scene,
                           const ChangeThresholds& th = {}) {
    if (topdown.width != aerial.width || topdown.height != aerial.height)
        fail("SizeMismatch", "regions must have the same size");
    if (tile <= 0 || topdown.width % tile || topdown.height % tile)
        fail("InvalidParameter", "tile size must divide the region size");
    const int tx = topdown.width / tile, ty = topdown.height / tile;
    ChangeReport rep;
    rep.scene = scene;
    rep.tiles.resize(static_cast<std::size_t>(tx) * ty);
    parallel_for(0, rep.tiles.size(), [&](std::size_t k) {
        const int row = static_cast<int>(k) / tx, col = static_cast<int>(k) % tx;
        std::vector<double> a, b;
        a.reserve(static_cast<std::size_t>(tile) * tile);
        b.reserve(a.capacity());
        for (int y = row * tile; y < (row + 1) * tile; ++y)
            for (int x = col * tile; x < (col + 1) * tile; ++x) {
                a.push_back(topdown.at(x, y));
                b.push_back(aerial.at(x, y));
            }
        auto& t = rep.tiles[k];
        t.row = row;
        t.col = col;
        t.r = ncc(a, b);
        t.degenerate = !std::isfinite(t.r);
    });
    std::vector<double> rs;
    for (const auto& t : rep.tiles)
        if (!t.degenerate) rs.push_back(t.r);
    rep.degenerate_tiles = static_cast<int>(rep.tiles.size() - rs.size());
    if (rs.empty()) fail("DegenerateTile", "every tile has zero variance in one of the inputs");
    const double med = median_of(rs);
    std::vector<double> dev;
    for (double r : rs) dev.push_back(std::abs(r - med));
    const double mad = std::max(median_of(dev), th.mad_floor);
    int flagged = 0;
    for (auto& t : rep.tiles) {
        if (t.degenerate) continue;
        t.z = (t.r - med) / (1.4826 * mad);
        t.changed = t.r < th.r_min(scene) || t.z < th.z_min;
        flagged += t.changed;
    }
    rep.flagged_fraction = static_cast<double>(flagged) / static_cast<double>(rs.size());
    rep.changed = rep.flagged_fraction > th.changed_fraction;
    return rep;
}

inline nlohmann::json change_report_to_json(const ChangeReport& r) {
    nlohmann::json tiles = nlohmann::json::array();
    for (const auto& t : r.tiles) {
        nlohmann::json j{{"row", t.row}, {"col", t.col}, {"flag", t.changed}, {"degenerate", t.degenerate}};
        j["r"] = t.degenerate ? nlohmann::json(nullptr) : nlohmann::json(t.r);
        j["z"] = t.degenerate ? nlohmann::json(nullptr) : nlohmann::json(t.z);
        tiles.push_back(j);
    }
    return {{"tiles", tiles},
            {"scene_class", to_string(r.scene)},
            {"flagged_fraction", r.flagged_fraction},
            {"degenerate_tiles", r.degenerate_tiles},
            {"verdict", r.changed ? "changed" : "unchanged"}};
}

}  // namespace terrapose
