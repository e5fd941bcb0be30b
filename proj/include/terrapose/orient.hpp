#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "terrapose/camera.hpp"
#include "terrapose/error.hpp"
#include "terrapose/features.hpp"
#include "terrapose/panorama.hpp"
#include "terrapose/parallel.hpp"
#include "terrapose/raster.hpp"

namespace terrapose {

// ---------------------------------------------------------------------------
// Skylines

/// Query skyline: per image column, the first ground row below the sky.
struct QuerySkyline {
    std::vector<double> rows;
    std::vector<bool> valid;

    int width() const { return static_cast<int>(rows.size()); }
    int valid_count() const { return static_cast<int>(std::count(valid.begin(), valid.end(), true)); }
};

/// Reference skyline: elevation angles (radians) at azimuth k * step over
/// the full circle.
struct ReferenceSkyline {
    double azimuth_step = 0.0;
    std::vector<double> elevation;

    int size() const { return static_cast<int>(elevation.size()); }
    double azimuth(int k) const { return k * azimuth_step; }
};

inline ReferenceSkyline reference_from_panorama(const SyntheticPanorama& p) {
    return {kTwoPi / static_cast<double>(p.records.size()), p.elevations()};
}

inline QuerySkyline skyline_from_rows(const std::vector<int>& rows) {
    QuerySkyline q;
    for (int r : rows) {
        q.rows.push_back(r);
        q.valid.push_back(r >= 0);
    }
    return q;
}

struct SkylineParams {
    double gradient_threshold = 0.1;
    int smoothing_radius = 1;  // horizontal box half-width, pixels
};

/// Topmost row whose vertical intensity step (after horizontal box
/// smoothing) exceeds the threshold; NaN pixels are treated as sky.
inline QuerySkyline extract_image_skyline(const Image& img, const SkylineParams& p = {}) {
    if (img.empty()) fail("EmptyImage", "image has no pixels");
    const int w = img.width, h = img.height, rad = std::max(0, p.smoothing_radius);
    Image sm(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0;
            int n = 0;
            for (int dx = -rad; dx <= rad; ++dx) {
                const int xx = std::clamp(x + dx, 0, w - 1);
                const float v = img.at(xx, y);
                s += is_nodata(v) ? kSkyValue : v;
                ++n;
            }
            sm.at(x, y) = static_cast<float>(s / n);
        }
    QuerySkyline q;
    q.rows.assign(static_cast<std::size_t>(w), -1.0);
    q.valid.assign(static_cast<std::size_t>(w), false);
    for (int x = 0; x < w; ++x)
        for (int y = 1; y < h; ++y)
            if (std::abs(sm.at(x, y) - sm.at(x, y - 1)) > p.gradient_threshold) {
                q.rows[x] = y;
                q.valid[x] = true;
                break;
            }
    if (q.valid_count() == 0) fail("AllColumnsInvalid", "no column has a vertical step above the threshold");
    return q;
}

inline std::string query_skyline_to_csv(const QuerySkyline& q) {
    std::ostringstream out;
    out.precision(10);
    out << "col,row,valid\n";
    for (int c = 0; c < q.width(); ++c) out << c << ',' << (q.valid[c] ? q.rows[c] : -1.0) << ',' << (q.valid[c] ? 1 : 0) << '\n';
    return out.str();
}

inline std::string reference_skyline_to_csv(const ReferenceSkyline& r) {
    std::ostringstream out;
    out.precision(12);
    out << "azimuth_deg,elev_deg\n";
    for (int k = 0; k < r.size(); ++k) out << rad2deg(r.azimuth(k)) << ',' << rad2deg(r.elevation[k]) << '\n';
    return out.str();
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv_rows(std::istream& in, const std::string& name,
                                                           const std::vector<std::string>& header) {
    std::string line;
    if (!std::getline(in, line)) fail("MissingHeaderKey", name + ": empty file");
    std::vector<std::vector<std::string>> rows;
    auto split = [](const std::string& s) {
        std::vector<std::string> f;
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            while (!tok.empty() && std::isspace(static_cast<unsigned char>(tok.back()))) tok.pop_back();
            while (!tok.empty() && std::isspace(static_cast<unsigned char>(tok.front()))) tok.erase(tok.begin());
            f.push_back(tok);
        }
        return f;
    };
    if (split(line) != header) fail("MissingHeaderKey", name + ": expected header " + line);
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto f = split(line);
        if (f.size() != header.size()) fail("NonRectangularBody", name + ": wrong field count");
        rows.push_back(std::move(f));
    }
    return rows;
}

inline double parse_double(const std::string& s, const std::string& name) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (...) {
        fail("UnparsableNumber", name + ": '" + s + "'");
    }
}

}  // namespace detail

inline QuerySkyline query_skyline_from_csv(std::istream& in, const std::string& name = "skyline") {
    QuerySkyline q;
    for (const auto& f : detail::read_csv_rows(in, name, {"col", "row", "valid"})) {
        const int c = static_cast<int>(detail::parse_double(f[0], name));
        if (c != q.width()) fail("NonRectangularBody", name + ": columns must be 0..W-1 in order");
        q.rows.push_back(detail::parse_double(f[1], name));
        q.valid.push_back(detail::parse_double(f[2], name) != 0.0);
    }
    if (q.rows.empty()) fail("NonRectangularBody", name + ": no rows");
    return q;
}

inline ReferenceSkyline reference_skyline_from_csv(std::istream& in, const std::string& name = "reference") {
    ReferenceSkyline r;
    std::vector<double> az;
    for (const auto& f : detail::read_csv_rows(in, name, {"azimuth_deg", "elev_deg"})) {
        az.push_back(deg2rad(detail::parse_double(f[0], name)));
        r.elevation.push_back(deg2rad(detail::parse_double(f[1], name)));
    }
    if (az.size() < 2) fail("NonRectangularBody", name + ": too few samples");
    r.azimuth_step = kTwoPi / static_cast<double>(az.size());
    for (std::size_t k = 0; k < az.size(); ++k)
        if (std::abs(az[k] - k * r.azimuth_step) > 1e-6) fail("InvalidAzimuthStep", name + ": azimuths must be uniform from 0");
    return r;
}

// ---------------------------------------------------------------------------
// Query in angle space

/// Query skyline resampled at the reference azimuth step. Offsets are
/// azimuths relative to the principal point, positive to the right;
/// elevations assume a level camera. Only valid samples are kept.
struct AngularQuery {
    double step = 0.0;
    std::vector<int> index;  // sample index on the uniform offset grid
    std::vector<double> offset;
    std::vector<double> elevation;

    int size() const { return static_cast<int>(offset.size()); }
};

inline double column_offset(const CameraIntrinsics& k, double u) { return std::atan2(u - k.ppu, k.focal_px); }

inline double pixel_elevation(const CameraIntrinsics& k, double u, double v) {
    return std::atan2(k.ppv - v, std::hypot(u - k.ppu, k.focal_px));
}

/// Bins valid columns onto the offset grid j * step (averaging columns in a
/// bin); empty bins are linearly interpolated across gaps of at most
/// `max_gap` steps.
inline AngularQuery query_angles(const QuerySkyline& q, const CameraIntrinsics& k, double step, double max_gap = 3.0) {
    if (static_cast<int>(q.valid.size()) != q.width()) fail("InvalidSkyline", "rows/valid length mismatch");
    std::vector<double> off, el;
    for (int c = 0; c < q.width(); ++c)
        if (q.valid[c] && std::isfinite(q.rows[c])) {
            off.push_back(column_offset(k, c));
            el.push_back(pixel_elevation(k, c, q.rows[c] - 0.5));  // boundary lies above the first ground row
        }
    AngularQuery a;
    a.step = step;
    if (off.empty()) return a;
    const int j0 = static_cast<int>(std::ceil(column_offset(k, 0) / step - 1e-9));
    const int j1 = static_cast<int>(std::floor(column_offset(k, q.width() - 1) / step + 1e-9));
    std::size_t lo = 0;
    for (int j = j0; j <= j1; ++j) {
        const double o = j * step;
        while (lo < off.size() && off[lo] < o - 0.5 * step) ++lo;
        double s = 0;
        int n = 0;
        std::size_t i = lo;
        for (; i < off.size() && off[i] < o + 0.5 * step; ++i) {
            s += el[i];
            ++n;
        }
        double e;
        if (n > 0) {
            e = s / n;
        } else {
            // i is the first column right of the bin, lo == i
            if (i == 0 || i >= off.size()) continue;
            const double ol = off[i - 1], orr = off[i];
            if (orr - ol > max_gap * step) continue;
            const double f = (o - ol) / (orr - ol);
            e = (1 - f) * el[i - 1] + f * el[i];
        }
        a.index.push_back(j - j0);
        a.offset.push_back(o);
        a.elevation.push_back(e);
    }
    return a;
}

// ---------------------------------------------------------------------------
// Dynamic time warping

struct DtwParams {
    double lambda = 0.5;   // weight of the slope term
    int min_valid = 8;
    int refine_iterations = 10;  // full-rotation attitude refinement; 0 keeps the linear fit
    double offset_search = 5.0 * kPi / 180.0;       // +- range of trial vertical offsets
    double offset_search_step = 0.5 * kPi / 180.0;  // 0 disables the search
};

/// Forward slope per sample step; NaN for the last sample.
inline std::vector<double> forward_slopes(const std::vector<double>& e, const std::vector<int>& index) {
    std::vector<double> s(e.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i + 1 < e.size(); ++i) s[i] = (e[i + 1] - e[i]) / (index[i + 1] - index[i]);
    return s;
}

inline double dtw_local_cost(double qe, double qs, double re, double rs, double lambda) {
    double c = std::abs(qe - re);
    if (!std::isnan(qs) && !std::isnan(rs)) c += lambda * std::abs(qs - rs);
    return c;
}

struct DtwPath {
    std::vector<std::pair<int, int>> cells;  // (query, reference), monotone
    std::vector<double> local;
    double total = 0.0;
};

/// Open-begin/open-end subsequence DTW of q against r with steps
/// (1,0), (0,1), (1,1). Minimizes the summed local cost.
inline DtwPath subsequence_dtw(const std::vector<double>& qe, const std::vector<double>& qs,
                               const std::vector<double>& re, const std::vector<double>& rs, double lambda) {
    const int n = static_cast<int>(qe.size()), m = static_cast<int>(re.size());
    if (n == 0 || m == 0) fail("TooFewValidColumns", "empty sequence");
    std::vector<double> prev(static_cast<std::size_t>(m)), cur(static_cast<std::size_t>(m));
    std::vector<unsigned char> from(static_cast<std::size_t>(n) * m, 0);  // 0 start, 1 diag, 2 up(i-1), 3 left(j-1)
    auto cost = [&](int i, int j) { return dtw_local_cost(qe[i], qs[i], re[j], rs[j], lambda); };
    for (int j = 0; j < m; ++j) prev[j] = cost(0, j);
    for (int i = 1; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double best = prev[j];
            unsigned char dir = 2;
            if (j > 0) {
                if (prev[j - 1] <= best) {
                    best = prev[j - 1];
                    dir = 1;
                }
                if (cur[j - 1] < best) {
                    best = cur[j - 1];
                    dir = 3;
                }
            }
            cur[j] = best + cost(i, j);
            from[static_cast<std::size_t>(i) * m + j] = dir;
        }
        std::swap(prev, cur);
    }
    int jend = 0;
    for (int j = 1; j < m; ++j)
        if (prev[j] < prev[jend]) jend = j;
    DtwPath p;
    p.total = prev[jend];
    int i = n - 1, j = jend;
    while (true) {
        p.cells.emplace_back(i, j);
        p.local.push_back(cost(i, j));
        const unsigned char d = from[static_cast<std::size_t>(i) * m + j];
        if (i == 0) break;
        if (d == 1) {
            --i;
            --j;
        } else if (d == 2) {
            --i;
        } else {
            --j;
        }
    }
    std::reverse(p.cells.begin(), p.cells.end());
    std::reverse(p.local.begin(), p.local.end());
    return p;
}

struct DtwPair {
    int query = 0;            // index into the AngularQuery
    int reference = 0;        // reference sample index in [0, n)
    double query_offset = 0.0;
    double query_elevation = 0.0;
    double reference_azimuth = 0.0;
    double reference_elevation = 0.0;
    double local_cost = 0.0;
};

struct DtwAlignment {
    std::vector<DtwPair> path;
    double total_cost = 0.0;
    double cost = 0.0;     // total / path length
    double heading = 0.0;  // radians, azimuth of the principal point
};

inline double circular_mean(const std::vector<double>& a) {
    double s = 0, c = 0;
    for (double x : a) {
        s += std::sin(x);
        c += std::cos(x);
    }
    return wrap_two_pi(std::atan2(s, c));
}

/// Aligns the angular query against the full-circle reference (duplicated
/// over two turns for wraparound).
inline DtwAlignment dtw_align(const AngularQuery& q, const ReferenceSkyline& ref, const DtwParams& p = {}) {
    if (q.size() < p.min_valid)
        fail("TooFewValidColumns", std::to_string(q.size()) + " valid samples, need " + std::to_string(p.min_valid));
    const int m = ref.size();
    if (m < 2 || !(ref.azimuth_step > 0)) fail("InvalidSkyline", "reference must cover the full circle");
    std::vector<double> re(2 * static_cast<std::size_t>(m));
    std::vector<int> ridx(re.size());
    for (std::size_t j = 0; j < re.size(); ++j) {
        re[j] = ref.elevation[j % m];
        ridx[j] = static_cast<int>(j);
    }
    std::vector<double> rs(re.size());
    for (std::size_t j = 0; j < re.size(); ++j) rs[j] = re[(j + 1) % re.size()] - re[j];
    const auto qs = forward_slopes(q.elevation, q.index);
    const auto path = subsequence_dtw(q.elevation, qs, re, rs, p.lambda);

    DtwAlignment a;
    a.total_cost = path.total;
    a.cost = path.total / static_cast<double>(path.cells.size());
    std::vector<double> h;
    for (std::size_t k = 0; k < path.cells.size(); ++k) {
        const auto [i, j] = path.cells[k];
        DtwPair pr;
        pr.query = i;
        pr.reference = j % m;
        pr.query_offset = q.offset[i];
        pr.query_elevation = q.elevation[i];
        pr.reference_azimuth = ref.azimuth(j % m);
        pr.reference_elevation = ref.elevation[j % m];
        pr.local_cost = path.local[k];
        a.path.push_back(pr);
        h.push_back(pr.reference_azimuth - pr.query_offset);
    }
    a.heading = circular_mean(h);
    return a;
}

struct TiltRollFit {
    double offset = 0.0;  // a in r = a + b * offset
    double slope = 0.0;   // b
};

/// Least-squares fit of residual (query - reference elevation) = a + b * offset.
inline TiltRollFit fit_residual(const DtwAlignment& al) {
    if (al.path.size() < 3) fail("DegenerateFit", "need at least 3 pairs");
    const double n = static_cast<double>(al.path.size());
    double mx = 0, my = 0;
    for (const auto& p : al.path) {
        mx += p.query_offset;
        my += p.query_elevation - p.reference_elevation;
    }
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0;
    for (const auto& p : al.path) {
        const double dx = p.query_offset - mx;
        sxx += dx * dx;
        sxy += dx * (p.query_elevation - p.reference_elevation - my);
    }
    if (sxx <= 1e-24) fail("DegenerateFit", "all pairs at one column");
    TiltRollFit f;
    f.slope = sxy / sxx;
    f.offset = my - f.slope * mx;
    return f;
}

/// Heading from the alignment, tilt = -a, roll = atan(b).
inline Angles angles_from_alignment(const DtwAlignment& al) {
    const auto f = fit_residual(al);
    return {al.heading, -f.offset, std::atan(f.slope)};
}

struct OrientationResult {
    Angles angles;
    double dtw_cost = 0.0;
    std::string method;
    DtwAlignment alignment;
};

/// Linear interpolation of the circular reference at an arbitrary azimuth.
inline double reference_at(const ReferenceSkyline& ref, double az) {
    const double x = wrap_two_pi(az) / ref.azimuth_step;
    const int k0 = static_cast<int>(std::floor(x)) % ref.size();
    const double f = x - std::floor(x);
    return (1 - f) * ref.elevation[k0] + f * ref.elevation[(k0 + 1) % ref.size()];
}

/// Full-rotation attitude refinement: each query sample is turned back into
/// its camera ray, rotated by (heading, tilt, roll) and required to land on
/// the reference skyline. Gauss-Newton with Huber weights, numeric Jacobian.
struct AttitudeFit {
    Angles angles;
    double loss = 0.0;  // mean Huber loss of the final residuals
};

inline AttitudeFit refine_attitude(const AngularQuery& q, const ReferenceSkyline& ref, const Angles& init,
                                   int iterations = 10, double huber = 0.5 * kPi / 180.0) {
    std::vector<Vec3> rays(static_cast<std::size_t>(q.size()));
    for (int i = 0; i < q.size(); ++i) {
        const double th = q.offset[i], e = q.elevation[i];
        rays[i] = Vec3(std::sin(th) * std::cos(e), -std::sin(e), std::cos(th) * std::cos(e));
    }
    auto residuals = [&](const Eigen::Vector3d& x) {
        const Mat3 Rt = rotation_from_angles({x(0), x(1), x(2)}).transpose();
        Eigen::VectorXd r(q.size());
        for (int i = 0; i < q.size(); ++i) {
            const Vec3 d = Rt * rays[i];
            r(i) = std::asin(std::clamp(d.z(), -1.0, 1.0)) - reference_at(ref, std::atan2(d.x(), d.y()));
        }
        return r;
    };
    Eigen::Vector3d x(init.heading, init.tilt, init.roll);
    for (int it = 0; it < iterations; ++it) {
        const Eigen::VectorXd r = residuals(x);
        Eigen::MatrixXd J(q.size(), 3);
        for (int k = 0; k < 3; ++k) {
            Eigen::Vector3d a = x, b = x;
            a(k) += 1e-6;
            b(k) -= 1e-6;
            J.col(k) = (residuals(a) - residuals(b)) / 2e-6;
        }
        Eigen::VectorXd w(q.size());
        for (int i = 0; i < q.size(); ++i) w(i) = std::abs(r(i)) <= huber ? 1.0 : huber / std::abs(r(i));
        const Eigen::Matrix3d A = J.transpose() * w.asDiagonal() * J;
        const Eigen::Vector3d g = J.transpose() * w.asDiagonal() * r;
        const Eigen::Vector3d dx = A.ldlt().solve(-g);
        if (!dx.allFinite()) break;
        x += dx;
        if (dx.norm() < 1e-10) break;
    }
    if (!x.allFinite()) x = Eigen::Vector3d(init.heading, init.tilt, init.roll);
    AttitudeFit fit;
    fit.angles = {wrap_two_pi(x(0)), x(1), wrap_pi(x(2))};
    const Eigen::VectorXd r = residuals(x);
    for (int i = 0; i < r.size(); ++i) {
        const double a = std::abs(r(i));
        fit.loss += a <= huber ? 0.5 * a * a : huber * (a - 0.5 * huber);
    }
    fit.loss /= std::max<Eigen::Index>(r.size(), 1);
    return fit;
}

/// Skyline orientation: DTW over a few trial vertical offsets (lowest cost
/// wins), linear tilt/roll fit on the warped pairs, then full-rotation
/// refinement of all three angles.
inline OrientationResult orient_skyline(const AngularQuery& q, const ReferenceSkyline& ref, const DtwParams& p = {}) {
    OrientationResult out;
    out.method = "dtw";
    std::vector<double> trials{0.0};
    if (p.offset_search_step > 0)
        for (double a = p.offset_search_step; a <= p.offset_search + 1e-12; a += p.offset_search_step) {
            trials.push_back(a);
            trials.push_back(-a);
        }
    std::vector<DtwAlignment> cand(trials.size());
    parallel_for(0, trials.size(), [&](std::size_t k) {
        AngularQuery adj = q;
        for (auto& e : adj.elevation) e -= trials[k];
        cand[k] = dtw_align(adj, ref, p);
        for (auto& pr : cand[k].path) pr.query_elevation = q.elevation[pr.query];
    });
    std::size_t best = 0;
    for (std::size_t k = 1; k < cand.size(); ++k)
        if (cand[k].cost < cand[best].cost) best = k;
    out.alignment = cand[best];
    out.angles = angles_from_alignment(out.alignment);
    if (p.refine_iterations > 0) {
        // refine every candidate; the smallest final loss wins (ties: lowest DTW cost first)
        std::vector<std::size_t> order(cand.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return cand[a].cost < cand[b].cost; });
        std::vector<AttitudeFit> fits(cand.size());
        parallel_for(0, cand.size(), [&](std::size_t k) {
            fits[k] = refine_attitude(q, ref, angles_from_alignment(cand[k]), p.refine_iterations);
        });
        std::size_t win = order.front();
        for (std::size_t k : order)
            if (fits[k].loss < fits[win].loss) win = k;
        out.alignment = cand[win];
        out.angles = fits[win].angles;
    }
    out.dtw_cost = out.alignment.cost;
    return out;
}

inline nlohmann::json orientation_to_json(const OrientationResult& r) {
    return {{"heading_deg", rad2deg(r.angles.heading)},
            {"tilt_deg", rad2deg(r.angles.tilt)},
            {"roll_deg", rad2deg(r.angles.roll)},
            {"dtw_cost", r.dtw_cost},
            {"method", r.method}};
}

// ---------------------------------------------------------------------------
// HOG orientation

struct HogOrientParams {
    std::vector<int> scales{16, 32, 64};
    double prefilter_sigma = 1.5;  // Gaussian blur applied to query and strip, pixels
    HogParams hog;
};

struct HogOrientResult {
    std::vector<double> score;  // per strip column: left query edge at that column
    int best_column = 0;
    double heading = 0.0;  // azimuth of the query's center column
    double best_score = 0.0;
};

/// Correlates multi-scale HOG patches of a query (cylindrical, same angular
/// step as the strip, top row at strip row `row_offset`) against every
/// horizontal placement in the 360-degree strip.
inline HogOrientResult hog_orient(const Image& query, int row_offset, const Image& strip, const StripGeometry& geo,
                                  const HogOrientParams& p = {}) {
    const auto& hp = p.hog;
    const int W = strip.width;
    if (W != geo.columns()) fail("InvalidStrip", "strip width does not match its geometry");
    if (W % hp.cell) fail("InvalidStrip", "strip width must be a multiple of the cell size");
    if (row_offset < 0 || row_offset + query.height > strip.height)
        fail("QueryTooSmallForScale", "query rows fall outside the strip");
    if (query.width > W) fail("QueryTooSmallForScale", "query wider than the strip");
    if (p.scales.empty()) fail("QueryTooSmallForScale", "no scales");
    for (int s : p.scales) {
        if (s <= 0 || s % (2 * hp.cell)) fail("QueryTooSmallForScale", "scales must be multiples of 16");
        if (s > query.width || s > query.height)
            fail("QueryTooSmallForScale", "patch of " + std::to_string(s) + " px exceeds the query");
    }
    const auto qg = compute_gradients(gaussian_blur(query, p.prefilter_sigma));
    const auto sg = compute_gradients(gaussian_blur(strip, p.prefilter_sigma, true), true);
    const int cells_y = query.height / hp.cell;
    std::vector<CellHistograms> phase(static_cast<std::size_t>(hp.cell));
    parallel_for(0, phase.size(), [&](std::size_t ph) {
        phase[ph] = cell_histograms(sg, static_cast<int>(ph), row_offset, W / hp.cell, cells_y, hp, true);
    });

    std::vector<double> total(static_cast<std::size_t>(W), 0.0);
    for (int s : p.scales) {
        const int stride = s / 2, nc = s / hp.cell;
        std::vector<int> px, py;
        for (int y = 0; y + s <= query.height; y += stride) py.push_back(y);
        for (int x = 0; x + s <= query.width; x += stride) px.push_back(x);
        // query descriptors [iy][ix]
        std::vector<std::vector<double>> qd;
        for (int y : py)
            for (int x : px) {
                qd.push_back(hog_descriptor(qg, x, y, s, s, hp));
                standardize(qd.back());
            }
        // strip descriptors [iy][X]
        std::vector<std::vector<double>> sd(py.size() * static_cast<std::size_t>(W));
        parallel_for(0, static_cast<std::size_t>(W), [&](std::size_t X) {
            const int ph = static_cast<int>(X) % hp.cell;
            const int cx0 = (static_cast<int>(X) - ph) / hp.cell;
            for (std::size_t iy = 0; iy < py.size(); ++iy) {
                auto d = blocks_descriptor(phase[ph], cx0, py[iy] / hp.cell, nc, nc, hp, true);
                standardize(d);
                sd[iy * W + X] = std::move(d);
            }
        });
        const double inv = 1.0 / static_cast<double>(qd.size() * p.scales.size());
        parallel_for(0, static_cast<std::size_t>(W), [&](std::size_t k) {
            double acc = 0;
            for (std::size_t iy = 0; iy < py.size(); ++iy)
                for (std::size_t ix = 0; ix < px.size(); ++ix) {
                    const auto& a = qd[iy * px.size() + ix];
                    const auto& b = sd[iy * W + (k + px[ix]) % W];
                    double dot = 0;
                    for (std::size_t t = 0; t < a.size(); ++t) dot += a[t] * b[t];
                    acc += dot;
                }
            total[k] += acc * inv;
        });
    }
    HogOrientResult r;
    r.score = std::move(total);
    r.best_column = static_cast<int>(std::max_element(r.score.begin(), r.score.end()) - r.score.begin());
    r.best_score = r.score[r.best_column];
    r.heading = wrap_two_pi((r.best_column + 0.5 * (query.width - 1)) * geo.angular_step);
    return r;
}

/// Resamples a perspective image onto the strip's cylindrical grid assuming
/// a level camera. Returns the rows fully inside the image and the strip row
/// of the first one.
struct CylindricalQuery {
    Image image;
    int row_offset = 0;
    int center_column = 0;  // column looking along the principal point
};

inline CylindricalQuery perspective_to_cylindrical(const Image& img, const CameraIntrinsics& k, const StripGeometry& geo) {
    const double step = geo.angular_step;
    const int j0 = static_cast<int>(std::ceil(column_offset(k, 0) / step));
    const int j1 = static_cast<int>(std::floor(column_offset(k, img.width - 1) / step));
    const int ncol = j1 - j0 + 1;
    auto pixel = [&](double az, double el) {
        const Vec3 d(std::sin(az) * std::cos(el), -std::sin(el), std::cos(az) * std::cos(el));
        return Vec2(k.ppu + k.focal_px * d.x() / d.z(), k.ppv + k.focal_px * d.y() / d.z());
    };
    std::vector<int> rows;
    for (int r = 0; r < geo.rows(); ++r) {
        bool inside = true;
        for (int j : {j0, j1}) {
            const Vec2 uv = pixel(j * step, geo.elevation(r));
            if (uv.y() < 0 || uv.y() > img.height - 1) inside = false;
        }
        if (inside) rows.push_back(r);
    }
    if (rows.empty() || ncol <= 0) fail("QueryTooSmallForScale", "image covers no strip rows");
    CylindricalQuery out;
    out.row_offset = rows.front();
    out.center_column = -j0;
    const int nrow = rows.back() - rows.front() + 1;
    out.image = Image(ncol, nrow);
    for (int r = 0; r < nrow; ++r)
        for (int c = 0; c < ncol; ++c) {
            const Vec2 uv = pixel((j0 + c) * step, geo.elevation(out.row_offset + r));
            out.image.at(c, r) = static_cast<float>(sample_bilinear(img, uv.x(), uv.y()));
        }
    return out;
}

}  // namespace terrapose
