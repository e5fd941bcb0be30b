#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "terrapose/camera.hpp"
#include "terrapose/parallel.hpp"
#include "terrapose/raster.hpp"
#include "terrapose/terrain.hpp"

namespace terrapose {

constexpr double kEarthRadius = 6371000.0;
constexpr double kEyeHeight = 1.6;
constexpr double kMinClearance = 0.1;

struct CurvatureModel {
    bool enabled = false;
    double refraction_k = 0.13;

    /// Apparent drop of a target at ground distance d.
    double drop(double d) const { return enabled ? d * d * (1.0 - refraction_k) / (2.0 * kEarthRadius) : 0.0; }
};

/// Camera position after the ground-clearance rule: a camera at or below
/// terrain + 0.1 m is lifted to terrain + 1.6 m.
struct PlacedCamera {
    Vec3 position;
    bool raised = false;
};

inline PlacedCamera place_camera(const DemGrid& grid, const Vec3& cam) {
    if (!std::isfinite(cam.x()) || !std::isfinite(cam.y()) || !grid.contains(cam.x(), cam.y()))
        fail("CameraOutsideGrid", "camera position outside the DEM extent");
    const double ground = sample_elevation(grid, cam.x(), cam.y());
    PlacedCamera out{cam, false};
    if (!std::isfinite(cam.z()) || cam.z() <= ground + kMinClearance) {
        out.position.z() = ground + kEyeHeight;
        out.raised = true;
    }
    return out;
}

namespace detail {

/// Horizontal distance from (x, y) along unit (dx, dy) to the grid boundary.
inline double distance_to_boundary(const DemGrid& g, double x, double y, double dx, double dy) {
    double t = std::numeric_limits<double>::infinity();
    if (dx > 1e-15) t = std::min(t, (g.max_x() - x) / dx);
    if (dx < -1e-15) t = std::min(t, (g.origin_easting - x) / dx);
    if (dy > 1e-15) t = std::min(t, (g.max_y() - y) / dy);
    if (dy < -1e-15) t = std::min(t, (g.origin_northing - y) / dy);
    return std::max(0.0, t);
}

/// Ground distances marched along a ray: multiples of cell_size/2, with a
/// final sample exactly at the limit.
struct MarchPlan {
    double step;
    double limit;
    int count;  // number of samples, last one at `limit`
    double at(int i) const { return i + 1 == count ? limit : (i + 1) * step; }
};

inline MarchPlan plan_march(const DemGrid& g, double x, double y, double dx, double dy, double max_range) {
    MarchPlan p;
    p.step = g.cell_size / 2.0;
    p.limit = std::min(max_range, distance_to_boundary(g, x, y, dx, dy));
    if (p.limit <= 0) {
        p.count = 0;
        return p;
    }
    int n = static_cast<int>(std::floor(p.limit / p.step));
    if (n * p.step < p.limit) ++n;
    p.count = std::max(n, 1);
    return p;
}

}  // namespace detail

inline int azimuth_count(double azimuth_step) {
    if (!(azimuth_step > 0) || azimuth_step > kTwoPi) fail("InvalidAzimuthStep", "azimuth step must be in (0, 2pi]");
    const double n = std::round(kTwoPi / azimuth_step);
    if (std::abs(n * azimuth_step - kTwoPi) > 1e-9) fail("InvalidAzimuthStep", "azimuth step must divide 360 degrees");
    return static_cast<int>(n);
}

struct HorizonRecord {
    double elevation = 0.0;  // radians
    double range = 0.0;      // horizontal distance, meters
    Vec3 point = Vec3::Zero();
};

struct SyntheticPanorama {
    double azimuth_step = 0.0;
    Vec3 camera = Vec3::Zero();
    bool camera_raised = false;
    std::vector<HorizonRecord> records;  // records[k] at azimuth k * azimuth_step

    double azimuth(std::size_t k) const { return k * (kTwoPi / static_cast<double>(records.size())); }
    std::vector<double> elevations() const {
        std::vector<double> e(records.size());
        for (std::size_t k = 0; k < records.size(); ++k) e[k] = records[k].elevation;
        return e;
    }
};

struct HorizonOptions {
    double azimuth_step = deg2rad(0.25);
    double max_range = 30000.0;
    CurvatureModel curvature;
};

/// Horizon of a single azimuth by ray marching: running maximum of the
/// sample elevation angles.
inline HorizonRecord horizon_along(const DemGrid& grid, const Vec3& cam, double azimuth, double max_range,
                                   const CurvatureModel& curvature) {
    const double dx = std::sin(azimuth), dy = std::cos(azimuth);
    const auto plan = detail::plan_march(grid, cam.x(), cam.y(), dx, dy, max_range);
    HorizonRecord best;
    best.elevation = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < plan.count; ++i) {
        const double d = plan.at(i);
        const double x = cam.x() + d * dx, y = cam.y() + d * dy;
        const double z = sample_elevation(grid, x, y);
        const double a = std::atan2(z - cam.z() - curvature.drop(d), d);
        if (a > best.elevation) {
            best.elevation = a;
            best.range = d;
            best.point = Vec3(x, y, z);
        }
    }
    if (plan.count == 0) {
        best.elevation = -kPi / 2 + 1e-9;
        best.range = 0.0;
        best.point = Vec3(cam.x(), cam.y(), sample_elevation(grid, cam.x(), cam.y()));
    }
    return best;
}

inline SyntheticPanorama render_horizon_panorama(const DemGrid& grid, const Vec3& cam, const HorizonOptions& opt = {}) {
    const int n = azimuth_count(opt.azimuth_step);
    if (!(opt.max_range > 0)) fail("InvalidRange", "max_range must be > 0");
    const auto placed = place_camera(grid, cam);
    SyntheticPanorama pano;
    pano.azimuth_step = kTwoPi / n;
    pano.camera = placed.position;
    pano.camera_raised = placed.raised;
    pano.records.resize(static_cast<std::size_t>(n));
    parallel_for(0, static_cast<std::size_t>(n), [&](std::size_t k) {
        pano.records[k] = horizon_along(grid, pano.camera, pano.azimuth(k), opt.max_range, opt.curvature);
    });
    return pano;
}

inline std::string panorama_to_csv(const SyntheticPanorama& p) {
    std::ostringstream out;
    out << std::setprecision(12) << "azimuth_deg,elev_deg,range_m,x,y,z\n";
    for (std::size_t k = 0; k < p.records.size(); ++k) {
        const auto& r = p.records[k];
        out << rad2deg(p.azimuth(k)) << ',' << rad2deg(r.elevation) << ',' << r.range << ',' << r.point.x() << ','
            << r.point.y() << ',' << r.point.z() << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Perspective rendering and XYZ backprojection

enum class Shading { hypsometric, slope };

inline Shading shading_from_string(const std::string& s) {
    if (s == "hypsometric") return Shading::hypsometric;
    if (s == "slope") return Shading::slope;
    fail("InvalidShading", "unknown shading '" + s + "'");
}

/// Per-pixel world coordinates aligned with an oriented image; NaN = sky.
struct XyzBands {
    Raster<double> x, y, z;

    XyzBands() = default;
    XyzBands(int w, int h)
        : x(w, h, std::numeric_limits<double>::quiet_NaN()),
          y(w, h, std::numeric_limits<double>::quiet_NaN()),
          z(w, h, std::numeric_limits<double>::quiet_NaN()) {}

    bool valid(int u, int v) const { return !std::isnan(x.at(u, v)); }
    Vec3 point(int u, int v) const { return {x.at(u, v), y.at(u, v), z.at(u, v)}; }
};

struct RenderOptions {
    double max_range = 30000.0;
    Shading shading = Shading::slope;
    CurvatureModel curvature;
};

constexpr float kSkyValue = 1.0f;

/// Cosmetic shade in [0.05, 0.8]; sky renders at 1.0.
class Shader {
public:
    Shader(const DemGrid& g, Shading mode) : g_(g), mode_(mode) {
        lo_ = std::numeric_limits<double>::infinity();
        hi_ = -lo_;
        for (double e : g.elevations)
            if (!g.is_nodata(e)) lo_ = std::min(lo_, e), hi_ = std::max(hi_, e);
    }

    float operator()(double x, double y, double z, double distance) const {
        double v;
        if (mode_ == Shading::hypsometric) {
            v = hi_ > lo_ ? 0.15 + 0.55 * (z - lo_) / (hi_ - lo_) : 0.4;
        } else {
            const double h = g_.cell_size;
            auto zs = [&](double xx, double yy) {
                xx = std::clamp(xx, g_.origin_easting, g_.max_x());
                yy = std::clamp(yy, g_.origin_northing, g_.max_y());
                return sample_elevation(g_, xx, yy);
            };
            const double gx = (zs(x + h, y) - zs(x - h, y)) / (2 * h);
            const double gy = (zs(x, y + h) - zs(x, y - h)) / (2 * h);
            const Vec3 n = Vec3(-gx, -gy, 1.0).normalized();
            // sun from the north-west, 45 degrees up
            const Vec3 sun = Vec3(-0.5, 0.5, std::sqrt(0.5));
            v = 0.1 + 0.6 * std::max(0.0, n.dot(sun));
        }
        const double haze = 1.0 - std::exp(-distance / 20000.0);
        return static_cast<float>(std::clamp(v * (1 - haze) + 0.8 * haze, 0.05, 0.8));
    }

private:
    const DemGrid& g_;
    Shading mode_;
    double lo_, hi_;
};

/// First intersection of a world ray with the terrain, or nullopt for sky.
/// Marching uses the same ground-distance rule as the horizon renderer and
/// the bracketed crossing is refined by bisection.
inline std::optional<Vec3> intersect_terrain(const DemGrid& grid, const Vec3& origin, const Vec3& dir, double max_range,
                                             const CurvatureModel& curvature, double z_max) {
    const double hn = std::hypot(dir.x(), dir.y());
    auto effective = [&](double x, double y, double s) { return sample_elevation(grid, x, y) - curvature.drop(s); };
    if (hn < 1e-12) {
        if (dir.z() >= 0) return std::nullopt;
        return Vec3(origin.x(), origin.y(), sample_elevation(grid, origin.x(), origin.y()));
    }
    const double ux = dir.x() / hn, uy = dir.y() / hn, uz = dir.z() / hn;
    const auto plan = detail::plan_march(grid, origin.x(), origin.y(), ux, uy, max_range);
    double prev = 0.0;
    for (int i = 0; i < plan.count; ++i) {
        const double s = plan.at(i);
        const double rz = origin.z() + s * uz;
        if (uz >= 0 && rz > z_max) return std::nullopt;
        const double x = origin.x() + s * ux, y = origin.y() + s * uy;
        if (rz <= effective(x, y, s)) {
            double lo = prev, hi = s;
            for (int it = 0; it < 60 && hi - lo > 1e-7; ++it) {
                const double mid = 0.5 * (lo + hi);
                const double mz = origin.z() + mid * uz;
                if (mz <= effective(origin.x() + mid * ux, origin.y() + mid * uy, mid))
                    hi = mid;
                else
                    lo = mid;
            }
            return Vec3(origin.x() + hi * ux, origin.y() + hi * uy, origin.z() + hi * uz);
        }
        prev = s;
    }
    return std::nullopt;
}

struct RenderResult {
    Image image;
    XyzBands xyz;
    CameraPose pose;  // after the clearance rule
    bool camera_raised = false;
};

namespace detail {

inline RenderResult render_impl(const DemGrid& grid, const CameraPose& pose_in, const RenderOptions& opt, bool shade) {
    validate(pose_in.intrinsics);
    const auto placed = place_camera(grid, pose_in.t);
    RenderResult out;
    out.pose = pose_in;
    out.pose.t = placed.position;
    out.camera_raised = placed.raised;
    const int w = pose_in.intrinsics.width, h = pose_in.intrinsics.height;
    out.xyz = XyzBands(w, h);
    if (shade) out.image = Image(w, h, kSkyValue);
    const double z_max = max_elevation(grid);
    const Shader shader(grid, opt.shading);
    const Mat3 Rt = rotation_from_angles(out.pose.r).transpose();
    const auto& k = out.pose.intrinsics;
    parallel_for(0, static_cast<std::size_t>(h), [&](std::size_t row) {
        const int v = static_cast<int>(row);
        for (int u = 0; u < w; ++u) {
            const Vec3 dir = (Rt * Vec3((u - k.ppu) / k.focal_px, (v - k.ppv) / k.focal_px, 1.0)).normalized();
            const auto hit = intersect_terrain(grid, out.pose.t, dir, opt.max_range, opt.curvature, z_max);
            if (!hit) continue;
            out.xyz.x.at(u, v) = hit->x();
            out.xyz.y.at(u, v) = hit->y();
            out.xyz.z.at(u, v) = hit->z();
            if (shade) {
                const double dist = std::hypot(hit->x() - out.pose.t.x(), hit->y() - out.pose.t.y());
                out.image.at(u, v) = shader(hit->x(), hit->y(), sample_elevation(grid, hit->x(), hit->y()), dist);
            }
        }
    });
    return out;
}

}  // namespace detail

/// Perspective render of the DEM with per-pixel XYZ.
inline RenderResult render_view(const DemGrid& grid, const CameraPose& pose, const RenderOptions& opt = {}) {
    return detail::render_impl(grid, pose, opt, true);
}

/// XYZ bands of an oriented image without shading; sky pixels are NaN.
inline XyzBands backproject_xyz(const CameraPose& pose, const DemGrid& grid, const RenderOptions& opt = {}) {
    return detail::render_impl(grid, pose, opt, false).xyz;
}

/// Per column, the topmost image row whose ray hits terrain (the first
/// ground row below the sky), found by bisection over rows. -1 marks
/// columns that are all sky; 0 means the skyline is at or above the frame.
inline std::vector<int> render_skyline(const DemGrid& grid, const CameraPose& pose_in, const RenderOptions& opt = {}) {
    validate(pose_in.intrinsics);
    CameraPose pose = pose_in;
    pose.t = place_camera(grid, pose_in.t).position;
    const int w = pose.intrinsics.width, h = pose.intrinsics.height;
    const double z_max = max_elevation(grid);
    std::vector<int> rows(static_cast<std::size_t>(w), -1);
    parallel_for(0, static_cast<std::size_t>(w), [&](std::size_t col) {
        auto hits = [&](int v) {
            return intersect_terrain(grid, pose.t, pixel_ray(pose, static_cast<double>(col), v), opt.max_range,
                                     opt.curvature, z_max)
                .has_value();
        };
        if (!hits(h - 1)) return;
        int lo = -1, hi = h - 1;  // lo: sky (or above frame), hi: ground
        while (hi - lo > 1) {
            const int mid = (lo + hi) / 2;
            if (hits(mid))
                hi = mid;
            else
                lo = mid;
        }
        rows[col] = hi;
    });
    return rows;
}

/// Cylindrical 360-degree strip used for appearance-based orientation.
/// Column c looks at azimuth c * angular_step (clockwise from north); row r
/// looks at elevation elev_max - r * angular_step.
struct StripGeometry {
    double angular_step = deg2rad(0.25);
    double elev_min = deg2rad(-15.0);
    double elev_max = deg2rad(25.0);

    int columns() const { return azimuth_count(angular_step); }
    int rows() const { return static_cast<int>(std::floor((elev_max - elev_min) / angular_step + 1e-9)) + 1; }
    double elevation(int row) const { return elev_max - row * angular_step; }
};

/// Each strip column is produced with one ray march: a pixel at elevation e
/// takes the shade of the nearest sample whose elevation angle reaches e.
inline Image render_panorama_strip(const DemGrid& grid, const Vec3& cam, const StripGeometry& geo,
                                   const RenderOptions& opt = {}) {
    const int ncol = geo.columns(), nrow = geo.rows();
    if (nrow < 2 || !(geo.elev_max > geo.elev_min)) fail("InvalidStrip", "strip needs elev_max > elev_min");
    const Vec3 c = place_camera(grid, cam).position;
    Image img(ncol, nrow, kSkyValue);
    const Shader shader(grid, opt.shading);
    parallel_for(0, static_cast<std::size_t>(ncol), [&](std::size_t col) {
        const double az = static_cast<double>(col) * (kTwoPi / ncol);
        const double dx = std::sin(az), dy = std::cos(az);
        const auto plan = detail::plan_march(grid, c.x(), c.y(), dx, dy, opt.max_range);
        int next_row = nrow - 1;  // lowest row not yet covered
        for (int i = 0; i < plan.count && next_row >= 0; ++i) {
            const double d = plan.at(i);
            const double x = c.x() + d * dx, y = c.y() + d * dy;
            const double z = sample_elevation(grid, x, y);
            const double a = std::atan2(z - c.z() - opt.curvature.drop(d), d);
            if (a < geo.elevation(next_row)) continue;
            const float s = shader(x, y, z, d);
            while (next_row >= 0 && geo.elevation(next_row) <= a) img.at(static_cast<int>(col), next_row--) = s;
        }
    });
    return img;
}

}  // namespace terrapose
