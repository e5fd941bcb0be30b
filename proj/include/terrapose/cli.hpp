#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "terrapose/camera.hpp"
#include "terrapose/error.hpp"
#include "terrapose/features.hpp"
#include "terrapose/geofuse.hpp"
#include "terrapose/orient.hpp"
#include "terrapose/panorama.hpp"
#include "terrapose/parallel.hpp"
#include "terrapose/pepalp.hpp"
#include "terrapose/raster.hpp"
#include "terrapose/terrain.hpp"
#include "terrapose/topdown.hpp"

namespace terrapose::cli {

namespace detail {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

/// Files produced by a subcommand. Nothing touches the disk until commit(),
/// which writes each file to a temporary sibling and renames it into place.
class OutputSet {
public:
    void add(const std::string& path, std::string bytes) {
        if (path.empty()) return;
        for (auto& f : files_)
            if (f.first == path) fail("DuplicateOutput", path + " requested twice");
        files_.emplace_back(path, std::move(bytes));
    }

    void commit() {
        std::vector<std::string> temps;
        auto cleanup = [&] {
            for (const auto& t : temps) std::remove(t.c_str());
        };
        for (const auto& [path, bytes] : files_) {
            const std::string tmp = path + ".tmp." + std::to_string(::getpid());
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) {
                cleanup();
                fail("IoError", "cannot write " + path);
            }
            temps.push_back(tmp);
            out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            out.close();
            if (!out) {
                cleanup();
                fail("IoError", "short write on " + path);
            }
        }
        for (std::size_t i = 0; i < files_.size(); ++i)
            if (std::rename(temps[i].c_str(), files_[i].first.c_str()) != 0) {
                cleanup();
                fail("IoError", "cannot rename into " + files_[i].first);
            }
    }

    const std::vector<std::pair<std::string, std::string>>& files() const { return files_; }

private:
    std::vector<std::pair<std::string, std::string>> files_;
};

struct Context {
    OutputSet outputs;
    int verbosity = 0;
    std::ostream* log = &std::cerr;

    void info(const std::string& msg) const {
        if (verbosity > 0) *log << msg << '\n';
    }
};

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + path);
    return in;
}

inline nlohmann::json read_json(const std::string& path) {
    auto in = open_input(path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail("UnparsableNumber", path + ": " + e.what());
    }
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
    CameraIntrinsics k;
    try {
        k.focal_px = j.at("focal_px").get<double>();
        k.width = j.at("width").get<int>();
        k.height = j.at("height").get<int>();
        k.ppu = j.value("ppu", k.width / 2.0);
        k.ppv = j.value("ppv", k.height / 2.0);
    } catch (const nlohmann::json::exception& e) {
        fail("InvalidPose", std::string("camera JSON: ") + e.what());
    }
    validate(k);
    return k;
}

/// Float32 raster whose sidecar may carry a north-up geo-transform
/// (origin_easting = west edge, origin_northing = north edge, cell_size).
inline RoadRaster read_road_raster(const std::string& path) {
    const std::string sidecar = path + ".json";
    RoadRaster r;
    r.distance = read_float32(path, sidecar);
    const auto meta = read_json(sidecar);
    r.origin_easting = meta.value("origin_easting", 0.0);
    r.origin_northing = meta.value("origin_northing", 0.0);
    r.cell_size = meta.value("cell_size", 1.0);
    if (!(r.cell_size > 0)) fail("InvalidParameter", sidecar + ": cell_size must be > 0");
    return r;
}

inline Raster<float> read_score_raster(const std::string& path) {
    const auto ext = std::filesystem::path(path).extension().string();
    if (ext == ".f32" || ext == ".bin") return read_float32(path, path + ".json");
    return read_pnm(path);
}

inline std::vector<Vec2> positions_from_csv(const std::string& path) {
    auto in = open_input(path);
    int nd = 0;
    std::vector<Vec2> out;
    for (const auto& r : terrapose::detail::read_numeric_csv(in, path, {"easting", "northing"}, nd))
        out.emplace_back(r[0], r[1]);
    return out;
}

/// Correspondence CSV `u,v,x,y,z` with optional trailing descriptor columns.
inline std::vector<Correspondence2D3D> correspondences_from_csv(const std::string& path) {
    auto in = open_input(path);
    int nd = 0;
    std::vector<Correspondence2D3D> out;
    for (const auto& r : terrapose::detail::read_numeric_csv(in, path, {"u", "v", "x", "y", "z"}, nd)) {
        Correspondence2D3D c;
        c.pixel = Vec2(r[0], r[1]);
        c.world = Vec3(r[2], r[3], r[4]);
        c.landmark = c.query = static_cast<int>(out.size());
        out.push_back(c);
    }
    return out;
}

inline std::vector<FusionView> views_from_json(const std::string& path) {
    const auto j = read_json(path);
    const auto& arr = j.is_object() && j.contains("views") ? j.at("views") : j;
    if (!arr.is_array()) fail("MissingHeaderKey", path + ": expected an array of views");
    const auto base = std::filesystem::path(path).parent_path();
    std::vector<FusionView> out;
    try {
        for (const auto& v : arr) {
            FusionView f;
            f.id = v.at("id").get<int>();
            const std::string type = v.value("type", "panoramic");
            if (type == "panoramic") {
                PanoramicView p;
                p.position = Vec2(v.at("x").get<double>(), v.at("y").get<double>());
                p.camera_height = v.value("camera_height", p.camera_height);
                p.heading0 = deg2rad(v.value("heading0_deg", 0.0));
                p.width = v.at("width").get<int>();
                p.height = v.at("height").get<int>();
                if (v.contains("max_range")) p.max_range = v.at("max_range").get<double>();
                f.geometry = p;
            } else if (type == "ortho") {
                GeoTransform g;
                g.e0 = v.at("e0").get<double>();
                g.a = v.at("a").get<double>();
                g.b = v.at("b").get<double>();
                g.n0 = v.at("n0").get<double>();
                g.c = v.at("c").get<double>();
                g.d = v.at("d").get<double>();
                g.width = v.at("width").get<int>();
                g.height = v.at("height").get<int>();
                f.geometry = g;
            } else {
                fail("InvalidView", path + ": unknown view type '" + type + "'");
            }
            if (v.contains("scores")) {
                std::filesystem::path sp = v.at("scores").get<std::string>();
                if (sp.is_relative()) sp = base / sp;
                f.scores = read_score_raster(sp.string());
            }
            out.push_back(std::move(f));
        }
    } catch (const nlohmann::json::exception& e) {
        fail("MissingHeaderKey", path + ": " + e.what());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Option helpers: every numeric flag documents its unit and valid range.

struct Bound {
    double lo = -kInf;
    double hi = kInf;
    bool open_lo = false;
    bool open_hi = false;

    std::string text() const {
        auto num = [](double v) {
            if (std::isinf(v)) return std::string(v < 0 ? "-inf" : "inf");
            std::ostringstream s;
            s << v;
            return s.str();
        };
        return std::string(open_lo || std::isinf(lo) ? "(" : "[") + num(lo) + ", " + num(hi) +
               (open_hi || std::isinf(hi) ? ")" : "]");
    }
    bool contains(double v) const {
        if (std::isnan(v)) return false;
        if (open_lo ? !(v > lo) : !(v >= lo)) return false;
        if (open_hi ? !(v < hi) : !(v <= hi)) return false;
        return true;
    }
};

inline Bound any() { return {}; }
inline Bound positive() { return {0, kInf, true, false}; }
inline Bound non_negative() { return {0, kInf}; }
inline Bound closed(double lo, double hi) { return {lo, hi}; }
inline Bound open(double lo, double hi) { return {lo, hi, true, true}; }

inline CLI::Validator in_bound(const Bound& b, bool nan_ok) {
    return CLI::Validator(
        [b, nan_ok](std::string& s) -> std::string {
            double v = 0;
            try {
                std::size_t pos = 0;
                v = std::stod(s, &pos);
                if (pos != s.size()) return "'" + s + "' is not a number";
            } catch (...) {
                return "'" + s + "' is not a number";
            }
            if (nan_ok && std::isnan(v)) return {};
            return b.contains(v) ? std::string{} : s + " outside " + b.text();
        },
        "");
}

template <typename T>
CLI::Option* number(CLI::App* app, const std::string& flags, T& v, const std::string& what, const std::string& unit,
                    const Bound& b) {
    const bool nan_ok = std::is_floating_point_v<T> && std::isnan(static_cast<double>(v));
    std::string range = b.text();
    if (nan_ok) range += " or nan (auto)";
    return app->add_option(flags, v, what + " [unit: " + unit + "; range: " + range + "]")
        ->capture_default_str()
        ->check(in_bound(b, nan_ok));
}

inline CLI::Option* path_in(CLI::App* app, const std::string& flags, std::string& v, const std::string& what,
                            bool required = true) {
    auto* o = app->add_option(flags, v,
                              what + " [unit: path; range: readable file" + (required ? "" : "; default: none") + "]");
    if (required) o->required();
    return o;
}

inline CLI::Option* path_out(CLI::App* app, const std::string& flags, std::string& v, const std::string& what,
                             bool required = true) {
    auto* o = app->add_option(flags, v,
                              what + " [unit: path; range: writable file" + (required ? "" : "; default: none") + "]");
    if (required) o->required();
    return o;
}

inline CLI::Option* choice(CLI::App* app, const std::string& flags, std::string& v, const std::string& what,
                           const std::vector<std::string>& allowed) {
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : "|") + a;
    return app->add_option(flags, v, what + " [unit: name; range: " + list + "]")
        ->capture_default_str()
        ->check(CLI::IsMember(allowed));
}

inline void add_seed(CLI::App* app, std::uint64_t& seed) {
    app->add_option("--seed", seed, "Random seed [unit: integer; range: [0, 2^64)]")->capture_default_str();
}

struct CurvatureFlags {
    bool enabled = false;
    double refraction = 0.13;

    void add(CLI::App* app) {
        app->add_flag("--curvature", enabled, "Apply earth curvature with refraction [unit: switch; range: on|off]")
            ->capture_default_str();
        number(app, "--refraction", refraction, "Refraction coefficient used with --curvature", "ratio",
               closed(0, 1));
    }
    CurvatureModel model() const { return {enabled, refraction}; }
};

using Action = std::function<void(Context&)>;

// ---------------------------------------------------------------------------
// Subcommands

inline Action setup_gen_dem(CLI::App* app) {
    struct O {
        std::string kind = "gaussian_hill", output;
        double amp = 500, sigma = 800, slope = 0.5, base = 0, ridge_az = 0, cx = kNaN, cy = kNaN;
        double cell = 25, x0 = 0, y0 = 0;
        int size = 512, hills = 24, ridges = 3;
        std::uint64_t seed = 1;
    };
    auto o = std::make_shared<O>();
    choice(app, "--kind", o->kind, "Terrain generator", {"flat", "cone", "ridge", "gaussian_hill", "hill_mixture"});
    number(app, "--amp", o->amp, "Peak height above base (cone, ridge, gaussian_hill)", "m", positive());
    number(app, "--sigma", o->sigma, "Gaussian width (ridge, gaussian_hill)", "m", positive());
    number(app, "--slope", o->slope, "Cone flank slope", "m/m", positive());
    number(app, "--base", o->base, "Base elevation added to shapes", "m", any());
    number(app, "--ridge-azimuth", o->ridge_az, "Ridge axis, clockwise from north", "deg", any());
    number(app, "--center-x", o->cx, "Shape center easting; nan = grid center", "m", any());
    number(app, "--center-y", o->cy, "Shape center northing; nan = grid center", "m", any());
    number(app, "--size", o->size, "Nodes per side", "count", closed(2, 20000));
    number(app, "--cell", o->cell, "Node spacing", "m", positive());
    number(app, "--origin-x", o->x0, "Lower-left easting", "m", any());
    number(app, "--origin-y", o->y0, "Lower-left northing", "m", any());
    number(app, "--hills", o->hills, "Gaussian hills (hill_mixture)", "count", closed(0, 10000));
    number(app, "--ridges", o->ridges, "Ridges (hill_mixture)", "count", closed(0, 10000));
    add_seed(app, o->seed);
    path_out(app, "-o,--output", o->output, "ESRI ASCII grid to write");
    return [o](Context& ctx) {
        GridSpec spec{o->x0, o->y0, o->cell, o->size, o->size};
        DemGrid g;
        if (o->kind == "hill_mixture") {
            HillMixtureParams mp;
            mp.hills = o->hills;
            mp.ridges = o->ridges;
            g = synth_hill_mixture(spec, o->seed, mp);
        } else {
            ShapeParams p;
            p.base = o->base;
            p.amplitude = o->amp;
            p.sigma = o->sigma;
            p.slope = o->slope;
            p.ridge_azimuth = deg2rad(o->ridge_az);
            p.center_x = o->cx;
            p.center_y = o->cy;
            g = synth_terrain(terrain_kind_from_string(o->kind), p, spec);
        }
        ctx.info("gen-dem: " + std::to_string(g.n_cols) + "x" + std::to_string(g.n_rows) + " " + o->kind);
        ctx.outputs.add(o->output, format_ascii_grid(g));
    };
}

inline Action setup_render_pano(CLI::App* app) {
    struct O {
        std::string dem, output, equirect, strip, shading = "slope";
        double x = kNaN, y = kNaN, z = kNaN, step = 0.25, max_range = 30000, elev_min = -15, elev_max = 25;
        int equirect_height = 720;
        CurvatureFlags curv;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--dem", o->dem, "DEM (ESRI ASCII grid)");
    number(app, "--x", o->x, "Camera easting", "m", any())->required();
    number(app, "--y", o->y, "Camera northing", "m", any())->required();
    number(app, "--z", o->z, "Camera elevation; nan or at/below ground = ground + 1.6 m", "m", any());
    number(app, "--step", o->step, "Azimuth step of the horizon profile and strip; must divide 360", "deg",
           {0, 360, true, false});
    number(app, "--max-range", o->max_range, "Ray-march range", "m", positive());
    o->curv.add(app);
    path_out(app, "-o,--output", o->output, "Horizon CSV azimuth_deg,elev_deg,range_m,x,y,z");
    path_out(app, "--equirect", o->equirect, "Optional full-sphere equirectangular PGM (width = 2 x height)", false);
    number(app, "--equirect-height", o->equirect_height, "Rows of the equirectangular panorama", "px",
           closed(2, 20000));
    path_out(app, "--strip", o->strip, "Optional cylindrical strip PGM at --step", false);
    number(app, "--elev-min", o->elev_min, "Strip bottom elevation", "deg", closed(-90, 90));
    number(app, "--elev-max", o->elev_max, "Strip top elevation", "deg", closed(-90, 90));
    choice(app, "--shading", o->shading, "Terrain shading for PGM outputs", {"slope", "hypsometric"});
    return [o](Context& ctx) {
        const DemGrid g = load_ascii_grid(o->dem);
        const Vec3 cam(o->x, o->y, o->z);
        HorizonOptions ho;
        ho.azimuth_step = deg2rad(o->step);
        ho.max_range = o->max_range;
        ho.curvature = o->curv.model();
        const auto pano = render_horizon_panorama(g, cam, ho);
        if (pano.camera_raised) ctx.info("render-pano: camera raised to " + std::to_string(pano.camera.z()) + " m");
        ctx.outputs.add(o->output, panorama_to_csv(pano));
        RenderOptions ro;
        ro.max_range = o->max_range;
        ro.curvature = o->curv.model();
        ro.shading = shading_from_string(o->shading);
        if (!o->equirect.empty()) {
            const double s = kPi / o->equirect_height;
            const StripGeometry geo{s, -kPi / 2 + s / 2, kPi / 2 - s / 2};
            ctx.outputs.add(o->equirect, encode_pgm16(render_panorama_strip(g, cam, geo, ro)));
        }
        if (!o->strip.empty()) {
            const StripGeometry geo{deg2rad(o->step), deg2rad(o->elev_min), deg2rad(o->elev_max)};
            ctx.outputs.add(o->strip, encode_pgm16(render_panorama_strip(g, cam, geo, ro)));
        }
    };
}

inline Action setup_render_view(CLI::App* app) {
    struct O {
        std::string dem, pose, output, xyz, pose_out, shading = "slope";
        double max_range = 30000;
        float nodata = -9999.0f;
        CurvatureFlags curv;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--dem", o->dem, "DEM (ESRI ASCII grid)");
    path_in(app, "--pose", o->pose, "Camera pose JSON");
    path_out(app, "-o,--output", o->output, "Rendered 16-bit PGM");
    path_out(app, "--xyz", o->xyz,
             "Optional prefix for XYZ bands: <prefix>.x.f32, .y.f32, .z.f32 and sidecar <prefix>.json", false);
    path_out(app, "--pose-out", o->pose_out, "Optional pose JSON after the ground-clearance rule", false);
    number(app, "--nodata", o->nodata, "Nodata value for XYZ bands (sky)", "m", any());
    number(app, "--max-range", o->max_range, "Ray range", "m", positive());
    choice(app, "--shading", o->shading, "Terrain shading", {"slope", "hypsometric"});
    o->curv.add(app);
    return [o](Context& ctx) {
        const DemGrid g = load_ascii_grid(o->dem);
        const CameraPose pose = pose_from_json(read_json(o->pose));
        RenderOptions ro;
        ro.max_range = o->max_range;
        ro.shading = shading_from_string(o->shading);
        ro.curvature = o->curv.model();
        const auto r = render_view(g, pose, ro);
        if (r.camera_raised) ctx.info("render-view: camera raised to " + std::to_string(r.pose.t.z()) + " m");
        ctx.outputs.add(o->output, encode_pgm16(r.image));
        if (!o->xyz.empty()) {
            auto side = float32_sidecar(r.image.width, r.image.height, o->nodata);
            const auto name = std::filesystem::path(o->xyz).filename().string();
            side["bands"] = {{"x", name + ".x.f32"}, {"y", name + ".y.f32"}, {"z", name + ".z.f32"}};
            ctx.outputs.add(o->xyz + ".x.f32", encode_float32(r.xyz.x, o->nodata));
            ctx.outputs.add(o->xyz + ".y.f32", encode_float32(r.xyz.y, o->nodata));
            ctx.outputs.add(o->xyz + ".z.f32", encode_float32(r.xyz.z, o->nodata));
            ctx.outputs.add(o->xyz + ".json", dump(side));
        }
        if (!o->pose_out.empty()) ctx.outputs.add(o->pose_out, dump(pose_to_json(r.pose)));
    };
}

struct SkylineFlags {
    SkylineParams p;

    void add(CLI::App* app) {
        number(app, "--gradient-threshold", p.gradient_threshold, "Minimum sky-to-ground intensity step",
               "intensity", {0, 1, true, false});
        number(app, "--smoothing-radius", p.smoothing_radius, "Horizontal box half-width", "px", closed(0, 1000));
    }
};

inline Action setup_skyline(CLI::App* app) {
    struct O {
        std::string image, output;
        SkylineFlags sky;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--image", o->image, "Query image (PGM/PPM)");
    path_out(app, "-o,--output", o->output, "Query skyline CSV col,row,valid");
    o->sky.add(app);
    return [o](Context& ctx) {
        const auto q = extract_image_skyline(read_pnm(o->image), o->sky.p);
        ctx.info("skyline: " + std::to_string(q.valid_count()) + "/" + std::to_string(q.width()) + " valid columns");
        ctx.outputs.add(o->output, query_skyline_to_csv(q));
    };
}

inline Action setup_orient_dtw(CLI::App* app) {
    struct O {
        std::string dem, pose, image, skyline, output, reference_out;
        double step = 0.25, max_range = 30000, offset_search = 5, offset_step = 0.5, max_gap = 3;
        DtwParams dtw;
        SkylineFlags sky;
        CurvatureFlags curv;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--dem", o->dem, "DEM (ESRI ASCII grid)");
    path_in(app, "--pose", o->pose, "Prior pose JSON (position and intrinsics are used)");
    auto* img = path_in(app, "--image", o->image, "Query image; mutually exclusive with --skyline", false);
    auto* sky = path_in(app, "--skyline", o->skyline, "Precomputed query skyline CSV col,row,valid", false);
    img->excludes(sky);
    path_out(app, "-o,--output", o->output, "Orientation JSON");
    path_out(app, "--reference-out", o->reference_out, "Optional reference skyline CSV azimuth_deg,elev_deg", false);
    number(app, "--step", o->step, "Reference azimuth step; must divide 360", "deg", {0, 360, true, false});
    number(app, "--max-range", o->max_range, "Horizon ray-march range", "m", positive());
    number(app, "--max-gap", o->max_gap, "Longest interpolated run of invalid query samples", "steps",
           non_negative());
    number(app, "--lambda", o->dtw.lambda, "Weight of the slope term in the DTW cost", "1", non_negative());
    number(app, "--min-valid", o->dtw.min_valid, "Minimum valid query samples", "count", closed(2, 1e9));
    number(app, "--refine-iterations", o->dtw.refine_iterations, "Attitude refinement iterations (0 = linear fit)",
           "count", closed(0, 1000));
    number(app, "--offset-search", o->offset_search, "Half-range of trial vertical offsets", "deg", closed(0, 45));
    number(app, "--offset-step", o->offset_step, "Trial vertical offset spacing (0 disables)", "deg", closed(0, 45));
    o->sky.add(app);
    o->curv.add(app);
    return [o](Context& ctx) {
        if (o->image.empty() == o->skyline.empty())
            fail("MissingArgument", "exactly one of --image or --skyline is required");
        const DemGrid g = load_ascii_grid(o->dem);
        const CameraPose pose = pose_from_json(read_json(o->pose));
        QuerySkyline qs;
        if (!o->image.empty()) {
            qs = extract_image_skyline(read_pnm(o->image), o->sky.p);
        } else {
            auto in = open_input(o->skyline);
            qs = query_skyline_from_csv(in, o->skyline);
        }
        HorizonOptions ho;
        ho.azimuth_step = deg2rad(o->step);
        ho.max_range = o->max_range;
        ho.curvature = o->curv.model();
        const auto pano = render_horizon_panorama(g, pose.t, ho);
        const auto ref = reference_from_panorama(pano);
        const auto q = query_angles(qs, pose.intrinsics, ho.azimuth_step, o->max_gap);
        DtwParams p = o->dtw;
        p.offset_search = deg2rad(o->offset_search);
        p.offset_search_step = deg2rad(o->offset_step);
        const auto r = orient_skyline(q, ref, p);
        ctx.info("orient-dtw: heading " + std::to_string(rad2deg(r.angles.heading)) + " deg, cost " +
                 std::to_string(r.dtw_cost));
        ctx.outputs.add(o->output, dump(orientation_to_json(r)));
        if (!o->reference_out.empty()) ctx.outputs.add(o->reference_out, reference_skyline_to_csv(ref));
    };
}

inline Action setup_orient_hog(CLI::App* app) {
    struct O {
        std::string dem, pose, image, output, shading = "slope";
        double step = 0.25, elev_min = -15, elev_max = 25, max_range = 30000;
        std::vector<int> scales{16, 32, 64};
        double prefilter = 1.5;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--dem", o->dem, "DEM (ESRI ASCII grid)");
    path_in(app, "--pose", o->pose, "Prior pose JSON (position and intrinsics are used)");
    path_in(app, "--image", o->image, "Query image (PGM/PPM), assumed level");
    path_out(app, "-o,--output", o->output, "Orientation JSON");
    number(app, "--step", o->step, "Strip angular step; must divide 360", "deg", {0, 360, true, false});
    number(app, "--elev-min", o->elev_min, "Strip bottom elevation", "deg", closed(-90, 90));
    number(app, "--elev-max", o->elev_max, "Strip top elevation", "deg", closed(-90, 90));
    number(app, "--max-range", o->max_range, "Strip ray-march range", "m", positive());
    app->add_option("--scales", o->scales,
                    "HOG patch sizes [unit: px; range: positive multiples of 16, each <= query size]")
        ->capture_default_str()
        ->delimiter(',');
    number(app, "--prefilter-sigma", o->prefilter, "Gaussian prefilter", "px", non_negative());
    choice(app, "--shading", o->shading, "Strip shading", {"slope", "hypsometric"});
    return [o](Context& ctx) {
        const DemGrid g = load_ascii_grid(o->dem);
        const CameraPose pose = pose_from_json(read_json(o->pose));
        const StripGeometry geo{deg2rad(o->step), deg2rad(o->elev_min), deg2rad(o->elev_max)};
        RenderOptions ro;
        ro.max_range = o->max_range;
        ro.shading = shading_from_string(o->shading);
        const Image strip = render_panorama_strip(g, pose.t, geo, ro);
        const auto cyl = perspective_to_cylindrical(read_pnm(o->image), pose.intrinsics, geo);
        HogOrientParams hp;
        hp.scales = o->scales;
        hp.prefilter_sigma = o->prefilter;
        const auto r = hog_orient(cyl.image, cyl.row_offset, strip, geo, hp);
        const double heading = wrap_two_pi((r.best_column + cyl.center_column) * geo.angular_step);
        ctx.info("orient-hog: heading " + std::to_string(rad2deg(heading)) + " deg");
        nlohmann::json j{{"heading_deg", rad2deg(heading)},
                         {"tilt_deg", 0.0},
                         {"roll_deg", 0.0},
                         {"dtw_cost", nullptr},
                         {"method", "hog"},
                         {"hog_score", r.best_score}};
        ctx.outputs.add(o->output, dump(j));
    };
}

inline Action setup_pose_init(CLI::App* app) {
    struct O {
        std::string corr, camera, output;
        RansacParams rp;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--correspondences", o->corr, "CSV u,v,x,y,z (extra d0.. columns ignored)");
    path_in(app, "--camera", o->camera, "JSON with focal_px, width, height, ppu, ppv (a pose JSON works)");
    path_out(app, "-o,--output", o->output, "Pose JSON with covariance and inlier count");
    number(app, "--iterations", o->rp.iterations, "RANSAC iterations", "count", closed(1, 1e7));
    number(app, "--tol", o->rp.inlier_tol_px, "Inlier reprojection tolerance", "px", positive());
    add_seed(app, o->rp.seed);
    return [o](Context& ctx) {
        const auto pool = correspondences_from_csv(o->corr);
        const auto k = intrinsics_from_json(read_json(o->camera));
        const auto r = initial_pose_ransac(pool, k, o->rp);
        ctx.info("pose-init: " + std::to_string(r.inliers.size()) + "/" + std::to_string(pool.size()) + " inliers");
        auto j = pose_to_json(r.pose);
        j["inliers"] = r.inliers.size();
        ctx.outputs.add(o->output, dump(j));
    };
}

inline Action setup_refine_pepalp(CLI::App* app) {
    struct O {
        std::string prior, landmarks, keypoints, output, diagnostics;
        PepAlpSchedule s;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--prior", o->prior, "Prior pose JSON with covariance (cov or sigma_* keys)");
    path_in(app, "--landmarks", o->landmarks, "Landmarks CSV x,y,z,d0..");
    path_in(app, "--keypoints", o->keypoints, "Query keypoints CSV u,v,d0..");
    path_out(app, "-o,--output", o->output, "Refined pose JSON");
    path_out(app, "--diagnostics", o->diagnostics, "Optional per-iteration JSON-lines log", false);
    number(app, "--max-iterations", o->s.max_iterations, "Outer iterations", "count", closed(1, 1e6));
    number(app, "--confidence", o->s.confidence, "Gating ellipse confidence", "probability", open(0, 1));
    number(app, "--threshold", o->s.threshold_initial, "Initial descriptor threshold; < 0 = fraction of diameter",
           "descriptor distance", any());
    number(app, "--threshold-fraction", o->s.threshold_fraction, "Initial threshold as a fraction of the diameter",
           "ratio", positive());
    number(app, "--decay", o->s.decay, "Threshold decay per iteration", "ratio", open(0, 1));
    number(app, "--pixel-sigma", o->s.pixel_sigma, "Keypoint noise standard deviation", "px", positive());
    number(app, "--inner-iterations", o->s.inner_iterations, "IEKF relinearizations", "count", closed(1, 1000));
    number(app, "--min-matches", o->s.min_matches, "Smallest accepted final match set", "count", closed(1, 1e6));
    number(app, "--max-rms", o->s.max_rms_sigma, "Largest final RMS residual", "pixel sigmas", positive());
    number(app, "--tolerance-m", o->s.tolerance_m, "Convergence threshold on position change", "m", non_negative());
    return [o](Context& ctx) {
        const CameraPose prior = pose_from_json(read_json(o->prior));
        auto lin = open_input(o->landmarks);
        const auto landmarks = landmarks_from_csv(lin, o->landmarks);
        auto kin = open_input(o->keypoints);
        const auto keypoints = keypoints_from_csv(kin, o->keypoints);
        const auto r = pep_alp(prior, landmarks, keypoints, o->s);
        ctx.info("refine-pepalp: " + std::to_string(r.iterations.size()) + " iterations, " +
                 std::to_string(r.matches.size()) + " matches");
        if (r.diverged) fail("Diverged", r.diverged_reason);
        auto j = pose_to_json(r.pose);
        j["matches"] = r.matches.size();
        j["iterations"] = r.iterations.size();
        ctx.outputs.add(o->output, dump(j));
        if (!o->diagnostics.empty()) ctx.outputs.add(o->diagnostics, diagnostics_jsonl(r));
    };
}

inline Action setup_warp_topdown(CLI::App* app) {
    struct O {
        std::string pano, output, float_out;
        double height = 2.5, heading0 = 0, gsd = 0.25, extent = 150, min_dep = 5;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--pano", o->pano, "Equirectangular panorama (PGM/PPM, width = 2 x height)");
    number(app, "--camera-height", o->height, "Camera height above flat ground", "m", positive());
    number(app, "--heading0", o->heading0, "Azimuth of panorama column 0, clockwise from north", "deg", any());
    number(app, "--gsd", o->gsd, "Top-down ground sample distance", "m/px", positive());
    number(app, "--extent", o->extent, "Side of the square top-down window", "m", positive());
    number(app, "--min-depression", o->min_dep, "Cells seen above this depression become nodata", "deg",
           closed(0, 90));
    path_out(app, "-o,--output", o->output, "Top-down 16-bit PGM (nodata written as 0)");
    path_out(app, "--float-out", o->float_out, "Optional float32 raster with sidecar <path>.json (nodata kept)",
             false);
    return [o](Context& ctx) {
        PanoramaImage p{read_pnm(o->pano), deg2rad(o->heading0), o->height};
        const auto td = pano_to_topdown(p, {o->gsd, o->extent, deg2rad(o->min_dep)});
        ctx.info("warp-topdown: " + std::to_string(td.raster.width) + " px square");
        ctx.outputs.add(o->output, encode_pgm16(td.raster));
        if (!o->float_out.empty()) {
            constexpr float nodata = -9999.0f;
            auto side = float32_sidecar(td.raster.width, td.raster.height, nodata);
            side["gsd"] = td.gsd;
            ctx.outputs.add(o->float_out, encode_float32(td.raster, nodata));
            ctx.outputs.add(o->float_out + ".json", dump(side));
        }
    };
}

inline Action setup_register(CLI::App* app) {
    struct O {
        std::string topdown, aerial, matches, output, crop, aligned, footprint, inliers_out;
        double td_gsd = 0.25, aerial_gsd = 0.3, ratio = 0.8;
        HomographyRansacParams hp;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--topdown", o->topdown, "Top-down raster (PGM/PPM)");
    path_in(app, "--aerial", o->aerial, "Aerial tile (PGM/PPM)");
    path_in(app, "--matches", o->matches, "Optional matches CSV uA,vA,uB,vB (top-down -> aerial); skips detection",
            false);
    number(app, "--topdown-gsd", o->td_gsd, "Top-down ground sample distance", "m/px", positive());
    number(app, "--aerial-gsd", o->aerial_gsd, "Aerial ground sample distance", "m/px", positive());
    number(app, "--ratio", o->ratio, "Nearest/second-nearest descriptor ratio", "ratio", {0, 1, true, false});
    number(app, "--iterations", o->hp.iterations, "RANSAC iterations", "count", closed(1, 1e7));
    number(app, "--tol", o->hp.inlier_tol_px, "Symmetric transfer error tolerance", "px", positive());
    add_seed(app, o->hp.seed);
    path_out(app, "-o,--output", o->output, "Homography JSON (9 row-major numbers, top-down -> aerial pixels)");
    path_out(app, "--crop", o->crop, "Optional aerial crop PGM around the footprint", false);
    path_out(app, "--aligned", o->aligned, "Optional aerial resampled onto the top-down grid (PGM)", false);
    path_out(app, "--footprint", o->footprint, "Optional footprint JSON (polygon, crop origin, coverage)", false);
    path_out(app, "--inliers-out", o->inliers_out, "Optional inlier matches CSV", false);
    return [o](Context& ctx) {
        const Image td_img = read_pnm(o->topdown);
        const Image aerial = read_pnm(o->aerial);
        std::vector<PointMatch> m;
        if (!o->matches.empty()) {
            auto in = open_input(o->matches);
            m = matches_from_csv(in);
        } else {
            const auto ka = detect_and_describe(td_img);
            const auto kb = detect_and_describe(aerial);
            if (ka.empty() || kb.empty()) fail("NoKeypoints", "no keypoints detected");
            std::vector<std::vector<double>> da, db;
            for (const auto& k : ka) da.push_back(k.descriptor);
            for (const auto& k : kb) db.push_back(k.descriptor);
            for (const auto& km : match_knn(da, db, o->ratio))
                m.push_back({Vec2(ka[km.a].x, ka[km.a].y), Vec2(kb[km.b].x, kb[km.b].y)});
            ctx.info("register: " + std::to_string(ka.size()) + "/" + std::to_string(kb.size()) + " keypoints, " +
                     std::to_string(m.size()) + " matches");
        }
        const auto h = ransac_homography(m, o->hp);
        ctx.info("register: " + std::to_string(h.inliers.size()) + " inliers");
        ctx.outputs.add(o->output, dump(homography_to_json(h.H)));
        if (!o->inliers_out.empty()) {
            std::vector<PointMatch> in;
            for (int i : h.inliers) in.push_back(m[i]);
            ctx.outputs.add(o->inliers_out, matches_to_csv(in));
        }
        if (o->crop.empty() && o->aligned.empty() && o->footprint.empty()) return;
        TopDownView tv;
        tv.raster = td_img;
        tv.gsd = o->td_gsd;
        tv.extent = td_img.width * o->td_gsd;
        const auto rc = register_crop(tv, AerialTile{aerial, o->aerial_gsd}, h.H);
        if (!o->crop.empty()) ctx.outputs.add(o->crop, encode_pgm16(rc.crop));
        if (!o->aligned.empty()) ctx.outputs.add(o->aligned, encode_pgm16(rc.aligned));
        if (!o->footprint.empty()) {
            nlohmann::json poly = nlohmann::json::array();
            for (const auto& p : rc.polygon) poly.push_back({p.x(), p.y()});
            nlohmann::json j{{"polygon", poly},
                             {"crop_x0", rc.x0},
                             {"crop_y0", rc.y0},
                             {"crop_width", rc.crop.width},
                             {"crop_height", rc.crop.height},
                             {"coverage", rc.coverage},
                             {"footprint_area_m2", rc.footprint_area_m2},
                             {"inliers", h.inliers.size()}};
            ctx.outputs.add(o->footprint, dump(j));
        }
    };
}

inline Action setup_change_score(CLI::App* app) {
    struct O {
        std::string topdown, aerial, output, scene = "rural";
        int tile = 16;
        ChangeThresholds th;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--topdown", o->topdown, "Top-down raster (PGM/PPM)");
    path_in(app, "--aerial", o->aerial, "Aligned aerial raster of the same size (PGM/PPM)");
    path_out(app, "-o,--output", o->output, "Change report JSON");
    number(app, "--tile", o->tile, "Tile side", "px", closed(2, 1e6));
    choice(app, "--scene", o->scene, "Scene class selecting the correlation floor", {"urban", "rural"});
    number(app, "--r-min-rural", o->th.r_min_rural, "Correlation floor for rural scenes", "1", closed(-1, 1));
    number(app, "--r-min-urban", o->th.r_min_urban, "Correlation floor for urban scenes", "1", closed(-1, 1));
    number(app, "--z-min", o->th.z_min, "Robust z-score floor", "MAD units", any());
    number(app, "--changed-fraction", o->th.changed_fraction, "Flagged-tile fraction for a changed verdict", "ratio",
           closed(0, 1));
    number(app, "--mad-floor", o->th.mad_floor, "Lower bound on the MAD", "1", positive());
    return [o](Context& ctx) {
        const auto r = change_zscore(read_pnm(o->topdown), read_pnm(o->aerial), o->tile,
                                     scene_class_from_string(o->scene), o->th);
        ctx.info("change-score: flagged fraction " + std::to_string(r.flagged_fraction));
        ctx.outputs.add(o->output, dump(change_report_to_json(r)));
    };
}

inline Action setup_fuse(CLI::App* app) {
    struct O {
        std::string detections, views, priors, road, output, solver = "greedy";
        double threshold = kNaN;
        UnionParams up;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--detections", o->detections, "Detections CSV view_id,umin,vmin,umax,vmax,score");
    path_in(app, "--views", o->views, "Views JSON (geometry and score raster per view)");
    path_in(app, "--priors", o->priors, "Optional priors JSON; flat priors when omitted", false);
    path_in(app, "--road", o->road, "Optional distance-to-road float32 raster with sidecar <path>.json", false);
    path_out(app, "-o,--output", o->output, "Proposals CSV easting,northing,score,selected");
    number(app, "--merge-radius", o->up.merge_radius, "Single-linkage merge distance", "m", non_negative());
    number(app, "--object-radius", o->up.object_radius, "Footprint radius of a fused object", "m", positive());
    number(app, "--threshold", o->threshold, "Detection threshold override; nan keeps the priors value",
           "probability", open(0, 1));
    choice(app, "--solver", o->solver, "Selection solver (exact limited to 20 proposals)", {"greedy", "exact"});
    return [o](Context& ctx) {
        auto din = open_input(o->detections);
        const auto dets = detections_from_csv(din);
        const auto views = views_from_json(o->views);
        FusionPriors pr = o->priors.empty() ? FusionPriors{} : priors_from_json(read_json(o->priors));
        if (!o->road.empty()) pr.road_raster = read_road_raster(o->road);
        if (!std::isnan(o->threshold)) pr.detection_threshold = o->threshold;
        const auto props = union_and_rescore(dets, views, o->up);
        const auto sel = o->solver == "exact" ? solve_exact(props, pr) : solve_greedy(props, pr);
        ctx.info("fuse: " + std::to_string(props.size()) + " proposals, " + std::to_string(sel.indices.size()) +
                 " selected, energy " + std::to_string(sel.energy));
        ctx.outputs.add(o->output, proposals_to_csv(props, sel.indices));
    };
}

inline Action setup_learn_priors(CLI::App* app) {
    struct O {
        std::string positions, road, output;
        double bin = 1, road_bin = 1;
        FusionPriors pr;
    };
    auto o = std::make_shared<O>();
    path_in(app, "--positions", o->positions, "Training object positions CSV easting,northing");
    path_in(app, "--road", o->road, "Optional distance-to-road float32 raster with sidecar <path>.json", false);
    path_out(app, "-o,--output", o->output, "Priors JSON");
    number(app, "--bin-width", o->bin, "Spacing histogram bin width", "m", positive());
    number(app, "--road-bin-width", o->road_bin, "Road-distance histogram bin width", "m", positive());
    number(app, "--w-spacing", o->pr.w_spacing, "Spacing prior weight", "1", non_negative());
    number(app, "--w-road", o->pr.w_road, "Road prior weight", "1", non_negative());
    number(app, "--threshold", o->pr.detection_threshold, "Detection threshold", "probability", open(0, 1));
    number(app, "--exclusion-radius", o->pr.exclusion_radius, "Hard exclusion distance; < 0 = sum of radii", "m",
           any());
    return [o](Context& ctx) {
        const auto pos = positions_from_csv(o->positions);
        FusionPriors pr = o->pr;
        pr.spacing = learn_spacing_histogram(pos, o->bin);
        if (!o->road.empty()) pr.road = learn_road_histogram(pos, read_road_raster(o->road), o->road_bin);
        ctx.info("learn-priors: " + std::to_string(pos.size()) + " positions, " +
                 std::to_string(pr.spacing.probs.size()) + " spacing bins");
        ctx.outputs.add(o->output, dump(priors_to_json(pr)));
    };
}

struct Subcommand {
    const char* name;
    const char* summary;
    Action (*setup)(CLI::App*);
};

inline const std::vector<Subcommand>& subcommands() {
    static const std::vector<Subcommand> table{
        {"gen-dem", "Generate a synthetic DEM", setup_gen_dem},
        {"render-pano", "Render a horizon profile and optional panoramas from a DEM", setup_render_pano},
        {"render-view", "Render a perspective view and its XYZ back-projection", setup_render_view},
        {"skyline", "Extract the skyline of a query image", setup_skyline},
        {"orient-dtw", "Estimate heading, tilt and roll by skyline DTW", setup_orient_dtw},
        {"orient-hog", "Estimate heading by HOG correlation against a rendered strip", setup_orient_hog},
        {"pose-init", "Initial pose from 2D-3D correspondences by RANSAC", setup_pose_init},
        {"refine-pepalp", "Refine a pose prior with PEP-ALP", setup_refine_pepalp},
        {"warp-topdown", "Warp an equirectangular panorama to a top-down view", setup_warp_topdown},
        {"register", "Register a top-down view to an aerial tile", setup_register},
        {"change-score", "Score tile-wise change between registered rasters", setup_change_score},
        {"fuse", "Fuse multi-view detections into geographic objects", setup_fuse},
        {"learn-priors", "Learn spacing and road priors from training positions", setup_learn_priors},
    };
    return table;
}

inline std::string one_line(std::string s) {
    for (auto& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

inline std::string parse_error_code(const CLI::ParseError& e) {
    if (dynamic_cast<const CLI::ExtrasError*>(&e)) return "UnknownFlag";
    if (dynamic_cast<const CLI::RequiredError*>(&e)) return "MissingArgument";
    if (dynamic_cast<const CLI::ExcludesError*>(&e)) return "ConflictingArguments";
    if (dynamic_cast<const CLI::ValidationError*>(&e) || dynamic_cast<const CLI::ConversionError*>(&e))
        return "InvalidParameter";
    return "InvalidArgument";
}

inline std::string usage() {
    std::ostringstream s;
    s << "usage: terrapose <subcommand> [options]\n\nsubcommands:\n";
    for (const auto& c : subcommands()) s << "  " << std::left << std::setw(15) << c.name << c.summary << '\n';
    s << "\nRun 'terrapose <subcommand> --help' for its flags.\n"
      << "Exit codes: 0 success, 2 input or validation error, 3 numerical failure.\n";
    return s.str();
}

}  // namespace detail

/// Runs one subcommand. Returns the process exit code; outputs are written
/// only when the subcommand succeeds.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace detail;
    if (argc < 2) {
        err << usage();
        err << "ERROR UnknownSubcommand: no subcommand given\n";
        return 2;
    }
    const std::string name = argv[1];
    if (name == "-h" || name == "--help" || name == "help") {
        out << usage();
        return 0;
    }
    const Subcommand* sc = nullptr;
    for (const auto& c : subcommands())
        if (name == c.name) sc = &c;
    if (!sc) {
        err << "ERROR UnknownSubcommand: '" << name << "'\n";
        return 2;
    }

    CLI::App app{std::string(sc->summary), "terrapose " + name};
    app.get_formatter()->column_width(40);
    int threads = 0;
    int verbosity = 0;
    Action action = sc->setup(&app);
    number(&app, "--threads", threads, "Worker threads; 0 = TERRAPOSE_THREADS or 1", "count", closed(0, 4096));
    app.add_flag("-v,--verbose", verbosity, "Progress messages on stderr; repeat for more [unit: count; range: >= 0]");

    try {
        app.parse(argc - 1, argv + 1);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "ERROR " << parse_error_code(e) << ": " << one_line(e.what()) << '\n';
        return 2;
    }

    set_thread_count(threads);
    Context ctx;
    ctx.verbosity = verbosity;
    ctx.log = &err;
    try {
        action(ctx);
        ctx.outputs.commit();
    } catch (const Error& e) {
        err << "ERROR " << e.code() << ": " << one_line(e.detail()) << '\n';
        return e.numerical() ? 3 : 2;
    } catch (const std::exception& e) {
        err << "ERROR InternalError: " << one_line(e.what()) << '\n';
        return 2;
    }
    return 0;
}

}  // namespace terrapose::cli
