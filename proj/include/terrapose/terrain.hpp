#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "terrapose/error.hpp"

namespace terrapose {

/// Node-registered elevation raster in a local East-North-Up frame.
/// Row 0 is the northernmost row; node (c, r) sits at
/// (origin_easting + c * cell_size, origin_northing + (n_rows - 1 - r) * cell_size).
struct DemGrid {
    double origin_easting = 0.0;
    double origin_northing = 0.0;
    double cell_size = 1.0;
    int n_cols = 0;
    int n_rows = 0;
    std::vector<double> elevations;
    double nodata = -9999.0;

    double at(int col, int row) const { return elevations[static_cast<std::size_t>(row) * n_cols + col]; }
    double node_x(int col) const { return origin_easting + col * cell_size; }
    double node_y(int row) const { return origin_northing + (n_rows - 1 - row) * cell_size; }
    double width_m() const { return (n_cols - 1) * cell_size; }
    double height_m() const { return (n_rows - 1) * cell_size; }
    double max_x() const { return origin_easting + width_m(); }
    double max_y() const { return origin_northing + height_m(); }
    bool is_nodata(double v) const { return v == nodata; }

    bool contains(double x, double y) const {
        const double eps = 1e-9 * cell_size;
        return x >= origin_easting - eps && x <= max_x() + eps && y >= origin_northing - eps && y <= max_y() + eps;
    }
};

/// Raises InvalidGrid when the structural invariants do not hold.
inline void validate(const DemGrid& g) {
    if (!(g.cell_size > 0.0) || !std::isfinite(g.cell_size)) fail("InvalidGrid", "cell_size must be > 0");
    if (g.n_cols < 2 || g.n_rows < 2) fail("InvalidGrid", "grid needs at least 2x2 nodes");
    if (g.elevations.size() != static_cast<std::size_t>(g.n_cols) * g.n_rows)
        fail("InvalidGrid", "elevation count does not match dimensions");
    for (double v : g.elevations)
        if (!g.is_nodata(v) && !std::isfinite(v)) fail("InvalidGrid", "non-finite elevation");
}

inline double max_elevation(const DemGrid& g) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : g.elevations)
        if (!g.is_nodata(v)) m = std::max(m, v);
    return m;
}

namespace detail {

inline bool parse_double(const std::string& tok, double& out) {
    const char* b = tok.data();
    const char* e = b + tok.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e;
}

inline std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace detail

/// Parses an ESRI ASCII grid. `name` is only used in diagnostics.
inline DemGrid parse_ascii_grid(std::istream& in, const std::string& name = "<stream>") {
    std::map<std::string, double> header;
    std::string line;
    int line_no = 0;
    std::vector<std::pair<int, std::string>> body;
    const char* keys[] = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value", "xllcenter", "yllcenter"};
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string first;
        if (!(ls >> first)) continue;
        const std::string key = detail::lower(first);
        bool is_key = body.empty() && std::find(std::begin(keys), std::end(keys), key) != std::end(keys);
        if (is_key) {
            std::string val;
            double v;
            if (!(ls >> val) || !detail::parse_double(val, v))
                fail("UnparsableNumber", name + " line " + std::to_string(line_no) + ": header value for " + first);
            header[key] = v;
        } else {
            body.emplace_back(line_no, line);
        }
    }
    auto need = [&](const char* k, const char* alt = nullptr) -> double {
        if (auto it = header.find(k); it != header.end()) return it->second;
        if (alt)
            if (auto it = header.find(alt); it != header.end()) return it->second;
        fail("MissingHeaderKey", name + " line " + std::to_string(line_no) + ": missing '" + k + "'");
    };
    DemGrid g;
    const double nc = need("ncols"), nr = need("nrows");
    g.origin_easting = need("xllcorner", "xllcenter");
    g.origin_northing = need("yllcorner", "yllcenter");
    g.cell_size = need("cellsize");
    g.nodata = header.count("nodata_value") ? header["nodata_value"] : -9999.0;
    if (nc != std::floor(nc) || nr != std::floor(nr) || nc < 2 || nr < 2)
        fail("NonRectangularBody", name + ": ncols/nrows must be integers >= 2");
    if (!(g.cell_size > 0)) fail("UnparsableNumber", name + ": cellsize must be positive");
    g.n_cols = static_cast<int>(nc);
    g.n_rows = static_cast<int>(nr);
    g.elevations.reserve(static_cast<std::size_t>(g.n_cols) * g.n_rows);
    // Rows may wrap over several lines; only the total count and per-token
    // validity are enforced.
    int last_line = line_no;
    for (const auto& [no, text] : body) {
        std::istringstream ls(text);
        std::string tok;
        while (ls >> tok) {
            double v;
            if (!detail::parse_double(tok, v))
                fail("UnparsableNumber", name + " line " + std::to_string(no) + ": '" + tok + "'");
            if (g.elevations.size() == static_cast<std::size_t>(g.n_cols) * g.n_rows)
                fail("NonRectangularBody", name + " line " + std::to_string(no) + ": more values than ncols*nrows");
            g.elevations.push_back(v);
        }
        last_line = no;
    }
    if (g.elevations.size() != static_cast<std::size_t>(g.n_cols) * g.n_rows)
        fail("NonRectangularBody", name + " line " + std::to_string(last_line) + ": expected " +
                                       std::to_string(g.n_cols * g.n_rows) + " values, found " +
                                       std::to_string(g.elevations.size()));
    for (double v : g.elevations)
        if (v != g.nodata && !std::isfinite(v)) fail("UnparsableNumber", name + ": non-finite elevation");
    return g;
}

inline DemGrid load_ascii_grid(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open DEM " + path);
    return parse_ascii_grid(in, path);
}

/// Serializes with 17 significant digits so that parse(format(g)) == g exactly.
inline std::string format_ascii_grid(const DemGrid& g) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "ncols " << g.n_cols << "\n"
        << "nrows " << g.n_rows << "\n"
        << "xllcorner " << g.origin_easting << "\n"
        << "yllcorner " << g.origin_northing << "\n"
        << "cellsize " << g.cell_size << "\n"
        << "NODATA_value " << g.nodata << "\n";
    for (int r = 0; r < g.n_rows; ++r) {
        for (int c = 0; c < g.n_cols; ++c) {
            if (c) out << ' ';
            out << g.at(c, r);
        }
        out << '\n';
    }
    return out.str();
}

/// Bilinear interpolation of the four nodes enclosing (x, y).
inline double sample_elevation(const DemGrid& g, double x, double y) {
    if (!g.contains(x, y)) {
        std::ostringstream msg;
        msg << std::setprecision(12) << "(" << x << ", " << y << ") outside grid extent";
        fail("OutOfExtent", msg.str());
    }
    const double fx = std::clamp((x - g.origin_easting) / g.cell_size, 0.0, static_cast<double>(g.n_cols - 1));
    const double fs = std::clamp((y - g.origin_northing) / g.cell_size, 0.0, static_cast<double>(g.n_rows - 1));
    const int c0 = std::min(static_cast<int>(fx), g.n_cols - 2);
    const int s0 = std::min(static_cast<int>(fs), g.n_rows - 2);
    const double tx = fx - c0, ty = fs - s0;
    // s counts rows from the south edge
    const int r0 = g.n_rows - 1 - s0, r1 = r0 - 1;
    const double z00 = g.at(c0, r0), z10 = g.at(c0 + 1, r0), z01 = g.at(c0, r1), z11 = g.at(c0 + 1, r1);
    if (g.is_nodata(z00) || g.is_nodata(z10) || g.is_nodata(z01) || g.is_nodata(z11))
        fail("NodataNeighborhood", "nodata node inside bilinear stencil");
    return (1 - ty) * ((1 - tx) * z00 + tx * z10) + ty * ((1 - tx) * z01 + tx * z11);
}

struct GridSpec {
    double origin_easting = 0.0;
    double origin_northing = 0.0;
    double cell_size = 25.0;
    int n_cols = 2;
    int n_rows = 2;
};

enum class TerrainKind { flat, cone, ridge, gaussian_hill };

inline TerrainKind terrain_kind_from_string(const std::string& s) {
    if (s == "flat") return TerrainKind::flat;
    if (s == "cone") return TerrainKind::cone;
    if (s == "ridge") return TerrainKind::ridge;
    if (s == "gaussian_hill") return TerrainKind::gaussian_hill;
    fail("InvalidShapeParam", "unknown terrain kind '" + s + "'");
}

/// Closed-form surface parameters. `base` is added to every shape;
/// the center defaults to the grid center when left NaN.
struct ShapeParams {
    double base = 0.0;
    double amplitude = 0.0;
    double sigma = 0.0;          // gaussian_hill / ridge width (m)
    double slope = 0.0;          // cone, m per m
    double ridge_azimuth = 0.0;  // ridge axis direction, radians clockwise from north
    double center_x = std::numeric_limits<double>::quiet_NaN();
    double center_y = std::numeric_limits<double>::quiet_NaN();
};

inline DemGrid make_grid(const GridSpec& spec) {
    if (!(spec.cell_size > 0) || spec.n_cols < 2 || spec.n_rows < 2)
        fail("InvalidShapeParam", "grid spec needs cell_size > 0 and at least 2x2 nodes");
    DemGrid g;
    g.origin_easting = spec.origin_easting;
    g.origin_northing = spec.origin_northing;
    g.cell_size = spec.cell_size;
    g.n_cols = spec.n_cols;
    g.n_rows = spec.n_rows;
    g.elevations.assign(static_cast<std::size_t>(g.n_cols) * g.n_rows, 0.0);
    return g;
}

inline double evaluate_shape(TerrainKind kind, const ShapeParams& p, double cx, double cy, double x, double y) {
    switch (kind) {
        case TerrainKind::flat:
            return p.base;
        case TerrainKind::cone:
            return p.base + std::max(0.0, p.amplitude - p.slope * std::hypot(x - cx, y - cy));
        case TerrainKind::ridge: {
            // distance to the line through the center along (sin az, cos az)
            const double d = std::abs((x - cx) * std::cos(p.ridge_azimuth) - (y - cy) * std::sin(p.ridge_azimuth));
            return p.base + p.amplitude * std::exp(-d * d / (2 * p.sigma * p.sigma));
        }
        case TerrainKind::gaussian_hill: {
            const double dx = x - cx, dy = y - cy;
            return p.base + p.amplitude * std::exp(-(dx * dx + dy * dy) / (2 * p.sigma * p.sigma));
        }
    }
    return p.base;
}

inline DemGrid synth_terrain(TerrainKind kind, const ShapeParams& p, const GridSpec& spec) {
    if (!std::isfinite(p.base)) fail("InvalidShapeParam", "base must be finite");
    if (kind != TerrainKind::flat && !(p.amplitude > 0)) fail("InvalidShapeParam", "amplitude must be > 0");
    if ((kind == TerrainKind::gaussian_hill || kind == TerrainKind::ridge) && !(p.sigma > 0))
        fail("InvalidShapeParam", "sigma must be > 0");
    if (kind == TerrainKind::cone && !(p.slope > 0)) fail("InvalidShapeParam", "slope must be > 0");
    DemGrid g = make_grid(spec);
    const double cx = std::isnan(p.center_x) ? g.origin_easting + g.width_m() / 2 : p.center_x;
    const double cy = std::isnan(p.center_y) ? g.origin_northing + g.height_m() / 2 : p.center_y;
    for (int r = 0; r < g.n_rows; ++r)
        for (int c = 0; c < g.n_cols; ++c)
            g.elevations[static_cast<std::size_t>(r) * g.n_cols + c] =
                evaluate_shape(kind, p, cx, cy, g.node_x(c), g.node_y(r));
    return g;
}

/// Random mountain landscape: a sum of seeded gaussian hills plus a few
/// ridges, used for synthetic orientation experiments.
struct HillMixtureParams {
    int hills = 24;
    int ridges = 3;
    double min_amplitude = 150.0;
    double max_amplitude = 1200.0;
    double min_sigma = 250.0;
    double max_sigma = 1500.0;
};

inline DemGrid synth_hill_mixture(const GridSpec& spec, std::uint64_t seed, const HillMixtureParams& mp = {}) {
    if (mp.hills < 0 || mp.ridges < 0 || !(mp.min_amplitude > 0) || mp.max_amplitude < mp.min_amplitude ||
        !(mp.min_sigma > 0) || mp.max_sigma < mp.min_sigma)
        fail("InvalidShapeParam", "hill mixture parameters out of range");
    DemGrid g = make_grid(spec);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(g.origin_easting, g.max_x());
    std::uniform_real_distribution<double> uy(g.origin_northing, g.max_y());
    std::uniform_real_distribution<double> ua(mp.min_amplitude, mp.max_amplitude);
    std::uniform_real_distribution<double> us(mp.min_sigma, mp.max_sigma);
    std::uniform_real_distribution<double> uaz(0.0, M_PI);
    struct Feature {
        TerrainKind kind;
        ShapeParams p;
    };
    std::vector<Feature> features;
    for (int i = 0; i < mp.hills + mp.ridges; ++i) {
        ShapeParams p;
        p.center_x = ux(rng);
        p.center_y = uy(rng);
        p.amplitude = ua(rng);
        p.sigma = us(rng);
        p.ridge_azimuth = uaz(rng);
        features.push_back({i < mp.hills ? TerrainKind::gaussian_hill : TerrainKind::ridge, p});
    }
    for (int r = 0; r < g.n_rows; ++r)
        for (int c = 0; c < g.n_cols; ++c) {
            double z = 0.0;
            for (const auto& f : features)
                z += evaluate_shape(f.kind, f.p, f.p.center_x, f.p.center_y, g.node_x(c), g.node_y(r));
            g.elevations[static_cast<std::size_t>(r) * g.n_cols + c] = z;
        }
    return g;
}

}  // namespace terrapose
