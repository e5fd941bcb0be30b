#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "terrapose/camera.hpp"
#include "terrapose/parallel.hpp"
#include "terrapose/raster.hpp"

namespace terrapose {

constexpr double kNeutralScore = 0.5;  // log-odds zero

struct ViewDetection {
    int view = 0;
    double umin = 0, vmin = 0, umax = 0, vmax = 0;
    double score = 0.0;
};

inline void validate(const ViewDetection& d) {
    if (!(d.umax > d.umin) || !(d.vmax > d.vmin)) fail("InvalidBox", "bounding box is degenerate");
    if (!(d.score >= 0.0 && d.score <= 1.0)) fail("InvalidScore", "detection score outside [0, 1]");
}

/// Equirectangular street-level view (same pixel convention as PanoramaImage).
struct PanoramicView {
    Vec2 position = Vec2::Zero();  // easting, northing
    double camera_height = 2.5;
    double heading0 = 0.0;
    int width = 0;
    int height = 0;
    double max_range = std::numeric_limits<double>::infinity();
};

/// Orthophoto: easting = e0 + a*u + b*v, northing = n0 + c*u + d*v.
struct GeoTransform {
    double e0 = 0, a = 1, b = 0;
    double n0 = 0, c = 0, d = -1;
    int width = 0;
    int height = 0;

    Mat2 linear() const {
        Mat2 m;
        m << a, b, c, d;
        return m;
    }
};

using ViewGeometry = std::variant<PanoramicView, GeoTransform>;

struct FusionView {
    int id = 0;
    ViewGeometry geometry;
    Raster<float> scores;  // per-pixel detector score in [0, 1]
};

inline double min_depression_default() { return deg2rad(0.5); }

inline Vec2 det_to_geo(const ViewDetection& det, const PanoramicView& v, double min_depression = min_depression_default()) {
    validate(det);
    if (v.width <= 0 || v.height <= 0) fail("InvalidView", "panoramic view needs a size");
    if (!(v.camera_height > 0)) fail("NonPositiveHeight", "camera height must be > 0");
    const double uc = 0.5 * (det.umin + det.umax);
    const double az = v.heading0 + uc * kTwoPi / v.width;
    const double dep = (det.vmax + 0.5) * kPi / v.height - kPi / 2;
    if (dep <= min_depression) fail("AtOrAboveHorizon", "bounding box bottom at or above the horizon");
    const double range = v.camera_height / std::tan(dep);
    return v.position + range * Vec2(std::sin(az), std::cos(az));
}

inline Vec2 det_to_geo(const ViewDetection& det, const GeoTransform& g) {
    validate(det);
    if (std::abs(g.linear().determinant()) <= 1e-12) fail("SingularGeoTransform", "geo-transform is not invertible");
    const double u = 0.5 * (det.umin + det.umax), v = 0.5 * (det.vmin + det.vmax);
    return {g.e0 + g.a * u + g.b * v, g.n0 + g.c * u + g.d * v};
}

inline Vec2 det_to_geo(const ViewDetection& det, const ViewGeometry& g) {
    return std::visit([&](const auto& x) { return det_to_geo(det, x); }, g);
}

/// Pixel where a ground point appears, or nothing when out of frame.
inline std::optional<Vec2> geo_to_pixel(const Vec2& p, const PanoramicView& v, double min_depression = min_depression_default()) {
    const Vec2 d = p - v.position;
    const double range = d.norm();
    if (range > v.max_range) return std::nullopt;
    const double dep = std::atan2(v.camera_height, range);
    if (dep <= min_depression) return std::nullopt;
    const double u = wrap_two_pi(std::atan2(d.x(), d.y()) - v.heading0) * v.width / kTwoPi;
    const double row = (kPi / 2 + dep) * v.height / kPi - 0.5;
    if (row > v.height - 0.5) return std::nullopt;
    return Vec2(u, row);
}

inline std::optional<Vec2> geo_to_pixel(const Vec2& p, const GeoTransform& g) {
    const Vec2 px = g.linear().inverse() * (p - Vec2(g.e0, g.n0));
    if (px.x() < -0.5 || px.y() < -0.5 || px.x() > g.width - 0.5 || px.y() > g.height - 0.5) return std::nullopt;
    return px;
}

inline std::optional<Vec2> geo_to_pixel(const Vec2& p, const ViewGeometry& g) {
    return std::visit([&](const auto& x) { return geo_to_pixel(p, x); }, g);
}

// ---------------------------------------------------------------------------
// Proposal union and re-scoring

struct GeoDetection {
    Vec2 position = Vec2::Zero();
    std::vector<double> view_scores;  // NaN marks a view where the point is out of frame
    double combined = kNeutralScore;
    double radius = 1.0;
    std::vector<int> members;  // indices of the contributing detections
};

inline double logit(double p) {
    p = std::clamp(p, 1e-9, 1 - 1e-9);
    return std::log(p / (1 - p));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Score-raster lookup at the nearest pixel; panoramas wrap horizontally.
inline double lookup_score(const FusionView& v, const Vec2& px) {
    const auto& s = v.scores;
    int x = static_cast<int>(std::lround(px.x()));
    const int y = std::clamp(static_cast<int>(std::lround(px.y())), 0, s.height - 1);
    if (std::holds_alternative<PanoramicView>(v.geometry)) x = ((x % s.width) + s.width) % s.width;
    else x = std::clamp(x, 0, s.width - 1);
    return std::clamp(static_cast<double>(s.at(x, y)), 0.0, 1.0);
}

/// Mean log-odds over in-frame views, mapped back to a probability.
inline double combine_scores(const std::vector<double>& view_scores) {
    double sum = 0;
    int n = 0;
    for (double s : view_scores)
        if (!std::isnan(s)) {
            sum += logit(s);
            ++n;
        }
    return n ? sigmoid(sum / n) : kNeutralScore;
}

struct UnionParams {
    double merge_radius = 2.0;
    double object_radius = 1.0;
};

inline std::vector<GeoDetection> union_and_rescore(const std::vector<ViewDetection>& dets,
                                                   const std::vector<FusionView>& views, const UnionParams& p = {}) {
    if (dets.empty() || views.empty()) fail("EmptyInput", "need detections and views");
    auto view_index = [&](int id) {
        for (std::size_t i = 0; i < views.size(); ++i)
            if (views[i].id == id) return i;
        fail("UnknownView", "detection refers to view " + std::to_string(id) + " without geometry");
    };
    for (const auto& v : views)
        if (v.scores.empty()) fail("MissingScoreRaster", "view " + std::to_string(v.id) + " has no score raster");
    std::vector<Vec2> pts(dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) pts[i] = det_to_geo(dets[i], views[view_index(dets[i].view)].geometry);

    // single linkage via union-find
    std::vector<int> parent(dets.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j)
            if ((pts[i] - pts[j]).norm() <= p.merge_radius) {
                const int a = find(static_cast<int>(i)), b = find(static_cast<int>(j));
                if (a != b) parent[std::max(a, b)] = std::min(a, b);
            }
    std::vector<GeoDetection> out;
    std::vector<int> slot(dets.size(), -1);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const int r = find(static_cast<int>(i));
        if (slot[r] < 0) {
            slot[r] = static_cast<int>(out.size());
            out.emplace_back();
            out.back().radius = p.object_radius;
        }
        out[slot[r]].members.push_back(static_cast<int>(i));
    }
    for (auto& g : out) {
        Vec2 c = Vec2::Zero();
        for (int m : g.members) c += pts[m];
        g.position = c / static_cast<double>(g.members.size());
    }
    parallel_for(0, out.size(), [&](std::size_t k) {
        auto& g = out[k];
        g.view_scores.assign(views.size(), std::numeric_limits<double>::quiet_NaN());
        for (std::size_t v = 0; v < views.size(); ++v)
            if (const auto px = geo_to_pixel(g.position, views[v].geometry)) g.view_scores[v] = lookup_score(views[v], *px);
        g.combined = combine_scores(g.view_scores);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Priors

/// Fixed-width histogram over [0, bin_width * size); the last bin also takes
/// every larger value.
struct Histogram {
    double bin_width = 1.0;
    std::vector<double> probs;

    double prob(double d) const {
        if (probs.empty()) return 1.0;
        const auto k = static_cast<std::size_t>(std::max(0.0, std::floor(d / bin_width)));
        return probs[std::min(k, probs.size() - 1)];
    }
    /// -log of the probability relative to a flat histogram (0 when flat).
    double cost(double d) const { return probs.empty() ? 0.0 : -std::log(prob(d) * static_cast<double>(probs.size())); }
};

inline Histogram uniform_histogram(double bin_width, int bins) {
    return {bin_width, std::vector<double>(static_cast<std::size_t>(bins), 1.0 / bins)};
}

/// Laplace-smoothed (add-one) normalized histogram; bins cover [0, max value].
inline Histogram histogram_from_values(const std::vector<double>& values, double bin_width) {
    if (!(bin_width > 0)) fail("InvalidParameter", "bin width must be > 0");
    double mx = 0;
    for (double v : values) mx = std::max(mx, v);
    const auto n = static_cast<std::size_t>(std::floor(mx / bin_width)) + 1;
    Histogram h{bin_width, std::vector<double>(n, 1.0)};
    for (double v : values) h.probs[std::min(static_cast<std::size_t>(std::floor(v / bin_width)), n - 1)] += 1.0;
    const double total = std::accumulate(h.probs.begin(), h.probs.end(), 0.0);
    for (auto& p : h.probs) p /= total;
    return h;
}

inline std::vector<double> nearest_neighbor_distances(const std::vector<Vec2>& pts) {
    std::vector<double> d(pts.size(), std::numeric_limits<double>::infinity());
    // sort by easting and sweep outward, pruning by the easting gap
    std::vector<int> order(pts.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return pts[a].x() < pts[b].x(); });
    parallel_for(0, order.size(), [&](std::size_t k) {
        const Vec2& p = pts[order[k]];
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = k + 1; j < order.size() && pts[order[j]].x() - p.x() < best; ++j)
            best = std::min(best, (pts[order[j]] - p).norm());
        for (std::size_t j = k; j-- > 0 && p.x() - pts[order[j]].x() < best;) best = std::min(best, (pts[order[j]] - p).norm());
        d[order[k]] = best;
    });
    return d;
}

inline Histogram learn_spacing_histogram(const std::vector<Vec2>& positions, double bin_width = 1.0) {
    if (positions.size() < 2) fail("TooFewPositions", "need at least 2 training positions");
    return histogram_from_values(nearest_neighbor_distances(positions), bin_width);
}

/// Distance-to-road raster with a north-up geo-transform (cell centers).
struct RoadRaster {
    Raster<float> distance;
    double origin_easting = 0.0;   // west edge
    double origin_northing = 0.0;  // north edge
    double cell_size = 1.0;

    bool empty() const { return distance.empty(); }
    /// Distance at a point; `outside` is set when the point is off the raster.
    double at(const Vec2& p, bool& outside) const {
        const int x = static_cast<int>(std::floor((p.x() - origin_easting) / cell_size));
        const int y = static_cast<int>(std::floor((origin_northing - p.y()) / cell_size));
        outside = !distance.inside(x, y) || std::isnan(distance.at(x, y));
        return outside ? std::numeric_limits<double>::infinity() : static_cast<double>(distance.at(x, y));
    }
};

inline Histogram learn_road_histogram(const std::vector<Vec2>& positions, const RoadRaster& road, double bin_width = 1.0) {
    if (positions.empty()) fail("TooFewPositions", "need training positions");
    std::vector<double> d;
    for (const auto& p : positions) {
        bool outside = false;
        const double v = road.at(p, outside);
        if (!outside) d.push_back(v);
    }
    if (d.empty()) fail("ProposalOutsideRoadRaster", "no training position lies on the road raster");
    return histogram_from_values(d, bin_width);
}

struct FusionPriors {
    Histogram spacing;
    Histogram road;
    RoadRaster road_raster;
    double w_spacing = 1.0;
    double w_road = 1.0;
    double detection_threshold = 0.5;
    double exclusion_radius = -1.0;  // < 0: sum of the two proposal radii

    void validate() const {
        if (w_spacing < 0 || w_road < 0) fail("InvalidParameter", "prior weights must be >= 0");
        if (!(detection_threshold > 0 && detection_threshold < 1)) fail("InvalidParameter", "threshold in (0, 1)");
        for (const auto* h : {&spacing, &road})
            for (double p : h->probs)
                if (!(p >= 0)) fail("InvalidParameter", "histogram bins must be non-negative");
    }
};

inline nlohmann::json histogram_to_json(const Histogram& h) { return {{"bin_width", h.bin_width}, {"probs", h.probs}}; }

inline Histogram histogram_from_json(const nlohmann::json& j) {
    Histogram h;
    h.bin_width = j.at("bin_width").get<double>();
    h.probs = j.at("probs").get<std::vector<double>>();
    const double s = std::accumulate(h.probs.begin(), h.probs.end(), 0.0);
    if (!(h.bin_width > 0) || (!h.probs.empty() && !(s > 0))) fail("InvalidParameter", "bad histogram");
    for (auto& p : h.probs) p /= s;
    return h;
}

// ---------------------------------------------------------------------------
// Energy

struct EnergyTerms {
    double unary = 0.0;     // per proposal: -(logit(score) - logit(threshold))
    double road = 0.0;      // per proposal: w_road * road cost
    bool road_outside = false;
};

/// Per-proposal terms independent of the rest of the selection.
inline std::vector<EnergyTerms> proposal_terms(const std::vector<GeoDetection>& props, const FusionPriors& pr) {
    std::vector<EnergyTerms> t(props.size());
    const double shift = logit(pr.detection_threshold);
    for (std::size_t i = 0; i < props.size(); ++i) {
        t[i].unary = -(logit(props[i].combined) - shift);
        if (pr.w_road > 0 && !pr.road.probs.empty()) {
            double d = std::numeric_limits<double>::infinity();
            if (!pr.road_raster.empty()) d = pr.road_raster.at(props[i].position, t[i].road_outside);
            // off-raster proposals fall in the largest-distance bin
            t[i].road = pr.w_road * pr.road.cost(d);
        }
    }
    return t;
}

inline double exclusion(const GeoDetection& a, const GeoDetection& b, const FusionPriors& pr) {
    return pr.exclusion_radius >= 0 ? pr.exclusion_radius : a.radius + b.radius;
}

inline double fusion_energy(const std::vector<int>& selection, const std::vector<GeoDetection>& props,
                            const FusionPriors& pr, const std::vector<EnergyTerms>* terms = nullptr) {
    std::vector<EnergyTerms> local;
    if (!terms) {
        local = proposal_terms(props, pr);
        terms = &local;
    }
    double e = 0;
    for (std::size_t a = 0; a < selection.size(); ++a) {
        const int i = selection[a];
        if (i < 0 || static_cast<std::size_t>(i) >= props.size()) fail("InvalidSelection", "index out of range");
        e += (*terms)[i].unary + (*terms)[i].road;
        double nn = std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < selection.size(); ++b) {
            if (a == b) continue;
            const int j = selection[b];
            if (i == j) fail("InvalidSelection", "duplicate index");
            const double d = (props[i].position - props[j].position).norm();
            if (d < exclusion(props[i], props[j], pr)) return std::numeric_limits<double>::infinity();
            nn = std::min(nn, d);
        }
        if (std::isfinite(nn) && pr.w_spacing > 0) e += pr.w_spacing * pr.spacing.cost(nn);
    }
    return e;
}

struct Selection {
    std::vector<int> indices;  // ascending
    double energy = 0.0;
};

/// Adds the proposal with the largest energy decrease until none decreases
/// it. The unary term is shifted by logit(threshold), so a sub-threshold
/// proposal is only added when the priors pay for it.
inline Selection solve_greedy(const std::vector<GeoDetection>& props, const FusionPriors& pr) {
    pr.validate();
    const auto terms = proposal_terms(props, pr);
    const std::size_t n = props.size();
    std::vector<char> chosen(n, 0);
    std::vector<int> sel;
    std::vector<double> nn;  // nearest selected neighbour of each selected proposal
    auto sp = [&](double d) { return std::isfinite(d) && pr.w_spacing > 0 ? pr.w_spacing * pr.spacing.cost(d) : 0.0; };
    while (true) {
        int best = -1;
        double best_delta = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (chosen[j]) continue;
            double delta = terms[j].unary + terms[j].road, own = std::numeric_limits<double>::infinity();
            bool blocked = false;
            for (std::size_t a = 0; a < sel.size() && !blocked; ++a) {
                const int i = sel[a];
                const double d = (props[i].position - props[j].position).norm();
                if (d < exclusion(props[i], props[j], pr)) blocked = true;
                own = std::min(own, d);
                if (d < nn[a]) delta += sp(d) - sp(nn[a]);
            }
            if (blocked) continue;
            delta += sp(own);
            if (delta < best_delta) {
                best_delta = delta;
                best = static_cast<int>(j);
            }
        }
        if (best < 0) break;
        for (std::size_t a = 0; a < sel.size(); ++a)
            nn[a] = std::min(nn[a], (props[sel[a]].position - props[best].position).norm());
        double own = std::numeric_limits<double>::infinity();
        for (int i : sel) own = std::min(own, (props[i].position - props[best].position).norm());
        sel.push_back(best);
        nn.push_back(own);
        chosen[best] = 1;
    }
    Selection s;
    s.indices = sel;
    std::sort(s.indices.begin(), s.indices.end());
    s.energy = fusion_energy(s.indices, props, pr, &terms);
    return s;
}

/// Exhaustive minimum over all subsets; ties keep the first subset in
/// increasing bitmask order.
inline Selection solve_exact(const std::vector<GeoDetection>& props, const FusionPriors& pr) {
    pr.validate();
    if (props.size() > 20) fail("TooManyProposals", "exact solver limited to 20 proposals");
    const auto terms = proposal_terms(props, pr);
    const std::uint32_t n = static_cast<std::uint32_t>(props.size());
    Selection best;
    std::vector<int> sel;
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
        sel.clear();
        for (std::uint32_t i = 0; i < n; ++i)
            if (mask >> i & 1u) sel.push_back(static_cast<int>(i));
        const double e = fusion_energy(sel, props, pr, &terms);
        if (e < best.energy) {
            best.energy = e;
            best.indices = sel;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// I/O

inline std::vector<ViewDetection> detections_from_csv(std::istream& in) {
    std::string line;
    std::vector<ViewDetection> out;
    bool header = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!header) {
            if (line != "view_id,umin,vmin,umax,vmax,score")
                fail("MissingHeaderKey", "detections CSV header must be view_id,umin,vmin,umax,vmax,score");
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
        if (v.size() != 6) fail("NonRectangularBody", "line " + std::to_string(lineno) + ": expected 6 fields");
        ViewDetection d{static_cast<int>(v[0]), v[1], v[2], v[3], v[4], v[5]};
        validate(d);
        out.push_back(d);
    }
    if (!header) fail("MissingHeaderKey", "empty detections CSV");
    return out;
}

inline std::string detections_to_csv(const std::vector<ViewDetection>& d) {
    std::ostringstream out;
    out << std::setprecision(17) << "view_id,umin,vmin,umax,vmax,score\n";
    for (const auto& x : d)
        out << x.view << ',' << x.umin << ',' << x.vmin << ',' << x.umax << ',' << x.vmax << ',' << x.score << '\n';
    return out.str();
}

inline std::string proposals_to_csv(const std::vector<GeoDetection>& props, const std::vector<int>& selected) {
    std::vector<char> on(props.size(), 0);
    for (int i : selected) on[i] = 1;
    std::ostringstream out;
    out << std::setprecision(17) << "easting,northing,score,selected\n";
    for (std::size_t i = 0; i < props.size(); ++i)
        out << props[i].position.x() << ',' << props[i].position.y() << ',' << props[i].combined << ','
            << static_cast<int>(on[i]) << '\n';
    return out.str();
}

inline nlohmann::json priors_to_json(const FusionPriors& p) {
    return {{"spacing", histogram_to_json(p.spacing)},
            {"road", histogram_to_json(p.road)},
            {"w_spacing", p.w_spacing},
            {"w_road", p.w_road},
            {"detection_threshold", p.detection_threshold},
            {"exclusion_radius", p.exclusion_radius}};
}

inline FusionPriors priors_from_json(const nlohmann::json& j) {
    FusionPriors p;
    try {
        if (j.contains("spacing")) p.spacing = histogram_from_json(j.at("spacing"));
        if (j.contains("road")) p.road = histogram_from_json(j.at("road"));
        p.w_spacing = j.value("w_spacing", p.w_spacing);
        p.w_road = j.value("w_road", p.w_road);
        p.detection_threshold = j.value("detection_threshold", p.detection_threshold);
        p.exclusion_radius = j.value("exclusion_radius", p.exclusion_radius);
    } catch (const nlohmann::json::exception& e) {
        fail("MissingHeaderKey", std::string("priors JSON: ") + e.what());
    }
    p.validate();
    return p;
}

}  // namespace terrapose
