#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "terrapose/camera.hpp"
#include "terrapose/error.hpp"
#include "terrapose/parallel.hpp"

namespace terrapose {

struct Landmark {
    Vec3 world = Vec3::Zero();
    std::vector<double> descriptor;
};

struct QueryKeypoint {
    Vec2 pixel = Vec2::Zero();
    std::vector<double> descriptor;
};

enum class GateStatus { accepted, rejected_ellipse, rejected_threshold, rejected_mutual };

inline const char* to_string(GateStatus s) {
    switch (s) {
        case GateStatus::accepted: return "accepted";
        case GateStatus::rejected_ellipse: return "rejected-ellipse";
        case GateStatus::rejected_threshold: return "rejected-threshold";
        case GateStatus::rejected_mutual: return "rejected-mutual";
    }
    return "?";
}

struct Correspondence2D3D {
    Vec2 pixel = Vec2::Zero();
    Vec3 world = Vec3::Zero();
    double descriptor_distance = 0.0;
    GateStatus status = GateStatus::accepted;
    int landmark = -1;
    int query = -1;
};

inline double descriptor_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail("DescriptorMismatch", "descriptor lengths differ");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Pose refinement on reprojection error

namespace detail {

inline double reprojection_ssr(const CameraPose& pose, const std::vector<Correspondence2D3D>& m) {
    double s = 0;
    for (const auto& c : m) s += (project_point(pose, c.world) - c.pixel).squaredNorm();
    return s;
}

}  // namespace detail

struct RefineResult {
    CameraPose pose;
    double ssr = 0.0;
    bool ok = false;
};

/// Levenberg-Marquardt on the summed squared reprojection error over the
/// 6-dof state. Covariance = s^2 (J^T J)^-1 with s^2 = SSR / (2n - 6).
inline RefineResult refine_pose(const CameraPose& init, const std::vector<Correspondence2D3D>& m, int iterations = 50) {
    RefineResult out;
    out.pose = init;
    try {
        out.ssr = detail::reprojection_ssr(init, m);
    } catch (const Error&) {
        return out;
    }
    double lambda = 1e-3;
    for (int it = 0; it < iterations; ++it) {
        Mat6 A = Mat6::Zero();
        Vec6 g = Vec6::Zero();
        for (const auto& c : m) {
            const Jacobian26 J = projection_jacobian(out.pose, c.world);
            const Vec2 r = project_point(out.pose, c.world) - c.pixel;
            A += J.transpose() * J;
            g += J.transpose() * r;
        }
        bool improved = false;
        for (int tries = 0; tries < 10 && !improved; ++tries) {
            Mat6 Ad = A;
            Ad.diagonal() += lambda * A.diagonal().cwiseMax(1e-12);
            const Vec6 dx = Ad.ldlt().solve(-g);
            if (!dx.allFinite()) break;
            CameraPose trial = out.pose;
            trial.set_state(out.pose.state() + dx);
            double ssr;
            try {
                ssr = detail::reprojection_ssr(trial, m);
            } catch (const Error&) {
                lambda *= 10;
                continue;
            }
            if (ssr < out.ssr) {
                const double gain = out.ssr - ssr;
                out.pose = trial;
                out.ssr = ssr;
                lambda = std::max(lambda / 10, 1e-12);
                improved = true;
                if (gain <= 1e-14 * (1 + ssr) || dx.norm() < 1e-12) it = iterations;
            } else {
                lambda *= 10;
            }
        }
        if (!improved) break;
    }
    Mat6 A = Mat6::Zero();
    for (const auto& c : m) {
        const Jacobian26 J = projection_jacobian(out.pose, c.world);
        A += J.transpose() * J;
    }
    const int dof = 2 * static_cast<int>(m.size()) - 6;
    const double s2 = dof > 0 ? out.ssr / dof : 1.0;
    const Mat6 cov = A.inverse() * s2;
    if (cov.allFinite()) out.pose.covariance = 0.5 * (cov + cov.transpose());
    out.ok = true;
    return out;
}

// ---------------------------------------------------------------------------
// RANSAC initial pose

struct RansacParams {
    int iterations = 500;
    double inlier_tol_px = 3.0;
    std::uint64_t seed = 1;
};

struct RansacResult {
    CameraPose pose;
    std::vector<int> inliers;
};

namespace detail {

/// Normalized DLT for a 3x4 projection from >= 6 correspondences.
inline bool dlt_projection(const std::vector<Vec2>& x, const std::vector<Vec3>& X, Eigen::Matrix<double, 3, 4>& P) {
    const int n = static_cast<int>(x.size());
    Vec2 cx = Vec2::Zero();
    Vec3 cX = Vec3::Zero();
    for (int i = 0; i < n; ++i) {
        cx += x[i];
        cX += X[i];
    }
    cx /= n;
    cX /= n;
    double sx = 0, sX = 0;
    for (int i = 0; i < n; ++i) {
        sx += (x[i] - cx).norm();
        sX += (X[i] - cX).norm();
    }
    sx = sx > 0 ? std::sqrt(2.0) * n / sx : 1.0;
    sX = sX > 0 ? std::sqrt(3.0) * n / sX : 1.0;
    Eigen::MatrixXd A(2 * n, 12);
    for (int i = 0; i < n; ++i) {
        const Vec2 u = (x[i] - cx) * sx;
        Eigen::Vector4d W;
        W << (X[i] - cX) * sX, 1.0;
        A.row(2 * i) << W.transpose(), Eigen::RowVector4d::Zero(), -u.x() * W.transpose();
        A.row(2 * i + 1) << Eigen::RowVector4d::Zero(), W.transpose(), -u.y() * W.transpose();
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (!(sv(0) > 0) || sv(10) < 1e-12 * sv(0)) return false;  // rank-deficient sample
    Eigen::VectorXd p = svd.matrixV().col(11);
    Eigen::Matrix<double, 3, 4> Pn;
    Pn << p.segment<4>(0).transpose(), p.segment<4>(4).transpose(), p.segment<4>(8).transpose();
    Eigen::Matrix3d T = Eigen::Matrix3d::Identity();
    T(0, 0) = T(1, 1) = sx;
    T(0, 2) = -sx * cx.x();
    T(1, 2) = -sx * cx.y();
    Eigen::Matrix4d U = Eigen::Matrix4d::Identity();
    U.topLeftCorner<3, 3>() *= sX;
    U.topRightCorner<3, 1>() = -sX * cX;
    P = T.inverse() * Pn * U;
    return P.allFinite();
}

/// Pose from a projection matrix given known intrinsics.
inline bool pose_from_projection(const Eigen::Matrix<double, 3, 4>& P, const CameraIntrinsics& k, CameraPose& pose) {
    Mat3 K;
    K << k.focal_px, 0, k.ppu, 0, k.focal_px, k.ppv, 0, 0, 1;
    Eigen::Matrix<double, 3, 4> M = K.inverse() * P;
    if (M.leftCols<3>().determinant() < 0) M = -M;
    Eigen::JacobiSVD<Mat3> svd(M.leftCols<3>(), Eigen::ComputeFullU | Eigen::ComputeFullV);
    const double scale = svd.singularValues().mean();
    if (!(scale > 0)) return false;
    const Mat3 R = svd.matrixU() * svd.matrixV().transpose();
    const Vec3 tc = M.col(3) / scale;
    pose.intrinsics = k;
    pose.r = angles_from_rotation(R);
    pose.t = -R.transpose() * tc;
    pose.covariance = Mat6::Zero();
    return pose.t.allFinite();
}

inline bool coplanar(const std::vector<Vec3>& X, double rel = 1e-6) {
    Vec3 c = Vec3::Zero();
    for (const auto& p : X) c += p;
    c /= static_cast<double>(X.size());
    Mat3 C = Mat3::Zero();
    for (const auto& p : X) C += (p - c) * (p - c).transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> es(C);
    const auto ev = es.eigenvalues();
    return !(ev(2) > 0) || std::sqrt(std::max(ev(0), 0.0) / ev(2)) < rel;
}

inline std::vector<int> inlier_set(const CameraPose& pose, const std::vector<Correspondence2D3D>& pool, double tol) {
    std::vector<int> in;
    for (int i = 0; i < static_cast<int>(pool.size()); ++i) {
        const Vec3 pc = camera_point(pose, pool[i].world);
        if (!(pc.z() > kDefaultDepthEpsilon)) continue;
        if ((project_point(pose, pool[i].world) - pool[i].pixel).norm() < tol) in.push_back(i);
    }
    return in;
}

}  // namespace detail

/// RANSAC over minimal samples of 6 with a DLT model, Gauss-Newton refinement
/// on the consensus set. Samples are drawn sequentially from the seed before
/// the (parallel) evaluation, so the result does not depend on thread count.
inline RansacResult initial_pose_ransac(const std::vector<Correspondence2D3D>& pool, const CameraIntrinsics& k,
                                        const RansacParams& p = {}) {
    constexpr int kMinimal = 6;
    validate(k);
    if (static_cast<int>(pool.size()) < kMinimal)
        fail("TooFewCorrespondences", std::to_string(pool.size()) + " candidates, need 6");
    if (p.iterations < 1 || !(p.inlier_tol_px > 0)) fail("InvalidParameter", "ransac iterations/tolerance");
    std::vector<Vec3> all;
    for (const auto& c : pool) all.push_back(c.world);
    if (detail::coplanar(all)) fail("DegenerateCoplanar", "world points are coplanar");

    std::mt19937_64 rng(p.seed);
    const int n = static_cast<int>(pool.size());
    std::vector<std::array<int, kMinimal>> samples(static_cast<std::size_t>(p.iterations));
    for (auto& s : samples) {
        // partial Fisher-Yates on a fresh index list
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx[i] = i;
        for (int j = 0; j < kMinimal; ++j) {
            std::uniform_int_distribution<int> u(j, n - 1);
            std::swap(idx[j], idx[u(rng)]);
            s[j] = idx[j];
        }
    }
    std::vector<int> counts(samples.size(), -1);
    std::vector<CameraPose> models(samples.size());
    parallel_for(0, samples.size(), [&](std::size_t h) {
        std::vector<Vec2> x;
        std::vector<Vec3> X;
        std::vector<Correspondence2D3D> sample;
        for (int i : samples[h]) {
            x.push_back(pool[i].pixel);
            X.push_back(pool[i].world);
            sample.push_back(pool[i]);
        }
        if (detail::coplanar(X, 1e-4)) return;
        Eigen::Matrix<double, 3, 4> P;
        if (!detail::dlt_projection(x, X, P)) return;
        CameraPose pose;
        if (!detail::pose_from_projection(P, k, pose)) return;
        // the unconstrained DLT is noise-sensitive; polish with K fixed
        if (const auto r = refine_pose(pose, sample); r.ok) pose = r.pose;
        models[h] = pose;
        counts[h] = static_cast<int>(detail::inlier_set(pose, pool, p.inlier_tol_px).size());
    });
    std::size_t best = 0;
    for (std::size_t h = 1; h < samples.size(); ++h)
        if (counts[h] > counts[best]) best = h;
    if (counts[best] < kMinimal) fail("NoConsensus", "best consensus " + std::to_string(std::max(counts[best], 0)));

    RansacResult out;
    out.pose = models[best];
    out.inliers = detail::inlier_set(out.pose, pool, p.inlier_tol_px);
    for (int round = 0; round < 3; ++round) {
        std::vector<Correspondence2D3D> sub;
        for (int i : out.inliers) sub.push_back(pool[i]);
        const auto ref = refine_pose(out.pose, sub);
        if (!ref.ok) break;
        out.pose = ref.pose;
        const auto next = detail::inlier_set(out.pose, pool, p.inlier_tol_px);
        if (next == out.inliers) break;
        if (static_cast<int>(next.size()) < kMinimal) break;
        out.inliers = next;
    }
    if (static_cast<int>(out.inliers.size()) < kMinimal) fail("NoConsensus", "consensus lost during refinement");
    return out;
}

// ---------------------------------------------------------------------------
// Gated matching

struct GateParams {
    double pixel_sigma = 1.0;
    double confidence = 0.95;
    double threshold = std::numeric_limits<double>::infinity();  // descriptor distance
};

struct GateResult {
    std::vector<Correspondence2D3D> records;   // one per visible landmark with any candidate
    std::vector<Correspondence2D3D> accepted;  // landmark order
    std::vector<double> ellipse_areas;         // per visible landmark
    int visible = 0;
};

/// Landmarks in front of the camera get a confidence ellipse; each picks the
/// nearest-descriptor query keypoint inside its gate; pairs above the
/// threshold or not mutually nearest (among landmarks gating that keypoint)
/// are rejected. Ties go to the lower index.
inline GateResult gated_match(const CameraPose& pose, const std::vector<Landmark>& landmarks,
                              const std::vector<QueryKeypoint>& queries, const GateParams& p = {}) {
    const int nl = static_cast<int>(landmarks.size()), nq = static_cast<int>(queries.size());
    std::vector<char> vis(static_cast<std::size_t>(nl), 0);
    std::vector<ConfidenceEllipse> ell(static_cast<std::size_t>(nl));
    std::vector<Mat2> inv(static_cast<std::size_t>(nl));
    parallel_for(0, static_cast<std::size_t>(nl), [&](std::size_t l) {
        if (!(camera_point(pose, landmarks[l].world).z() > kDefaultDepthEpsilon)) return;
        ell[l] = propagate_pose_covariance(pose, landmarks[l].world, p.pixel_sigma, p.confidence);
        inv[l] = ell[l].covariance.inverse();
        vis[l] = inv[l].allFinite();
    });
    GateResult out;
    for (int l = 0; l < nl; ++l)
        if (vis[l]) {
            ++out.visible;
            out.ellipse_areas.push_back(ell[l].area());
        }
    if (out.visible == 0) fail("NoVisibleLandmarks", "no landmark projects in front of the camera");

    // gate[l * nq + q]: query q inside landmark l's ellipse; dist likewise
    std::vector<char> gate(static_cast<std::size_t>(nl) * nq, 0);
    std::vector<double> dist(static_cast<std::size_t>(nl) * nq, 0.0);
    parallel_for(0, static_cast<std::size_t>(nl), [&](std::size_t l) {
        if (!vis[l]) return;
        for (int q = 0; q < nq; ++q) {
            const Vec2 d = queries[q].pixel - ell[l].center;
            const std::size_t i = l * nq + q;
            gate[i] = d.dot(inv[l] * d) <= ell[l].gate;
            if (gate[i]) dist[i] = descriptor_distance(landmarks[l].descriptor, queries[q].descriptor);
        }
    });
    std::vector<int> best_landmark(static_cast<std::size_t>(nq), -1);
    for (int q = 0; q < nq; ++q)
        for (int l = 0; l < nl; ++l) {
            const std::size_t i = static_cast<std::size_t>(l) * nq + q;
            if (gate[i] && (best_landmark[q] < 0 || dist[i] < dist[static_cast<std::size_t>(best_landmark[q]) * nq + q]))
                best_landmark[q] = l;
        }
    for (int l = 0; l < nl; ++l) {
        if (!vis[l]) continue;
        int bq = -1;
        for (int q = 0; q < nq; ++q) {
            const std::size_t i = static_cast<std::size_t>(l) * nq + q;
            if (gate[i] && (bq < 0 || dist[i] < dist[static_cast<std::size_t>(l) * nq + bq])) bq = q;
        }
        Correspondence2D3D c;
        c.landmark = l;
        c.world = landmarks[l].world;
        if (bq < 0) {
            c.status = GateStatus::rejected_ellipse;
            out.records.push_back(c);
            continue;
        }
        c.query = bq;
        c.pixel = queries[bq].pixel;
        c.descriptor_distance = dist[static_cast<std::size_t>(l) * nq + bq];
        if (c.descriptor_distance > p.threshold)
            c.status = GateStatus::rejected_threshold;
        else if (best_landmark[bq] != l)
            c.status = GateStatus::rejected_mutual;
        else
            c.status = GateStatus::accepted;
        out.records.push_back(c);
        if (c.status == GateStatus::accepted) out.accepted.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Iterated EKF

/// Batch IEKF measurement update with R = sigma^2 I. The state is
/// relinearized `inner` times around the current iterate; the covariance uses
/// the Joseph form at the final linearization.
inline CameraPose iekf_update(const CameraPose& prior, const std::vector<Correspondence2D3D>& matches,
                              double pixel_sigma, int inner = 3) {
    validate(prior);
    if (matches.empty()) fail("NoMatches", "iekf_update needs at least one match");
    if (!(pixel_sigma > 0) || inner < 1) fail("InvalidParameter", "pixel sigma must be > 0, inner >= 1");
    const int m = 2 * static_cast<int>(matches.size());
    const Mat6& P0 = prior.covariance;
    const Vec6 x0 = prior.state();
    const double r2 = pixel_sigma * pixel_sigma;
    Eigen::VectorXd z(m);
    for (int i = 0; i < static_cast<int>(matches.size()); ++i) z.segment<2>(2 * i) = matches[i].pixel;

    CameraPose cur = prior;
    Eigen::MatrixXd H(m, 6), K(6, m);
    auto linearize = [&](const CameraPose& at, Eigen::VectorXd& h) {
        h.resize(m);
        for (int i = 0; i < static_cast<int>(matches.size()); ++i) {
            h.segment<2>(2 * i) = project_point(at, matches[i].world);
            H.middleRows<2>(2 * i) = projection_jacobian(at, matches[i].world);
        }
        Eigen::MatrixXd S = H * P0 * H.transpose();
        S.diagonal().array() += r2;
        Eigen::LLT<Eigen::MatrixXd> llt(S);
        if (llt.info() != Eigen::Success) fail("SingularInnovation", "innovation covariance not positive definite");
        K = llt.solve(H * P0).transpose();  // P0 H^T S^-1 (S and P0 symmetric)
        if (!K.allFinite()) fail("SingularInnovation", "non-finite gain");
    };
    Eigen::VectorXd h;
    for (int it = 0; it < inner; ++it) {
        linearize(cur, h);
        const Vec6 dx0 = state_difference(x0, cur.state());
        const Vec6 x = x0 + K * (z - h - H * dx0);
        cur.set_state(x);
    }
    linearize(cur, h);
    const Mat6 IKH = Mat6::Identity() - K * H;
    Mat6 P = IKH * P0 * IKH.transpose() + r2 * K * K.transpose();
    cur.covariance = 0.5 * (P + P.transpose());
    return cur;
}

// ---------------------------------------------------------------------------
// PEP-ALP loop

struct PepAlpSchedule {
    int max_iterations = 10;
    double confidence = 0.95;
    double threshold_initial = -1.0;  // < 0: 0.8 x descriptor-space diameter
    double threshold_fraction = 0.8;
    double decay = 0.8;
    double pixel_sigma = 1.0;
    double tolerance_m = 0.01;
    double tolerance_rad = 1e-6;
    int inner_iterations = 3;
    int min_matches = 6;
    double max_rms_sigma = 3.0;  // final RMS reprojection residual bound, in pixel sigmas
    double residual_confidence = 0.999;  // post-update consistency gate on each match

    void validate() const {
        if (max_iterations < 1) fail("InvalidSchedule", "max_iterations must be >= 1");
        if (!(decay > 0 && decay < 1)) fail("InvalidSchedule", "decay must be in (0,1)");
        if (!(pixel_sigma > 0)) fail("InvalidSchedule", "pixel sigma must be > 0");
        if (!(confidence > 0 && confidence < 1)) fail("InvalidSchedule", "confidence must be in (0,1)");
        if (inner_iterations < 1 || min_matches < 1) fail("InvalidSchedule", "inner iterations / min matches");
    }
};

struct PepAlpIteration {
    int iteration = 0;
    double threshold = 0.0;
    int visible = 0;
    int accepted = 0;
    int residual_rejected = 0;
    double mean_ellipse_area = 0.0;
    double covariance_trace = 0.0;
    double state_change_m = 0.0;
    double state_change_rad = 0.0;
    Vec6 state = Vec6::Zero();
};

struct PepAlpResult {
    CameraPose pose;
    bool diverged = false;
    std::string diverged_reason;
    std::vector<PepAlpIteration> iterations;
    std::vector<Correspondence2D3D> matches;  // final accepted set
};

inline double descriptor_diameter(const std::vector<Landmark>& l, const std::vector<QueryKeypoint>& q) {
    double d = 0;
    for (const auto& a : l)
        for (const auto& b : q) d = std::max(d, descriptor_distance(a.descriptor, b.descriptor));
    return d;
}

/// IEKF update followed by a consistency check: while the worst posterior
/// residual falls outside the chi-square gate, drop that match and redo the
/// update from the same prior.
inline std::pair<CameraPose, std::vector<Correspondence2D3D>> consistent_update(
    const CameraPose& prior, std::vector<Correspondence2D3D> matches, const PepAlpSchedule& s) {
    const double gate = chi_square_2dof(s.residual_confidence);
    while (true) {
        CameraPose post = iekf_update(prior, matches, s.pixel_sigma, s.inner_iterations);
        int worst = -1;
        double worst_m2 = gate;
        for (int i = 0; i < static_cast<int>(matches.size()); ++i) {
            const Vec3 pc = camera_point(post, matches[i].world);
            const double m2 = pc.z() > kDefaultDepthEpsilon
                                  ? (project_point(post, matches[i].world) - matches[i].pixel).squaredNorm() /
                                        (s.pixel_sigma * s.pixel_sigma)
                                  : std::numeric_limits<double>::infinity();
            if (m2 > worst_m2) {
                worst_m2 = m2;
                worst = i;
            }
        }
        if (worst < 0 || matches.size() <= 1) return {post, matches};
        matches.erase(matches.begin() + worst);
    }
}

inline PepAlpResult pep_alp(const CameraPose& prior, const std::vector<Landmark>& landmarks,
                            const std::vector<QueryKeypoint>& queries, const PepAlpSchedule& s = {}) {
    s.validate();
    validate(prior);
    PepAlpResult out;
    out.pose = prior;
    const double thr0 =
        s.threshold_initial >= 0 ? s.threshold_initial : s.threshold_fraction * descriptor_diameter(landmarks, queries);
    CameraPose cur = prior;
    std::vector<std::pair<int, int>> prev_set;
    bool any = false;
    double thr = thr0;
    for (int k = 0; k < s.max_iterations; ++k, thr *= s.decay) {
        GateParams gp{s.pixel_sigma, s.confidence, thr};
        const auto g = gated_match(cur, landmarks, queries, gp);
        PepAlpIteration d;
        d.iteration = k;
        d.threshold = thr;
        d.visible = g.visible;
        d.accepted = static_cast<int>(g.accepted.size());
        for (double a : g.ellipse_areas) d.mean_ellipse_area += a;
        d.mean_ellipse_area /= std::max<std::size_t>(g.ellipse_areas.size(), 1);
        if (g.accepted.empty()) {
            d.covariance_trace = cur.covariance.trace();
            d.state = cur.state();
            out.iterations.push_back(d);
            continue;
        }
        any = true;
        CameraPose next;
        std::vector<Correspondence2D3D> kept;
        try {
            std::tie(next, kept) = consistent_update(cur, g.accepted, s);
        } catch (const Error& e) {
            if (e.code() != "BehindCamera") throw;
            out.iterations.push_back(d);
            out.pose = prior;
            out.diverged = true;
            out.diverged_reason = "estimate moved behind matched landmarks";
            return out;
        }
        d.residual_rejected = static_cast<int>(g.accepted.size() - kept.size());
        const Vec6 dx = state_difference(next.state(), cur.state());
        d.state_change_m = dx.head<3>().norm();
        d.state_change_rad = dx.tail<3>().norm();
        d.covariance_trace = next.covariance.trace();
        d.state = next.state();
        out.iterations.push_back(d);
        cur = next;
        out.matches = kept;
        std::vector<std::pair<int, int>> set;
        for (const auto& c : kept) set.emplace_back(c.landmark, c.query);
        const bool converged = d.state_change_m < s.tolerance_m && d.state_change_rad < s.tolerance_rad;
        if (converged || set == prev_set) break;
        prev_set = std::move(set);
    }
    if (!any) {
        out.diverged = true;
        out.diverged_reason = "no iteration accepted a match";
        out.pose = prior;
        return out;
    }
    out.pose = cur;
    if (static_cast<int>(out.matches.size()) < s.min_matches) {
        out.diverged = true;
        out.diverged_reason = "final accepted set smaller than " + std::to_string(s.min_matches);
    } else {
        double ssr = 0;
        for (const auto& c : out.matches) ssr += (project_point(cur, c.world) - c.pixel).squaredNorm();
        const double rms = std::sqrt(ssr / (2.0 * out.matches.size()));
        if (rms > s.max_rms_sigma * s.pixel_sigma) {
            out.diverged = true;
            out.diverged_reason = "final RMS residual " + std::to_string(rms) + " px";
        }
    }
    return out;
}

inline std::string diagnostics_jsonl(const PepAlpResult& r) {
    std::string out;
    for (const auto& d : r.iterations) {
        nlohmann::json j{{"iteration", d.iteration},
                         {"threshold", d.threshold},
                         {"visible", d.visible},
                         {"accepted", d.accepted},
                         {"residual_rejected", d.residual_rejected},
                         {"mean_ellipse_area_px2", d.mean_ellipse_area},
                         {"covariance_trace", d.covariance_trace},
                         {"state_change_m", d.state_change_m},
                         {"state_change_deg", rad2deg(d.state_change_rad)},
                         {"x", d.state(0)},
                         {"y", d.state(1)},
                         {"z", d.state(2)},
                         {"heading_deg", rad2deg(d.state(3))},
                         {"tilt_deg", rad2deg(d.state(4))},
                         {"roll_deg", rad2deg(d.state(5))}};
        out += j.dump() + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV I/O: landmarks `x,y,z,d0..dN`, query keypoints `u,v,d0..dN`

namespace detail {

inline std::vector<std::vector<double>> read_numeric_csv(std::istream& in, const std::string& name,
                                                         const std::vector<std::string>& lead, int& ndesc) {
    std::string line;
    if (!std::getline(in, line)) fail("MissingHeaderKey", name + ": empty file");
    std::vector<std::string> head;
    {
        std::stringstream ss(line);
        std::string t;
        while (std::getline(ss, t, ',')) {
            while (!t.empty() && std::isspace(static_cast<unsigned char>(t.back()))) t.pop_back();
            head.push_back(t);
        }
    }
    if (head.size() < lead.size() || !std::equal(lead.begin(), lead.end(), head.begin()))
        fail("MissingHeaderKey", name + ": header must start with " + lead.front());
    ndesc = static_cast<int>(head.size() - lead.size());
    for (int i = 0; i < ndesc; ++i)
        if (head[lead.size() + i] != "d" + std::to_string(i)) fail("MissingHeaderKey", name + ": expected d" + std::to_string(i));
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::vector<double> r;
        std::stringstream ss(line);
        std::string t;
        while (std::getline(ss, t, ',')) {
            try {
                std::size_t pos = 0;
                r.push_back(std::stod(t, &pos));
                while (pos < t.size() && std::isspace(static_cast<unsigned char>(t[pos]))) ++pos;
                if (pos != t.size()) throw std::invalid_argument(t);
            } catch (...) {
                fail("UnparsableNumber", name + ": '" + t + "'");
            }
        }
        if (r.size() != head.size()) fail("NonRectangularBody", name + ": wrong field count");
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_descriptor_header(std::ostream& out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out << ",d" << i;
    out << '\n';
}

}  // namespace detail

inline std::vector<Landmark> landmarks_from_csv(std::istream& in, const std::string& name = "landmarks") {
    int nd = 0;
    std::vector<Landmark> out;
    for (const auto& r : detail::read_numeric_csv(in, name, {"x", "y", "z"}, nd))
        out.push_back({Vec3(r[0], r[1], r[2]), std::vector<double>(r.begin() + 3, r.end())});
    return out;
}

inline std::vector<QueryKeypoint> keypoints_from_csv(std::istream& in, const std::string& name = "keypoints") {
    int nd = 0;
    std::vector<QueryKeypoint> out;
    for (const auto& r : detail::read_numeric_csv(in, name, {"u", "v"}, nd))
        out.push_back({Vec2(r[0], r[1]), std::vector<double>(r.begin() + 2, r.end())});
    return out;
}

inline std::string landmarks_to_csv(const std::vector<Landmark>& l) {
    std::ostringstream out;
    out.precision(17);
    out << "x,y,z";
    detail::write_descriptor_header(out, l.empty() ? 0 : l.front().descriptor.size());
    for (const auto& p : l) {
        out << p.world.x() << ',' << p.world.y() << ',' << p.world.z();
        for (double d : p.descriptor) out << ',' << d;
        out << '\n';
    }
    return out.str();
}

inline std::string keypoints_to_csv(const std::vector<QueryKeypoint>& q) {
    std::ostringstream out;
    out.precision(17);
    out << "u,v";
    detail::write_descriptor_header(out, q.empty() ? 0 : q.front().descriptor.size());
    for (const auto& p : q) {
        out << p.pixel.x() << ',' << p.pixel.y();
        for (double d : p.descriptor) out << ',' << d;
        out << '\n';
    }
    return out.str();
}

}  // namespace terrapose
