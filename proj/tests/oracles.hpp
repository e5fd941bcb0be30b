#pragma once

// Independent reference computations used by the unit and acceptance
// suites. Nothing here calls the code path it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "terrapose/camera.hpp"

namespace oracle {

using terrapose::CameraPose;
using terrapose::Mat2;
using terrapose::Vec2;
using terrapose::Vec3;
using terrapose::Vec6;

/// Central finite-difference Jacobian of project_point over the 6-dof state.
inline terrapose::Jacobian26 numeric_jacobian(const CameraPose& pose, const Vec3& P, double step = 1e-6) {
    terrapose::Jacobian26 J;
    const Vec6 s = pose.state();
    for (int i = 0; i < 6; ++i) {
        CameraPose a = pose, b = pose;
        Vec6 sa = s, sb = s;
        sa(i) += step;
        sb(i) -= step;
        a.t = sa.head<3>();
        a.r = {sa(3), sa(4), sa(5)};
        b.t = sb.head<3>();
        b.r = {sb(3), sb(4), sb(5)};
        J.col(i) = (terrapose::project_point(a, P) - terrapose::project_point(b, P)) / (2 * step);
    }
    return J;
}

/// Sample covariance of projections of poses drawn from N(pose, Sigma),
/// plus isotropic pixel noise.
inline Mat2 monte_carlo_image_covariance(const CameraPose& pose, const Vec3& P, double pixel_noise, int samples,
                                         std::uint64_t seed) {
    Eigen::SelfAdjointEigenSolver<terrapose::Mat6> es(pose.covariance);
    const terrapose::Mat6 L =
        es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    Vec2 mean = Vec2::Zero();
    Mat2 m2 = Mat2::Zero();
    std::vector<Vec2> pts(static_cast<std::size_t>(samples));
    for (int k = 0; k < samples; ++k) {
        Vec6 z;
        for (int i = 0; i < 6; ++i) z(i) = n01(rng);
        const Vec6 s = pose.state() + L * z;
        CameraPose q = pose;
        q.t = s.head<3>();
        q.r = {s(3), s(4), s(5)};
        Vec2 uv = terrapose::project_point(q, P);
        uv += Vec2(n01(rng), n01(rng)) * pixel_noise;
        pts[static_cast<std::size_t>(k)] = uv;
        mean += uv;
    }
    mean /= samples;
    for (const auto& p : pts) m2 += (p - mean) * (p - mean).transpose();
    return m2 / (samples - 1);
}

/// Largest entrywise deviation, each entry normalized by sqrt(C_ii * C_jj)
/// of the reference (plain relative error on the diagonal).
inline double normalized_entry_error(const Mat2& est, const Mat2& ref) {
    double worst = 0.0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            worst = std::max(worst, std::abs(est(i, j) - ref(i, j)) / std::sqrt(ref(i, i) * ref(j, j)));
    return worst;
}

/// Exhaustive search over every monotone warping path (steps (1,0), (0,1),
/// (1,1)) that starts anywhere in query row 0 and ends anywhere in the last
/// query row. Depth-first with a cost bound; local costs are non-negative so
/// the bound never discards an optimal path.
inline double dtw_exhaustive(const std::vector<double>& qe, const std::vector<double>& qs,
                             const std::vector<double>& re, const std::vector<double>& rs, double lambda) {
    const int n = static_cast<int>(qe.size()), m = static_cast<int>(re.size());
    auto local = [&](int i, int j) {
        double c = std::fabs(qe[i] - re[j]);
        if (!std::isnan(qs[i]) && !std::isnan(rs[j])) c += lambda * std::fabs(qs[i] - rs[j]);
        return c;
    };
    double best = std::numeric_limits<double>::infinity();
    std::function<void(int, int, double)> walk = [&](int i, int j, double acc) {
        acc += local(i, j);
        if (acc >= best) return;
        if (i == n - 1) best = acc;
        if (i + 1 < n) walk(i + 1, j, acc);
        if (j + 1 < m) walk(i, j + 1, acc);
        if (i + 1 < n && j + 1 < m) walk(i + 1, j + 1, acc);
    };
    for (int j = 0; j < m; ++j) walk(0, j, 0.0);
    return best;
}

}  // namespace oracle
