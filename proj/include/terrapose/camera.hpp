#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "json.hpp"
#include "terrapose/error.hpp"

namespace terrapose {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Jacobian26 = Eigen::Matrix<double, 2, 6>;

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Wraps to [0, 2*pi).
inline double wrap_two_pi(double a) {
    double w = std::fmod(a, kTwoPi);
    if (w < 0) w += kTwoPi;
    if (w >= kTwoPi) w = 0.0;
    return w;
}

/// Wraps to [-pi, pi).
inline double wrap_pi(double a) { return wrap_two_pi(a + kPi) - kPi; }

struct CameraIntrinsics {
    double focal_px = 1000.0;
    double ppu = 0.0;
    double ppv = 0.0;
    int width = 0;
    int height = 0;
};

inline void validate(const CameraIntrinsics& k) {
    if (!(k.focal_px > 0) || !std::isfinite(k.focal_px)) fail("InvalidIntrinsics", "focal_px must be > 0");
    if (k.width <= 0 || k.height <= 0) fail("InvalidIntrinsics", "image size must be positive");
    if (k.ppu < 0 || k.ppu > k.width || k.ppv < 0 || k.ppv > k.height)
        fail("InvalidIntrinsics", "principal point outside the image");
}

/// Heading: azimuth of the optical axis clockwise from north. Tilt: elevation
/// of the axis above the horizontal. Roll: rotation about the optical axis.
struct Angles {
    double heading = 0.0;
    double tilt = 0.0;
    double roll = 0.0;
};

/// Position and attitude with a 6x6 covariance over (X, Y, Z, heading, tilt, roll).
struct CameraPose {
    Vec3 t = Vec3::Zero();
    Angles r;
    CameraIntrinsics intrinsics;
    Mat6 covariance = Mat6::Zero();

    Vec6 state() const {
        Vec6 s;
        s << t, r.heading, r.tilt, r.roll;
        return s;
    }
    void set_state(const Vec6& s) {
        t = s.head<3>();
        r.heading = wrap_two_pi(s(3));
        r.tilt = s(4);
        r.roll = wrap_pi(s(5));
    }
};

/// State difference a - b with the angular components wrapped to [-pi, pi).
inline Vec6 state_difference(const Vec6& a, const Vec6& b) {
    Vec6 d = a - b;
    d(3) = wrap_pi(d(3));
    d(5) = wrap_pi(d(5));
    return d;
}

namespace detail {

inline Mat3 heading_matrix(double h) {
    const double c = std::cos(h), s = std::sin(h);
    Mat3 m;
    m << c, -s, 0, 0, 0, -1, s, c, 0;
    return m;
}
inline Mat3 heading_matrix_d(double h) {
    const double c = std::cos(h), s = std::sin(h);
    Mat3 m;
    m << -s, -c, 0, 0, 0, 0, c, -s, 0;
    return m;
}
inline Mat3 tilt_matrix(double t) {
    const double c = std::cos(t), s = std::sin(t);
    Mat3 m;
    m << 1, 0, 0, 0, c, s, 0, -s, c;
    return m;
}
inline Mat3 tilt_matrix_d(double t) {
    const double c = std::cos(t), s = std::sin(t);
    Mat3 m;
    m << 0, 0, 0, 0, -s, c, 0, -c, -s;
    return m;
}
inline Mat3 roll_matrix(double r) {
    const double c = std::cos(r), s = std::sin(r);
    Mat3 m;
    m << c, s, 0, -s, c, 0, 0, 0, 1;
    return m;
}
inline Mat3 roll_matrix_d(double r) {
    const double c = std::cos(r), s = std::sin(r);
    Mat3 m;
    m << -s, c, 0, -c, -s, 0, 0, 0, 0;
    return m;
}

}  // namespace detail

/// World(ENU)-to-camera rotation, camera axes x-right, y-down, z-forward.
/// R = R_roll * R_tilt * R_heading, where R_heading already maps a level
/// north-looking camera onto ENU (x = east, y = -up, z = north at heading 0).
inline Mat3 rotation_from_angles(const Angles& a) {
    return detail::roll_matrix(a.roll) * detail::tilt_matrix(a.tilt) * detail::heading_matrix(a.heading);
}

/// Inverse of rotation_from_angles away from |tilt| = pi/2.
inline Angles angles_from_rotation(const Mat3& R) {
    Angles a;
    a.tilt = std::asin(std::clamp(R(2, 2), -1.0, 1.0));
    a.heading = wrap_two_pi(std::atan2(R(2, 0), R(2, 1)));
    a.roll = std::atan2(-R(0, 2), -R(1, 2));
    return a;
}

inline Vec3 camera_point(const CameraPose& pose, const Vec3& world) {
    return rotation_from_angles(pose.r) * (world - pose.t);
}

constexpr double kDefaultDepthEpsilon = 1e-6;

/// Collinearity projection. Points at or behind the camera plane raise BehindCamera.
inline Vec2 project_point(const CameraPose& pose, const Vec3& world, double eps_depth = kDefaultDepthEpsilon) {
    const Vec3 pc = camera_point(pose, world);
    if (!(pc.z() > eps_depth)) fail("BehindCamera", "point depth " + std::to_string(pc.z()) + " m");
    const auto& k = pose.intrinsics;
    return {k.ppu + k.focal_px * pc.x() / pc.z(), k.ppv + k.focal_px * pc.y() / pc.z()};
}

/// Unit world-frame direction of the ray through image point (u, v).
inline Vec3 pixel_ray(const CameraPose& pose, double u, double v) {
    const auto& k = pose.intrinsics;
    const Vec3 dc((u - k.ppu) / k.focal_px, (v - k.ppv) / k.focal_px, 1.0);
    return (rotation_from_angles(pose.r).transpose() * dc).normalized();
}

/// d(u,v)/d(X, Y, Z, heading, tilt, roll), analytic.
inline Jacobian26 projection_jacobian(const CameraPose& pose, const Vec3& world,
                                      double eps_depth = kDefaultDepthEpsilon) {
    using namespace detail;
    const Mat3 Rh = heading_matrix(pose.r.heading), Rt = tilt_matrix(pose.r.tilt), Rr = roll_matrix(pose.r.roll);
    const Mat3 R = Rr * Rt * Rh;
    const Vec3 d = world - pose.t;
    const Vec3 pc = R * d;
    if (!(pc.z() > eps_depth)) fail("BehindCamera", "point depth " + std::to_string(pc.z()) + " m");
    const double f = pose.intrinsics.focal_px, z = pc.z();
    Eigen::Matrix<double, 2, 3> dproj;
    dproj << f / z, 0, -f * pc.x() / (z * z), 0, f / z, -f * pc.y() / (z * z);
    Eigen::Matrix<double, 3, 6> dpc;
    dpc.leftCols<3>() = -R;
    dpc.col(3) = Rr * Rt * heading_matrix_d(pose.r.heading) * d;
    dpc.col(4) = Rr * tilt_matrix_d(pose.r.tilt) * Rh * d;
    dpc.col(5) = roll_matrix_d(pose.r.roll) * Rt * Rh * d;
    return dproj * dpc;
}

struct FieldOfView {
    double horizontal_rad;
    double focal_px;
};

inline FieldOfView fov_from_focal(double focal_mm, double sensor_width_mm, double image_width_px) {
    if (!(focal_mm > 0) || !(sensor_width_mm > 0) || !(image_width_px > 0))
        fail("NonPositiveInput", "focal, sensor width and image width must all be > 0");
    return {2.0 * std::atan(sensor_width_mm / (2.0 * focal_mm)), focal_mm * image_width_px / sensor_width_mm};
}

/// Chi-square quantile with two degrees of freedom (closed form).
inline double chi_square_2dof(double confidence) {
    if (!(confidence > 0 && confidence < 1)) fail("InvalidConfidence", "confidence must be in (0,1)");
    return -2.0 * std::log1p(-confidence);
}

/// Image-space gate around a predicted projection.
struct ConfidenceEllipse {
    Vec2 center = Vec2::Zero();
    Mat2 covariance = Mat2::Identity();
    double gate = 5.991464547107979;

    double mahalanobis2(const Vec2& q) const {
        const Vec2 d = q - center;
        return d.dot(covariance.ldlt().solve(d));
    }
    bool contains(const Vec2& q) const { return mahalanobis2(q) <= gate; }
    /// Area of the gated region in pixels^2.
    double area() const { return kPi * gate * std::sqrt(std::max(0.0, covariance.determinant())); }
};

/// First-order propagation of the pose covariance to image space:
/// J * Sigma * J^T + pixel_noise^2 * I.
inline ConfidenceEllipse propagate_pose_covariance(const CameraPose& pose, const Vec3& world, double pixel_noise,
                                                   double confidence = 0.95) {
    if (!(pixel_noise >= 0)) fail("InvalidNoise", "pixel_noise must be >= 0");
    ConfidenceEllipse e;
    e.center = project_point(pose, world);
    const Jacobian26 J = projection_jacobian(pose, world);
    Mat2 c = J * pose.covariance * J.transpose();
    c = 0.5 * (c + c.transpose());
    c += pixel_noise * pixel_noise * Mat2::Identity();
    e.covariance = c;
    e.gate = chi_square_2dof(confidence);
    return e;
}

inline void validate(const CameraPose& pose) {
    validate(pose.intrinsics);
    if (!pose.t.allFinite() || !std::isfinite(pose.r.heading) || !std::isfinite(pose.r.tilt) ||
        !std::isfinite(pose.r.roll))
        fail("InvalidPose", "non-finite pose component");
    if (std::abs(pose.r.tilt) > kPi / 2) fail("InvalidPose", "|tilt| must be <= 90 degrees");
    if (!pose.covariance.allFinite() || (pose.covariance - pose.covariance.transpose()).cwiseAbs().maxCoeff() >
                                            1e-9 * (1.0 + pose.covariance.cwiseAbs().maxCoeff()))
        fail("NonPsdPrior", "pose covariance must be finite and symmetric");
    Eigen::SelfAdjointEigenSolver<Mat6> es(pose.covariance);
    if (es.eigenvalues().minCoeff() < -1e-9 * (1.0 + es.eigenvalues().cwiseAbs().maxCoeff()))
        fail("NonPsdPrior", "pose covariance is not positive semidefinite");
}

// ---- JSON (angles in degrees at the file boundary) ----

namespace detail {
inline Mat6 angle_unit_scale() {
    Vec6 s;
    s << 1, 1, 1, kPi / 180.0, kPi / 180.0, kPi / 180.0;
    return s.asDiagonal();
}
}  // namespace detail

inline CameraPose pose_from_json(const nlohmann::json& j) {
    CameraPose p;
    try {
        p.t = Vec3(j.at("x").get<double>(), j.at("y").get<double>(), j.at("z").get<double>());
        p.r.heading = wrap_two_pi(deg2rad(j.value("heading_deg", 0.0)));
        p.r.tilt = deg2rad(j.value("tilt_deg", 0.0));
        p.r.roll = deg2rad(j.value("roll_deg", 0.0));
        p.intrinsics.focal_px = j.at("focal_px").get<double>();
        p.intrinsics.width = j.at("width").get<int>();
        p.intrinsics.height = j.at("height").get<int>();
        p.intrinsics.ppu = j.value("ppu", p.intrinsics.width / 2.0);
        p.intrinsics.ppv = j.value("ppv", p.intrinsics.height / 2.0);
        Mat6 cov = Mat6::Zero();
        if (j.contains("cov")) {
            const auto& c = j.at("cov");
            if (!c.is_array() || c.size() != 36) fail("InvalidPose", "cov must hold 36 numbers");
            for (int i = 0; i < 36; ++i) cov(i / 6, i % 6) = c[static_cast<std::size_t>(i)].get<double>();
        } else {
            const char* keys[] = {"sigma_x", "sigma_y", "sigma_z", "sigma_heading_deg", "sigma_tilt_deg",
                                  "sigma_roll_deg"};
            for (int i = 0; i < 6; ++i) {
                const double s = j.value(keys[i], 0.0);
                cov(i, i) = s * s;
            }
        }
        const Mat6 S = detail::angle_unit_scale();
        p.covariance = S * cov * S;
    } catch (const nlohmann::json::exception& e) {
        fail("InvalidPose", std::string("pose JSON: ") + e.what());
    }
    validate(p);
    return p;
}

inline nlohmann::json pose_to_json(const CameraPose& p) {
    nlohmann::json j;
    j["x"] = p.t.x();
    j["y"] = p.t.y();
    j["z"] = p.t.z();
    j["heading_deg"] = rad2deg(p.r.heading);
    j["tilt_deg"] = rad2deg(p.r.tilt);
    j["roll_deg"] = rad2deg(p.r.roll);
    j["focal_px"] = p.intrinsics.focal_px;
    j["ppu"] = p.intrinsics.ppu;
    j["ppv"] = p.intrinsics.ppv;
    j["width"] = p.intrinsics.width;
    j["height"] = p.intrinsics.height;
    const Mat6 Sinv = detail::angle_unit_scale().inverse();
    const Mat6 cov = Sinv * p.covariance * Sinv;
    nlohmann::json c = nlohmann::json::array();
    for (int i = 0; i < 36; ++i) c.push_back(cov(i / 6, i % 6));
    j["cov"] = c;
    return j;
}

}  // namespace terrapose
