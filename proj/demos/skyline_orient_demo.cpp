// Recovers camera heading from a rendered mountain view.
//   skyline_orient_demo [seed]

#include <cstdio>
#include <cstdlib>

#include "terrapose/orient.hpp"

using namespace terrapose;

int main(int argc, char** argv) {
    const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 3;
    const auto dem = synth_hill_mixture({0, 0, 50, 201, 201}, seed);

    CameraPose truth;
    truth.intrinsics = {550.0, 319.5, 239.5, 640, 480};
    truth.t = Vec3(5000, 4000, sample_elevation(dem, 5000, 4000) + 30.0);
    truth.r = {deg2rad(37.0), deg2rad(1.0), deg2rad(-0.5)};

    try {
        const auto view = render_view(dem, truth);
        const auto sky = extract_image_skyline(view.image);
        const auto ref = reference_from_panorama(render_horizon_panorama(dem, truth.t));
        const auto res = orient_skyline(query_angles(sky, truth.intrinsics, ref.azimuth_step), ref);
        std::printf("valid skyline columns: %d / %d\n", sky.valid_count(), sky.width());
        std::printf("heading  true %7.2f  estimated %7.2f deg\n", rad2deg(truth.r.heading), rad2deg(res.angles.heading));
        std::printf("tilt     true %7.2f  estimated %7.2f deg\n", rad2deg(truth.r.tilt), rad2deg(res.angles.tilt));
        std::printf("roll     true %7.2f  estimated %7.2f deg\n", rad2deg(truth.r.roll), rad2deg(res.angles.roll));
        std::printf("dtw cost %.6f\n", res.dtw_cost);
    } catch (const Error& e) {
        std::fprintf(stderr, "ERROR %s: %s\n", e.code().c_str(), e.detail().c_str());
        return e.numerical() ? 3 : 2;
    }
    return 0;
}
