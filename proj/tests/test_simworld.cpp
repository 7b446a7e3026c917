#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "helpers.hpp"
#include "scanpilot/compensate.hpp"
#include "scanpilot/confidence.hpp"
#include "scanpilot/simworld.hpp"

using namespace scanpilot;
using namespace scanpilot::testing;

namespace {

monitor::CameraModel scene_camera(const Vec3& position, const Vec3& target) {
  monitor::CameraModel cam;
  cam.fx = cam.fy = 400.0;
  cam.cx = 127.5;
  cam.cy = 127.5;
  cam.width = 256;
  cam.height = 256;
  const Vec3 zc = (target - position).normalized();
  const Vec3 xc = Vec3::UnitX();
  Vec3 yc = zc.cross(xc);
  yc.normalize();
  Mat3 r;
  r.col(0) = yc.cross(zc);
  r.col(1) = yc;
  r.col(2) = zc;
  cam.pose = RigidTransform(geom::project_to_rotation(r), position);
  return cam;
}

/// Straight-down probe orientation: Z_p = -z, X_p = +x.
Mat3 probe_down() {
  Mat3 r;
  r.col(0) = Vec3(1, 0, 0);
  r.col(1) = Vec3(0, -1, 0);
  r.col(2) = Vec3(0, 0, -1);
  return r;
}

}  // namespace

TEST_CASE("phantom generation", "[simworld]") {
  SECTION("defaults follow the desk-scale arm dimensions") {
    const sim::Phantom ph = sim::gen_phantom(1);
    REQUIRE(ph.params.length_mm == 440.0);
    auto [lo, hi] = ph.surface.bounding_box();
    REQUIRE(hi.x() - lo.x() == Catch::Approx(440.0).margin(1e-9));
    REQUIRE(ph.surface.size() >= 20000);
    REQUIRE(ph.surface.has_normals());
  }

  SECTION("zero roughness gives a perfect cylinder with radial normals") {
    sim::PhantomParams params;
    params.roughness_mm = 0.0;
    const sim::Phantom ph = sim::gen_phantom(7, params);
    for (std::size_t i = 0; i < ph.surface.size(); ++i) {
      const Vec3& p = ph.surface.points[i];
      REQUIRE(std::hypot(p.y(), p.z()) == Catch::Approx(25.0).margin(1e-9));
      const Vec3 radial = Vec3(0.0, p.y(), p.z()).normalized();
      REQUIRE(angle_deg_between(ph.surface.normals[i], radial) < 1.0);
    }
  }

  SECTION("same seed reproduces the phantom bit for bit") {
    const sim::Phantom a = sim::gen_phantom(42);
    const sim::Phantom b = sim::gen_phantom(42);
    REQUIRE(a.surface.size() == b.surface.size());
    for (std::size_t i = 0; i < a.surface.size(); ++i) {
      REQUIRE(a.surface.points[i] == b.surface.points[i]);
      REQUIRE(a.surface.normals[i] == b.surface.normals[i]);
    }
    for (std::size_t i = 0; i < a.centerline.size(); ++i) {
      REQUIRE(a.centerline[i] == b.centerline[i]);
    }
  }

  SECTION("vessel must stay inside the arm") {
    sim::PhantomParams params;
    params.vessel_depth_mm = 23.0;  // 23 + 3 >= 25
    REQUIRE_THROWS_AS(sim::gen_phantom(1, params), std::invalid_argument);
  }

  SECTION("centerline is strictly inside the surface") {
    const sim::Phantom ph = sim::gen_phantom(3);
    geom::KdTree tree(ph.surface.points);
    for (const Vec3& c : ph.centerline) {
      REQUIRE(tree.nearest_with_dist(c).second > ph.params.vessel_radius_mm);
    }
  }
}

TEST_CASE("camera rendering", "[simworld]") {
  SECTION("sphere self-occlusion: at most half the points visible") {
    PointCloud sphere = sphere_cloud(4000, 40.0);
    auto est = geom::estimate_normals(sphere, 10, Vec3::Zero());
    for (std::size_t i = 0; i < sphere.size(); ++i) {
      if (est.cloud.normals[i].dot(sphere.points[i]) < 0.0) est.cloud.normals[i] *= -1.0;
    }
    PointCloud world = est.cloud.transformed(RigidTransform::translation_only(Vec3(0, 0, 400)));
    monitor::CameraModel cam = scene_camera(Vec3(0, 0, 1000), Vec3(0, 0, 400));
    sim::RenderOptions opts;
    opts.include_table = false;
    const sim::CameraRender render = sim::render_scene(world, cam, opts);
    const double fraction =
        static_cast<double>(render.visible_cloud.size()) / static_cast<double>(world.size());
    REQUIRE(fraction <= 0.55);
    REQUIRE(fraction >= 0.2);
  }

  SECTION("repeat render is identical (dice 1.0)") {
    const sim::Phantom ph = [] {
      auto p = sim::gen_phantom(11);
      p.pose = RigidTransform::translation_only(Vec3(400, 0, 25));
      return p;
    }();
    monitor::CameraModel cam = scene_camera(Vec3(400, -300, 800), Vec3(400, 0, 25));
    sim::RenderOptions opts;
    opts.depth_noise_sigma_mm = 2.0;
    opts.noise_seed = 9;
    const sim::CameraRender a = sim::render_camera_view(ph, cam, opts);
    const sim::CameraRender b = sim::render_camera_view(ph, cam, opts);
    REQUIRE(monitor::dice_coefficient(a.mask, b.mask) == 1.0);
    REQUIRE(a.depth.data == b.depth.data);
    REQUIRE(a.visible_cloud.size() == b.visible_cloud.size());
    for (std::size_t i = 0; i < a.visible_cloud.size(); ++i) {
      REQUIRE(a.visible_cloud.points[i] == b.visible_cloud.points[i]);
    }
  }

  SECTION("noise-free visible cloud lies exactly on the phantom surface") {
    const sim::Phantom ph = [] {
      auto p = sim::gen_phantom(2);
      p.pose = RigidTransform::translation_only(Vec3(400, 0, 25));
      return p;
    }();
    monitor::CameraModel cam = scene_camera(Vec3(400, -300, 800), Vec3(400, 0, 25));
    const sim::CameraRender render = sim::render_camera_view(ph, cam);
    REQUIRE(render.visible_cloud.size() > 1000);
    const PointCloud world = ph.surface_world();
    geom::KdTree tree(world.points);
    for (const Vec3& q : render.visible_cloud.points) {
      REQUIRE(tree.nearest_with_dist(cam.pose * q).second < 1e-9);
    }
  }

  SECTION("a 20 percent occluder removes an image strip from mask and cloud") {
    const sim::Phantom ph = [] {
      auto p = sim::gen_phantom(11);
      p.pose = RigidTransform::translation_only(Vec3(400, 0, 25));
      return p;
    }();
    monitor::CameraModel cam = scene_camera(Vec3(400, -300, 800), Vec3(400, 0, 25));
    const sim::CameraRender clean = sim::render_camera_view(ph, cam);
    sim::RenderOptions opts;
    opts.occluder_fraction = 0.2;
    const sim::CameraRender occluded = sim::render_camera_view(ph, cam, opts);
    REQUIRE(occluded.mask.area() < 0.9 * clean.mask.area());
    REQUIRE(occluded.visible_cloud.size() < 0.9 * clean.visible_cloud.size());
    bool has_occluder_px = false;
    for (uint8_t v : occluded.labels.data) {
      if (v == static_cast<uint8_t>(sim::SceneLabel::kOccluder)) has_occluder_px = true;
    }
    REQUIRE(has_occluder_px);
  }

  SECTION("camera that misses the phantom reports an empty view") {
    const sim::Phantom ph = sim::gen_phantom(1);
    monitor::CameraModel cam = scene_camera(Vec3(0, 0, 800), Vec3(0, 0, 1600));  // looks away
    REQUIRE_THROWS_AS(sim::render_camera_view(ph, cam), sim::EmptyViewError);
  }
}

TEST_CASE("b-mode rendering", "[simworld]") {
  sim::PhantomParams params;
  params.roughness_mm = 0.0;  // analytic geometry for the oracle
  sim::Phantom ph = sim::gen_phantom(5, params);
  ph.pose = RigidTransform::translation_only(Vec3(400, 0, 25));
  planner::CalibrationSet calib;

  SECTION("probe over the vessel: centroid matches the analytic intersection") {
    const RigidTransform pose(probe_down(), Vec3(400, 0, 50.0));  // on the top surface
    const sim::BModeResult frame = sim::render_bmode(ph, pose, calib);
    const auto centroid = comp::vessel_centroid(frame.vessel_mask);
    REQUIRE(centroid.has_value());
    // Vessel center: depth below the probe tip = depth parameter, lateral 0.
    const double z_vessel = 50.0 - (25.0 - params.vessel_depth_mm + 25.0);  // world 38 -> 12 below
    (void)z_vessel;
    const double h_expect = params.vessel_depth_mm * calib.image_height_px / calib.imaging_depth_mm;
    const double w_expect = calib.image_width_px / 2.0;
    REQUIRE(std::abs(centroid->first - h_expect) < 2.0);
    REQUIRE(std::abs(centroid->second - w_expect) < 2.0);
    // Full ellipse: mask area close to the analytic disk area in pixels.
    const double px_area = (calib.lateral_scale() * calib.depth_scale());
    const double disk_px = M_PI * params.vessel_radius_mm * params.vessel_radius_mm / px_area;
    REQUIRE(static_cast<double>(frame.vessel_mask.area()) > 0.8 * disk_px);
    REQUIRE(static_cast<double>(frame.vessel_mask.area()) < 1.2 * disk_px);
  }

  SECTION("tilt produces a one-sided shadow and a converging correction loop") {
    const double tilt_deg = 10.0;
    sim::ContactParams light;
    light.desired_force_n = 0.5;  // 2 mm press: enough to expose the shadow

    auto seat_and_measure = [&](const Mat3& orientation) {
      const RigidTransform target(geom::project_to_rotation(orientation), Vec3(400, 0, 58.0));
      const sim::ContactStep step = sim::simulate_contact_step(target, ph, light);
      const sim::BModeResult frame = sim::render_bmode(ph, step.executed_pose, calib);
      const ConfidenceGrid map = confidence::confidence_map(frame.image);
      return std::make_pair(frame, confidence::evaluate_correction(map, 0.5, calib));
    };

    const Mat3 tilted = probe_down() * geom::rot_x(geom::deg2rad(tilt_deg));
    const auto [frame, r] = seat_and_measure(tilted);
    // Some columns lose contact, some keep it.
    double min_c = 2.0, max_c = -1.0;
    for (double c : frame.column_contact) {
      min_c = std::min(min_c, c);
      max_c = std::max(max_c, c);
    }
    REQUIRE(min_c < 0.5);
    REQUIRE(max_c > 0.9);
    REQUIRE(r.shadow_detected);

    // Antisymmetry under the opposite tilt.
    const auto [frame_neg, r_neg] =
        seat_and_measure(probe_down() * geom::rot_x(geom::deg2rad(-tilt_deg)));
    REQUIRE(r.theta_c_deg * r_neg.theta_c_deg < 0.0);

    // Closed-loop sign check: a damped in-plane correction about X_p (the
    // lookahead update applies exactly such fractions) must re-seat the probe
    // toward the contacted side and shrink the measured angle. A wrong sign
    // would grow it.
    const double eta = 0.25;
    const Mat3 corrected = geom::project_to_rotation(
        tilted * geom::rot_x(-geom::deg2rad(eta * r.theta_c_deg)));
    const auto [frame_fixed, r_fixed] = seat_and_measure(corrected);
    REQUIRE(std::abs(r_fixed.theta_c_deg) < std::abs(r.theta_c_deg));
  }

  SECTION("probe displaced beyond the vessel sees no mask") {
    const RigidTransform pose(probe_down(), Vec3(400, -24.0, 44.0));  // near surface, off vessel
    const sim::BModeResult frame = sim::render_bmode(ph, pose, calib);
    REQUIRE(frame.vessel_mask.area() == 0);
  }

  SECTION("probe far from the surface violates the precondition") {
    const RigidTransform pose(probe_down(), Vec3(400, 0, 120.0));
    REQUIRE_THROWS_AS(sim::render_bmode(ph, pose, calib), std::invalid_argument);
  }
}

TEST_CASE("contact surrogate", "[simworld]") {
  sim::PhantomParams params;
  params.roughness_mm = 0.0;
  sim::Phantom ph = sim::gen_phantom(5, params);
  ph.pose = RigidTransform::translation_only(Vec3(400, 0, 25));
  // Top surface at z = 50.

  SECTION("spring law: 2 N at 250 N/m presses 8 mm in") {
    sim::ContactParams cp;
    cp.desired_force_n = 2.0;
    cp.stiffness_n_per_m = 250.0;
    REQUIRE(cp.penetration_mm() == Catch::Approx(8.0).margin(1e-12));
    const RigidTransform target(probe_down(), Vec3(400, 0, 58.0));
    const sim::ContactStep step = sim::simulate_contact_step(target, ph, cp);
    REQUIRE(step.executed_pose.translation().z() == Catch::Approx(42.0).margin(1e-6));
    REQUIRE((step.executed_pose.rotation() - target.rotation()).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("zero force rests the tip exactly on the surface") {
    sim::ContactParams cp;
    cp.desired_force_n = 0.0;
    const RigidTransform target(probe_down(), Vec3(400, 0, 60.0));
    const sim::ContactStep step = sim::simulate_contact_step(target, ph, cp);
    REQUIRE(step.executed_pose.translation().z() == Catch::Approx(50.0).margin(1e-6));
  }

  SECTION("probe over a void loses contact") {
    const RigidTransform target(probe_down(), Vec3(800.0, 0, 60.0));  // beyond the arm end
    REQUIRE_THROWS_AS(sim::simulate_contact_step(target, ph), sim::ContactLostError);
  }
}

TEST_CASE("motion scripting", "[simworld]") {
  SECTION("identity event changes nothing") {
    sim::Phantom ph = sim::gen_phantom(1);
    ph.pose = RigidTransform::translation_only(Vec3(400, 0, 25));
    sim::Fiducial fid{Vec3(250, 180, 0)};
    const RigidTransform before = ph.pose;
    sim::MotionScriptEvent e;  // zero rotation, zero translation
    sim::apply_motion_script(ph, fid, e);
    REQUIRE(ph.pose.is_approx(before, 1e-12));
    REQUIRE((fid.position - Vec3(250, 180, 0)).norm() < 1e-12);
  }

  SECTION("fiducial rides the table rigidly") {
    sim::Phantom ph = sim::gen_phantom(1);
    ph.pose = RigidTransform::translation_only(Vec3(400, 0, 25));
    sim::Fiducial fid{Vec3(250, 180, 0)};
    sim::MotionScriptEvent e;
    e.translation = Vec3(50, 60, 0);
    sim::apply_motion_script(ph, fid, e);
    REQUIRE((fid.position - Vec3(300, 240, 0)).norm() < 1e-12);
    REQUIRE((ph.pose.translation() - Vec3(450, 60, 25)).norm() < 1e-12);
  }

  SECTION("rotation about a pivot keeps the pivot fixed") {
    sim::Phantom ph = sim::gen_phantom(1);
    sim::Fiducial fid{Vec3(400, 0, 0)};
    sim::MotionScriptEvent e;
    e.rot_z_deg = 45.0;
    e.pivot = Vec3(400, 0, 0);
    sim::apply_motion_script(ph, fid, e);
    REQUIRE((fid.position - Vec3(400, 0, 0)).norm() < 1e-9);
  }

  SECTION("script bounds are enforced") {
    sim::MotionScript script;
    sim::MotionScriptEvent e;
    e.translation = Vec3(150, 0, 0);
    script.events = {e};
    REQUIRE_THROWS_AS(script.validate(), std::invalid_argument);
    script.events[0].translation = Vec3(0, 0, 5.0);
    REQUIRE_THROWS_AS(script.validate(), std::invalid_argument);
    script.events[0].translation = Vec3::Zero();
    script.events[0].rot_z_deg = 85.0;
    REQUIRE_THROWS_AS(script.validate(), std::invalid_argument);
    script.events[0].rot_z_deg = 30.0;
    REQUIRE_NOTHROW(script.validate());
  }

  SECTION("random events are deterministic and inside the bounds") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      const sim::MotionScriptEvent a = sim::random_motion_event(seed, Vec3(400, 0, 0));
      const sim::MotionScriptEvent b = sim::random_motion_event(seed, Vec3(400, 0, 0));
      REQUIRE(a.translation == b.translation);
      REQUIRE(a.rot_z_deg == b.rot_z_deg);
      REQUIRE(std::abs(a.translation.x()) <= 55.0);
      REQUIRE(std::abs(a.translation.y()) <= 70.0);
      REQUIRE(std::abs(a.rot_z_deg) <= 80.0);
      sim::MotionScript script;
      script.events = {a};
      REQUIRE_NOTHROW(script.validate());
    }
  }
}
