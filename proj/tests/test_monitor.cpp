#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "helpers.hpp"
#include "scanpilot/monitor.hpp"
#include "scanpilot/simworld.hpp"

using namespace scanpilot;
using namespace scanpilot::testing;

namespace {

monitor::Mask disk_mask(int width, int height, double cx, double cy, double radius,
                        double timestamp = 0.0) {
  monitor::Mask m;
  m.values = BinaryGrid(width, height, 0);
  m.timestamp_s = timestamp;
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      const double du = u - cx, dv = v - cy;
      if (du * du + dv * dv <= radius * radius) m.values.at(v, u) = 1;
    }
  }
  return m;
}

monitor::Mask rect_mask(int width, int height, int u0, int v0, int u1, int v1) {
  monitor::Mask m;
  m.values = BinaryGrid(width, height, 0);
  for (int v = v0; v < v1; ++v) {
    for (int u = u0; u < u1; ++u) m.values.at(v, u) = 1;
  }
  return m;
}

}  // namespace

TEST_CASE("dice coefficient", "[monitor]") {
  SECTION("identical nonzero masks give 1") {
    const monitor::Mask a = disk_mask(64, 64, 32, 32, 10);
    REQUIRE(monitor::dice_coefficient(a, a) == 1.0);
  }

  SECTION("disjoint masks give 0") {
    const monitor::Mask a = rect_mask(64, 64, 0, 0, 10, 10);
    const monitor::Mask b = rect_mask(64, 64, 30, 30, 40, 40);
    REQUIRE(monitor::dice_coefficient(a, b) == 0.0);
  }

  SECTION("equal areas overlapping half of each give 0.5") {
    const monitor::Mask a = rect_mask(64, 64, 0, 0, 20, 10);
    const monitor::Mask b = rect_mask(64, 64, 10, 0, 30, 10);
    REQUIRE(monitor::dice_coefficient(a, b) == 0.5);
  }

  SECTION("symmetric in its arguments") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> u(2, 60);
    for (int trial = 0; trial < 10; ++trial) {
      const monitor::Mask a = disk_mask(64, 64, u(rng), u(rng), 8);
      const monitor::Mask b = disk_mask(64, 64, u(rng), u(rng), 12);
      REQUIRE(monitor::dice_coefficient(a, b) == monitor::dice_coefficient(b, a));
    }
  }

  SECTION("errors") {
    const monitor::Mask a = rect_mask(32, 32, 0, 0, 4, 4);
    const monitor::Mask small = rect_mask(16, 16, 0, 0, 4, 4);
    REQUIRE_THROWS_AS(monitor::dice_coefficient(a, small), std::invalid_argument);
    monitor::Mask e1, e2;
    e1.values = BinaryGrid(32, 32, 0);
    e2.values = BinaryGrid(32, 32, 0);
    REQUIRE_THROWS_AS(monitor::dice_coefficient(e1, e2), monitor::UndefinedDiceError);
  }
}

TEST_CASE("motion detection", "[monitor]") {
  SECTION("static stream never triggers") {
    monitor::MotionDetector det;
    const monitor::Mask m = disk_mask(96, 96, 48, 48, 20);
    for (int i = 0; i < 200; ++i) {
      REQUIRE_FALSE(det.update(m).has_value());
    }
  }

  SECTION("a displaced mask below the threshold triggers on that frame") {
    monitor::MotionDetector det;
    const monitor::Mask base = rect_mask(96, 96, 10, 10, 50, 50);
    REQUIRE_FALSE(det.update(base).has_value());
    REQUIRE_FALSE(det.update(base).has_value());
    const monitor::Mask moved = rect_mask(96, 96, 30, 10, 70, 50);  // half overlap
    const auto event = det.update(moved);
    REQUIRE(event.has_value());
    REQUIRE(event->frame_index == 2);
    REQUIRE(event->reference_frame_index == 0);
    REQUIRE(event->dice == Catch::Approx(0.5).margin(1e-12));
  }

  SECTION("slow drift: reference mode triggers, sliding j=1 does not") {
    monitor::MotionDetectorConfig ref_cfg;
    monitor::MotionDetectorConfig sliding_cfg;
    sliding_cfg.mode = monitor::DetectionMode::kSliding;
    sliding_cfg.sliding_j = 1;
    monitor::MotionDetector ref(ref_cfg), sliding(sliding_cfg);

    std::optional<monitor::MotionEvent> ref_event;
    int ref_frame = -1;
    for (int i = 0; i < 40; ++i) {
      const monitor::Mask m = rect_mask(128, 96, 10 + i, 20, 50 + i, 60);  // 1 px per frame
      if (!ref_event) {
        ref_event = ref.update(m);
        if (ref_event) ref_frame = i;
      }
      REQUIRE_FALSE(sliding.update(m).has_value());
    }
    REQUIRE(ref_event.has_value());
    // Dice of a 40-px-wide rectangle shifted by k px is (40-k)/40; the first
    // frame below 0.95 is k = 3.
    REQUIRE(ref_frame == 3);
  }

  SECTION("an empty frame against a nonzero reference is a conservative event") {
    monitor::MotionDetector det;
    const monitor::Mask base = disk_mask(64, 64, 32, 32, 12);
    REQUIRE_FALSE(det.update(base).has_value());
    monitor::Mask empty;
    empty.values = BinaryGrid(64, 64, 0);
    const auto event = det.update(empty);
    REQUIRE(event.has_value());
    REQUIRE(event->dice == 0.0);
  }

  SECTION("reference reset arms the detector for the new scene") {
    monitor::MotionDetector det;
    const monitor::Mask a = rect_mask(96, 96, 10, 10, 50, 50);
    const monitor::Mask b = rect_mask(96, 96, 40, 40, 80, 80);
    REQUIRE_FALSE(det.update(a).has_value());
    REQUIRE(det.update(b).has_value());
    det.reset_reference(b);
    REQUIRE_FALSE(det.update(b).has_value());
    REQUIRE(det.update(a).has_value());
  }

  SECTION("threshold validation") {
    monitor::MotionDetectorConfig cfg;
    cfg.t_dice = 1.0;
    REQUIRE_THROWS_AS(monitor::MotionDetector(cfg), std::invalid_argument);
  }
}

TEST_CASE("mask back-projection", "[monitor]") {
  SECTION("principal-point pixel with 1 m depth maps to (0, 0, 1000) mm") {
    monitor::CameraModel cam;
    cam.fx = cam.fy = 320.0;
    cam.cx = 128.5;  // pixel (128, 96) center sits on the optical axis
    cam.cy = 96.5;
    cam.width = 256;
    cam.height = 192;
    monitor::Mask m;
    m.values = BinaryGrid(cam.width, cam.height, 0);
    m.values.at(96, 128) = 1;
    DepthGrid depth(cam.width, cam.height, 0.0);
    depth.at(96, 128) = 1.0;
    const PointCloud cloud = monitor::mask_to_cloud(m, depth, cam);
    REQUIRE(cloud.size() == 1);
    REQUIRE((cloud.points[0] - Vec3(0, 0, 1000)).norm() < 1e-9);
  }

  SECTION("table plane removed, arm kept (simulator ground truth)") {
    const sim::Phantom ph = [] {
      sim::PhantomParams params;
      auto p = sim::gen_phantom(11, params);
      p.pose = RigidTransform::translation_only(Vec3(400.0, 0.0, 25.0));
      return p;
    }();
    monitor::CameraModel cam;
    cam.fx = cam.fy = 400.0;
    cam.cx = 127.5;
    cam.cy = 127.5;
    cam.width = 256;
    cam.height = 256;
    {
      const Vec3 campos(400.0, -300.0, 800.0);
      const Vec3 zc = (Vec3(400.0, 0.0, 25.0) - campos).normalized();
      const Vec3 xc = Vec3::UnitX();
      const Vec3 yc = zc.cross(xc).normalized();
      Mat3 r;
      r.col(0) = xc;
      r.col(1) = yc;
      r.col(2) = zc;
      cam.pose = RigidTransform(geom::project_to_rotation(r), campos);
    }

    const sim::CameraRender render = sim::render_camera_view(ph, cam);
    monitor::MaskCloudParams params;
    params.z_cut_mm = 200.0;
    const PointCloud cloud = monitor::mask_to_cloud(render.mask, render.depth, cam, params);

    // Classify output points against the scene ground truth.
    const PointCloud arm = ph.surface_world();
    geom::KdTree arm_tree(arm.points);
    std::size_t on_table = 0, on_arm = 0;
    for (const Vec3& p : cloud.points) {
      if (std::abs(p.z()) <= params.plane_dist_tol_mm) {
        ++on_table;
      } else if (arm_tree.nearest_with_dist(p).second < 10.0) {
        ++on_arm;
      }
    }
    // Count bbox pixels per label for the reference totals.
    int u0 = render.mask.values.width, u1 = -1, v0 = render.mask.values.height, v1 = -1;
    for (int v = 0; v < render.mask.values.height; ++v) {
      for (int u = 0; u < render.mask.values.width; ++u) {
        if (render.mask.values.at(v, u)) {
          u0 = std::min(u0, u);
          u1 = std::max(u1, u);
          v0 = std::min(v0, v);
          v1 = std::max(v1, v);
        }
      }
    }
    std::size_t table_px = 0, arm_px = 0;
    for (int v = v0; v <= v1; ++v) {
      for (int u = u0; u <= u1; ++u) {
        const auto label = static_cast<sim::SceneLabel>(render.labels.at(v, u));
        if (label == sim::SceneLabel::kTable) ++table_px;
        if (label == sim::SceneLabel::kObject) ++arm_px;
      }
    }
    REQUIRE(table_px > 100);
    REQUIRE(static_cast<double>(on_table) < 0.01 * static_cast<double>(table_px));
    REQUIRE(static_cast<double>(on_arm) >= 0.95 * static_cast<double>(arm_px));
  }

  SECTION("empty mask is an error") {
    monitor::CameraModel cam;
    cam.fx = cam.fy = 300.0;
    cam.cx = cam.cy = 64.0;
    cam.width = cam.height = 128;
    monitor::Mask m;
    m.values = BinaryGrid(128, 128, 0);
    DepthGrid depth(128, 128, 1.0);
    REQUIRE_THROWS_AS(monitor::mask_to_cloud(m, depth, cam), monitor::EmptyCloudError);
  }

  SECTION("no valid depth inside the box is an error") {
    monitor::CameraModel cam;
    cam.fx = cam.fy = 300.0;
    cam.cx = cam.cy = 64.0;
    cam.width = cam.height = 128;
    monitor::Mask m = rect_mask(128, 128, 10, 10, 20, 20);
    DepthGrid depth(128, 128, 0.0);  // all invalid
    REQUIRE_THROWS_AS(monitor::mask_to_cloud(m, depth, cam), monitor::EmptyCloudError);
  }

  SECTION("moving the camera pose moves the cloud rigidly") {
    std::mt19937_64 rng(21);
    monitor::CameraModel cam;
    cam.fx = cam.fy = 350.0;
    cam.cx = cam.cy = 63.5;
    cam.width = cam.height = 128;
    monitor::Mask m = disk_mask(128, 128, 64, 64, 25);
    DepthGrid depth(128, 128, 0.0);
    std::uniform_real_distribution<double> ud(0.5, 1.5);
    for (int v = 0; v < 128; ++v) {
      for (int u = 0; u < 128; ++u) depth.at(v, u) = ud(rng);
    }
    monitor::MaskCloudParams params;
    params.plane.min_inlier_fraction = 2.0;  // disable plane removal for the oracle
    const PointCloud base_cloud = monitor::mask_to_cloud(m, depth, cam, params);

    const RigidTransform t = random_transform(rng, 100.0);
    monitor::CameraModel moved = cam;
    moved.pose = t * cam.pose;
    const PointCloud moved_cloud = monitor::mask_to_cloud(m, depth, moved, params);
    REQUIRE(moved_cloud.size() == base_cloud.size());
    for (std::size_t i = 0; i < base_cloud.size(); ++i) {
      REQUIRE((moved_cloud.points[i] - t * base_cloud.points[i]).norm() < 1e-9);
    }
  }
}
