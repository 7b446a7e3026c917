#pragma once

// Scan trajectory construction: vessel centerline extraction from the artery
// cloud, vertical projection onto the arm surface, probe orientation from
// surface normals, hand-eye calibration and the pixel <-> probe <-> base
// frame chain of the linear-probe imaging model.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "scanpilot/geom.hpp"

namespace scanpilot::planner {

using geom::KdTree;
using geom::RigidTransform;

class CenterlineError : public std::runtime_error {
 public:
  explicit CenterlineError(const std::string& msg) : std::runtime_error(msg) {}
};

class DegenerateFrameError : public std::runtime_error {
 public:
  explicit DegenerateFrameError(const std::string& msg) : std::runtime_error(msg) {}
};

class DegenerateConfigurationError : public std::runtime_error {
 public:
  explicit DegenerateConfigurationError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Calibration

/// US and hand-eye calibration bundle. The linear probe maps image pixels to
/// the probe frame via the lateral scale L_p/W_us and the depth scale D/H_us;
/// epsilon_0 absorbs the unknown element offset below the probe tip.
struct CalibrationSet {
  RigidTransform flange_to_probe;  // rotation fixed to identity by rig design
  double probe_width_mm = 37.5;    // L_p
  double imaging_depth_mm = 55.0;  // D
  int image_width_px = 375;        // W_us
  int image_height_px = 550;       // H_us
  double element_offset_mm = 0.0;  // epsilon_0
  RigidTransform hand_eye;         // ^b_c T, camera -> base

  void validate() const {
    if (probe_width_mm <= 0.0 || imaging_depth_mm <= 0.0) {
      throw std::invalid_argument("CalibrationSet: L_p and D must be > 0");
    }
    if (image_width_px < 1 || image_height_px < 1) {
      throw std::invalid_argument("CalibrationSet: image dimensions must be >= 1");
    }
  }

  double lateral_scale() const { return probe_width_mm / image_width_px; }   // mm/px
  double depth_scale() const { return imaging_depth_mm / image_height_px; }  // mm/px
};

/// Image coordinates (w, h) in the probe frame. w runs from the left image
/// edge (w = 0 maps to +L_p/2 on the probe long axis Y_p), h from the
/// transducer row downward along depth.
inline Vec3 pixel_to_probe(double w, double h, const CalibrationSet& calib) {
  calib.validate();
  if (w < 0.0 || w > calib.image_width_px || h < 0.0 || h > calib.image_height_px) {
    throw std::invalid_argument("pixel_to_probe: pixel out of range");
  }
  return Vec3(0.0, -calib.lateral_scale() * w + calib.probe_width_mm / 2.0,
              calib.depth_scale() * h + calib.element_offset_mm);
}

/// Full chain ^b_us T = ^b_f T ^f_p T ^p_us T applied to a pixel; here the
/// probe pose ^b_p T already folds the flange chain.
inline Vec3 pixel_to_base(double w, double h, const RigidTransform& probe_pose,
                          const CalibrationSet& calib) {
  return probe_pose * pixel_to_probe(w, h, calib);
}

/// Mask-pixel centers use half-pixel offsets so a symmetric mask maps to the
/// exact probe centerline.
inline Vec3 pixel_center_to_probe(double h_idx, double w_idx, const CalibrationSet& calib) {
  return pixel_to_probe(w_idx + 0.5, h_idx + 0.5, calib);
}

// ---------------------------------------------------------------------------
// Hand-eye calibration

struct HandEyeResult {
  RigidTransform transform;  // camera -> base
  double residual_rms_mm = 0.0;
};

/// Closed-form rigid fit from paired (camera, base) point coordinates.
inline HandEyeResult hand_eye_calibrate(const std::vector<std::pair<Vec3, Vec3>>& pairs) {
  if (pairs.size() < 3) {
    throw std::invalid_argument("hand_eye_calibrate: need at least 3 pairs");
  }
  std::vector<Vec3> cam, base;
  cam.reserve(pairs.size());
  base.reserve(pairs.size());
  for (const auto& [c, b] : pairs) {
    cam.push_back(c);
    base.push_back(b);
  }
  HandEyeResult out;
  try {
    out.transform = geom::fit_rigid_least_squares(cam, base);
  } catch (const std::invalid_argument& e) {
    throw DegenerateConfigurationError(std::string("hand_eye_calibrate: ") + e.what());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < cam.size(); ++i) {
    acc += (base[i] - out.transform * cam[i]).squaredNorm();
  }
  out.residual_rms_mm = std::sqrt(acc / static_cast<double>(cam.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Centerline extraction and surface projection

/// Bins the artery cloud along its first principal axis with interval d_in
/// and emits per-bin mean points, ordered along the axis. Empty bins are
/// skipped.
inline std::vector<Vec3> extract_centerline(const PointCloud& artery_cloud, double d_in) {
  if (artery_cloud.size() < 10) {
    throw std::invalid_argument("extract_centerline: need at least 10 points");
  }
  if (d_in <= 0.0) throw std::invalid_argument("extract_centerline: d_in must be > 0");

  const geom::PrincipalAxes axes = geom::principal_axes(artery_cloud);
  const Vec3 axis = axes.axes[0];
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::vector<double> proj(artery_cloud.size());
  for (std::size_t i = 0; i < artery_cloud.size(); ++i) {
    proj[i] = (artery_cloud.points[i] - axes.mean).dot(axis);
    lo = std::min(lo, proj[i]);
    hi = std::max(hi, proj[i]);
  }
  const int bins = std::max(1, static_cast<int>(std::ceil((hi - lo) / d_in)));
  if (bins < 2) {
    throw CenterlineError("extract_centerline: all points fall in a single bin");
  }
  // Bin edges are centered on the projection midpoint so the partition is
  // invariant under the conventional sign of the principal axis.
  const double lo_edge = 0.5 * (lo + hi) - 0.5 * bins * d_in;
  std::vector<Vec3> sums(static_cast<std::size_t>(bins), Vec3::Zero());
  std::vector<int> counts(static_cast<std::size_t>(bins), 0);
  for (std::size_t i = 0; i < artery_cloud.size(); ++i) {
    int b = static_cast<int>(std::floor((proj[i] - lo_edge) / d_in));
    b = std::clamp(b, 0, bins - 1);
    sums[static_cast<std::size_t>(b)] += artery_cloud.points[i];
    ++counts[static_cast<std::size_t>(b)];
  }
  std::vector<Vec3> centers;
  centers.reserve(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    if (counts[static_cast<std::size_t>(b)] > 0) {
      centers.push_back(sums[static_cast<std::size_t>(b)] /
                        static_cast<double>(counts[static_cast<std::size_t>(b)]));
    }
  }
  if (centers.size() < 2) {
    throw CenterlineError("extract_centerline: fewer than 2 occupied bins");
  }
  return centers;
}

/// Lifts each center to the surface maximum height and averages its K_st
/// nearest surface points into a trajectory key point.
inline std::vector<Vec3> project_centerline_to_surface(const std::vector<Vec3>& centers,
                                                       const PointCloud& surface, int k_st) {
  if (surface.empty() || k_st < 1 || static_cast<std::size_t>(k_st) > surface.size()) {
    throw std::invalid_argument("project_centerline_to_surface: bad K_st or empty surface");
  }
  double z_max = -std::numeric_limits<double>::infinity();
  for (const Vec3& p : surface.points) z_max = std::max(z_max, p.z());

  KdTree tree(surface.points);
  std::vector<Vec3> key_points;
  key_points.reserve(centers.size());
  for (const Vec3& c : centers) {
    const Vec3 lifted(c.x(), c.y(), z_max);
    const std::vector<int> nb = tree.knn(lifted, k_st);
    Vec3 mean = Vec3::Zero();
    for (int j : nb) mean += surface.points[static_cast<std::size_t>(j)];
    key_points.push_back(mean / static_cast<double>(nb.size()));
  }
  return key_points;
}

// ---------------------------------------------------------------------------
// Trajectory

/// One executable probe pose. Orientation columns are the probe axes
/// (X_p, Y_p, Z_p) expressed in the base frame: Z_p points into the surface
/// (anti-parallel to the outward normal), Y_p is the probe long axis,
/// orthogonal to the scan path.
struct ScanWaypoint {
  Vec3 position = Vec3::Zero();
  Mat3 orientation = Mat3::Identity();

  Vec3 axis_x() const { return orientation.col(0); }
  Vec3 axis_y() const { return orientation.col(1); }
  Vec3 axis_z() const { return orientation.col(2); }

  RigidTransform pose() const { return RigidTransform(orientation, position); }
};

struct Trajectory {
  std::vector<ScanWaypoint> waypoints;
  double spacing = 0.0;  // nominal consecutive spacing, mm

  void validate() const {
    if (waypoints.size() < 2) throw std::invalid_argument("Trajectory: need >= 2 waypoints");
    if (spacing <= 0.0) throw std::invalid_argument("Trajectory: spacing must be > 0");
    for (std::size_t i = 1; i < waypoints.size(); ++i) {
      const double d = (waypoints[i].position - waypoints[i - 1].position).norm();
      if (d < 0.2 * spacing || d > 5.0 * spacing) {
        throw std::invalid_argument("Trajectory: consecutive spacing outside [0.2, 5] x nominal");
      }
    }
  }
};

/// Builds waypoint frames: Z_p = -normal at the nearest surface point, path
/// tangent from centered differences (one-sided at the ends), Y_p = normal x
/// tangent, X_p completes the right-handed frame.
inline Trajectory orient_waypoints(const std::vector<Vec3>& key_points,
                                   const PointCloud& surface_with_normals) {
  if (key_points.size() < 2) {
    throw std::invalid_argument("orient_waypoints: need at least 2 key points");
  }
  surface_with_normals.require_normals("orient_waypoints");

  KdTree tree(surface_with_normals.points);
  const std::size_t n = key_points.size();
  Trajectory traj;
  traj.waypoints.reserve(n);
  double spacing_acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 tangent;
    if (i == 0) {
      tangent = key_points[1] - key_points[0];
    } else if (i + 1 == n) {
      tangent = key_points[n - 1] - key_points[n - 2];
    } else {
      tangent = key_points[i + 1] - key_points[i - 1];
    }
    const double tn = tangent.norm();
    if (tn < 1e-12) {
      throw DegenerateFrameError("orient_waypoints: zero path tangent at waypoint " +
                                 std::to_string(i));
    }
    tangent /= tn;

    const int nearest = tree.nearest(key_points[i]);
    const Vec3 normal = surface_with_normals.normals[static_cast<std::size_t>(nearest)];
    Vec3 y = normal.cross(tangent);
    const double yn = y.norm();
    if (yn < 1e-9) {
      throw DegenerateFrameError("orient_waypoints: normal parallel to tangent at waypoint " +
                                 std::to_string(i));
    }
    y /= yn;
    const Vec3 z = -normal.normalized();
    const Vec3 x = y.cross(z);
    Mat3 r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    r = geom::project_to_rotation(r);
    if (r.col(2).dot(normal) > -0.99) {
      throw DegenerateFrameError("orient_waypoints: probe axis not anti-aligned with normal");
    }
    traj.waypoints.push_back({key_points[i], r});
    if (i > 0) spacing_acc += (key_points[i] - key_points[i - 1]).norm();
  }
  traj.spacing = spacing_acc / static_cast<double>(n - 1);
  traj.validate();
  return traj;
}

// ---------------------------------------------------------------------------
// Frame transfer

/// Applies ^b_c T o ^c_ct T to every waypoint position and orientation.
inline Trajectory transfer_trajectory(const Trajectory& traj_in_ct,
                                      const RigidTransform& camera_from_ct,
                                      const RigidTransform& base_from_camera) {
  const RigidTransform chain = base_from_camera * camera_from_ct;
  Trajectory out = traj_in_ct;
  for (ScanWaypoint& wp : out.waypoints) {
    wp.position = chain * wp.position;
    wp.orientation = chain.rotation() * wp.orientation;
  }
  return out;
}

/// Point-cloud overload for transferring the artery cloud into the base frame.
inline PointCloud transfer_trajectory(const PointCloud& cloud_in_ct,
                                      const RigidTransform& camera_from_ct,
                                      const RigidTransform& base_from_camera) {
  return cloud_in_ct.transformed(base_from_camera * camera_from_ct);
}

}  // namespace scanpilot::planner
