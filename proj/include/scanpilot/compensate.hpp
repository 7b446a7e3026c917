#pragma once

// Motion compensation and sweep stitching: recover the object motion T_mc by
// registering the camera clouds taken before and after the movement, gate on
// the fiducial compensation error e_mc, re-target the remaining trajectory,
// apply the two-step fine adjustment that overlaps the boundary frames, and
// compound the tracked sweeps into one 3D vessel point set.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "scanpilot/geom.hpp"
#include "scanpilot/grid.hpp"
#include "scanpilot/log.hpp"
#include "scanpilot/monitor.hpp"
#include "scanpilot/planner.hpp"
#include "scanpilot/registration.hpp"

namespace scanpilot::comp {

using geom::RigidTransform;
using monitor::Mask;
using planner::CalibrationSet;
using planner::Trajectory;

class GateAbortError : public std::runtime_error {
 public:
  explicit GateAbortError(const std::string& msg) : std::runtime_error(msg) {}
};

class UndefinedGapError : public std::runtime_error {
 public:
  explicit UndefinedGapError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Waypoint and probe pose where scanning stopped when motion was detected.
struct BreakPoint {
  std::size_t waypoint_index = 0;
  RigidTransform probe_pose;
  int sweep_frame_index = -1;
};

struct CompensationResult {
  RigidTransform motion;  // T_mc: maps before-motion coordinates to after
  double e_mc_mm = 0.0;
  bool accepted = false;
  double threshold_mm = 10.0;
};

/// One tracked frame of a sweep. The stored pose is the probe pose ^b_p T;
/// image pixels reach the base frame through pixel_to_probe followed by this
/// pose. The centroid is in continuous image coordinates (h, w).
struct SweepFrame {
  RigidTransform probe_pose;
  UsImage image;     // may be empty when the frame has been spilled to disk
  Mask vessel_mask;
  double centroid_h = 0.0;
  double centroid_w = 0.0;
  bool has_vessel = false;
};

struct SweepRecord {
  std::vector<SweepFrame> frames;

  bool empty() const { return frames.empty(); }
  const SweepFrame& front() const { return frames.front(); }
  const SweepFrame& back() const { return frames.back(); }
};

struct CompoundVolume {
  PointCloud vessel_points;       // base frame
  std::vector<int> source_sweep;  // per-point sweep id
};

/// Continuous (h, w) centroid of a nonzero mask, using pixel centers.
inline std::optional<std::pair<double, double>> vessel_centroid(const Mask& mask) {
  double mass = 0.0, mh = 0.0, mw = 0.0;
  for (int y = 0; y < mask.values.height; ++y) {
    for (int x = 0; x < mask.values.width; ++x) {
      if (mask.values.at(y, x)) {
        mass += 1.0;
        mh += y + 0.5;
        mw += x + 0.5;
      }
    }
  }
  if (mass <= 0.0) return std::nullopt;
  return std::make_pair(mh / mass, mw / mass);
}

struct MotionRegistrationParams {
  reg::CoarseParams coarse;
  reg::IcpParams icp;
  bool try_identity_init = true;  // also run from identity, keep the better fit
};

/// Recovers the motion transform mapping the before-cloud into the
/// after-cloud coordinates: multiscale coarse alignment plus ICP, with an
/// identity-initialized run as a fallback candidate.
inline reg::RegistrationResult register_motion(const PointCloud& cloud_before,
                                               const PointCloud& cloud_after,
                                               const MotionRegistrationParams& params = {}) {
  if (cloud_before.size() < 50 || cloud_after.size() < 50) {
    throw std::invalid_argument("register_motion: need at least 50 points per cloud");
  }
  std::optional<reg::RegistrationResult> best;
  auto consider = [&](const RigidTransform& init) {
    try {
      reg::RegistrationResult r = reg::icp_refine(cloud_before, cloud_after, init, params.icp);
      if (!best || r.mse_history.back() < best->mse_history.back()) best = std::move(r);
    } catch (const reg::RegistrationError& e) {
      log::debug(std::string("register_motion: candidate failed: ") + e.what());
    }
  };
  try {
    consider(reg::coarse_align(cloud_before, cloud_after, params.coarse));
  } catch (const reg::CoarseAlignmentError& e) {
    log::debug(std::string("register_motion: ") + e.what());
  }
  if (params.try_identity_init) consider(RigidTransform::identity());
  if (!best) {
    throw reg::RegistrationError("register_motion: no candidate converged", {});
  }
  return *best;
}

/// e_mc = ||P'_ar - (R_mc P_ar + V_mc)||, accepted below the gate threshold.
inline CompensationResult evaluate_emc(const Vec3& marker_before, const Vec3& marker_after,
                                       const RigidTransform& motion, double threshold_mm = 10.0) {
  CompensationResult out;
  out.motion = motion;
  out.threshold_mm = threshold_mm;
  out.e_mc_mm = (marker_after - motion * marker_before).norm();
  out.accepted = out.e_mc_mm < threshold_mm;
  return out;
}

/// Applies T_mc to the trajectory tail from the breaking point onward;
/// earlier waypoints are discarded. Refuses when the gate rejected the
/// compensation (the sweep ends instead).
inline Trajectory retarget_trajectory(const Trajectory& traj, const BreakPoint& bp,
                                      const CompensationResult& comp) {
  if (!comp.accepted) {
    throw GateAbortError("retarget_trajectory: compensation error " +
                         std::to_string(comp.e_mc_mm) + " mm exceeds the gate; ending sweep");
  }
  if (bp.waypoint_index >= traj.waypoints.size()) {
    throw std::invalid_argument("retarget_trajectory: breakpoint outside trajectory");
  }
  if (traj.waypoints.size() - bp.waypoint_index < 2) {
    throw std::invalid_argument("retarget_trajectory: fewer than 2 waypoints remain");
  }
  Trajectory out;
  out.spacing = traj.spacing;
  out.waypoints.reserve(traj.waypoints.size() - bp.waypoint_index);
  for (std::size_t i = bp.waypoint_index; i < traj.waypoints.size(); ++i) {
    planner::ScanWaypoint wp = traj.waypoints[i];
    wp.position = comp.motion * wp.position;
    wp.orientation = geom::project_to_rotation(comp.motion.rotation() * wp.orientation);
    out.waypoints.push_back(wp);
  }
  out.validate();
  return out;
}

/// Step one of the fine adjustment: one global rigid correction
/// Delta = T_af_fi (T_mc T_be_la)^-1 left-composed onto every motion-mapped
/// before-sweep pose, so the updated last pose equals T_af_fi exactly and all
/// intra-sweep relative poses are preserved.
inline SweepRecord fine_adjust_poses(const SweepRecord& sweep_before, const RigidTransform& motion,
                                     const RigidTransform& last_before_pose,
                                     const RigidTransform& first_after_pose) {
  if (sweep_before.empty()) {
    throw std::invalid_argument("fine_adjust_poses: empty before-sweep");
  }
  const RigidTransform delta = first_after_pose * (motion * last_before_pose).inverse();
  SweepRecord out = sweep_before;
  for (SweepFrame& f : out.frames) {
    f.probe_pose = delta * (motion * f.probe_pose);
  }
  return out;
}

/// Step two: in-plane translational adjustment that overlaps the boundary
/// vessel centroids. The centroid pixel difference is converted to mm with
/// the probe imaging scales and rotated into the base frame with the overlap
/// frame's rotation; the shift is added to every before-sweep position.
inline SweepRecord inplane_adjust(const SweepRecord& sweep_before, double centroid_before_h,
                                  double centroid_before_w, bool before_has_vessel,
                                  double centroid_after_h, double centroid_after_w,
                                  bool after_has_vessel, const CalibrationSet& calib,
                                  const Mat3& overlap_rotation) {
  if (sweep_before.empty()) {
    throw std::invalid_argument("inplane_adjust: empty before-sweep");
  }
  if (!before_has_vessel || !after_has_vessel) {
    log::warn("inplane_adjust: empty vessel mask in a boundary frame, skipping adjustment");
    return sweep_before;
  }
  const Vec3 before_mm = planner::pixel_to_probe(centroid_before_w, centroid_before_h, calib);
  const Vec3 after_mm = planner::pixel_to_probe(centroid_after_w, centroid_after_h, calib);
  const Vec3 shift = overlap_rotation * (after_mm - before_mm);
  SweepRecord out = sweep_before;
  for (SweepFrame& f : out.frames) {
    f.probe_pose = RigidTransform(f.probe_pose.rotation(), f.probe_pose.translation() + shift);
  }
  return out;
}

enum class CompoundGranularity {
  kCentroid,  // one point per frame: the vessel-mask centroid
  kContour,   // vessel-mask boundary pixels
  kFullMask,  // every vessel-mask pixel
};

/// Maps vessel-mask pixels of every tracked frame through the frame chain to
/// the base frame. Frames without a vessel contribute nothing.
inline CompoundVolume compound_sweeps(const std::vector<SweepRecord>& sweeps,
                                      const CalibrationSet& calib,
                                      CompoundGranularity granularity = CompoundGranularity::kCentroid) {
  CompoundVolume out;
  int sweep_id = 0;
  for (const SweepRecord& sweep : sweeps) {
    for (const SweepFrame& f : sweep.frames) {
      if (!f.has_vessel) continue;
      auto emit = [&](double h, double w) {
        out.vessel_points.points.push_back(
            planner::pixel_to_base(w, h, f.probe_pose, calib));
        out.source_sweep.push_back(sweep_id);
      };
      if (granularity == CompoundGranularity::kCentroid) {
        emit(f.centroid_h, f.centroid_w);
        continue;
      }
      const BinaryGrid& m = f.vessel_mask.values;
      for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
          if (!m.at(y, x)) continue;
          if (granularity == CompoundGranularity::kContour) {
            const bool interior = y > 0 && y + 1 < m.height && x > 0 && x + 1 < m.width &&
                                  m.at(y - 1, x) && m.at(y + 1, x) && m.at(y, x - 1) &&
                                  m.at(y, x + 1);
            if (interior) continue;
          }
          emit(y + 0.5, x + 0.5);
        }
      }
    }
    ++sweep_id;
  }
  return out;
}

/// Residual stitching gap: base-frame distance between the vessel centroids
/// of the last before-frame and the first after-frame.
inline double stitching_gap(const SweepRecord& sweep_before, const SweepRecord& sweep_after,
                            const CalibrationSet& calib) {
  if (sweep_before.empty() || sweep_after.empty()) {
    throw UndefinedGapError("stitching_gap: missing boundary frames");
  }
  const SweepFrame& b = sweep_before.back();
  const SweepFrame& a = sweep_after.front();
  if (!b.has_vessel || !a.has_vessel) {
    throw UndefinedGapError("stitching_gap: missing boundary vessel centroid");
  }
  const Vec3 pb = planner::pixel_to_base(b.centroid_w, b.centroid_h, b.probe_pose, calib);
  const Vec3 pa = planner::pixel_to_base(a.centroid_w, a.centroid_h, a.probe_pose, calib);
  return (pb - pa).norm();
}

}  // namespace scanpilot::comp
