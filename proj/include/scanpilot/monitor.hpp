#pragma once

// Object-movement monitoring from segmentation masks: dice-coefficient
// change detection against a stationary reference (or a sliding window), and
// extraction of the object's surface point cloud from mask + depth with
// dominant-plane removal and a height cutoff.

#include <deque>
#include <optional>
#include <random>
#include <stdexcept>

#include "scanpilot/geom.hpp"
#include "scanpilot/grid.hpp"
#include "scanpilot/log.hpp"

namespace scanpilot::monitor {

using geom::RigidTransform;

class UndefinedDiceError : public std::runtime_error {
 public:
  explicit UndefinedDiceError(const std::string& msg) : std::runtime_error(msg) {}
};

class EmptyCloudError : public std::runtime_error {
 public:
  explicit EmptyCloudError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Binary segmentation result for one camera frame.
struct Mask {
  BinaryGrid values;
  double timestamp_s = 0.0;

  std::size_t area() const {
    std::size_t n = 0;
    for (uint8_t v : values.data) n += v ? 1 : 0;
    return n;
  }
};

/// Pinhole camera intrinsics plus the hand-eye pose ^b_c T.
struct CameraModel {
  double fx = 0.0, fy = 0.0;  // px
  double cx = 0.0, cy = 0.0;  // px
  RigidTransform pose;        // camera -> base
  int width = 0, height = 0;

  void validate() const {
    if (fx <= 0.0 || fy <= 0.0) throw std::invalid_argument("CameraModel: focal lengths must be > 0");
    if (width < 1 || height < 1) throw std::invalid_argument("CameraModel: bad resolution");
  }

  /// Back-projects pixel (u, v) with depth z (meters) to camera-frame mm.
  Vec3 backproject_mm(double u, double v, double z_m) const {
    const double z = z_m * 1000.0;
    return Vec3((u - cx) * z / fx, (v - cy) * z / fy, z);
  }
};

/// 2 |a n b| / (|a| + |b|). Undefined when both masks are empty.
inline double dice_coefficient(const Mask& a, const Mask& b) {
  if (!a.values.same_shape(b.values)) {
    throw std::invalid_argument("dice_coefficient: mask resolutions differ");
  }
  std::size_t inter = 0, sum = 0;
  for (std::size_t i = 0; i < a.values.data.size(); ++i) {
    const bool pa = a.values.data[i] != 0, pb = b.values.data[i] != 0;
    inter += (pa && pb) ? 1 : 0;
    sum += (pa ? 1 : 0) + (pb ? 1 : 0);
  }
  if (sum == 0) throw UndefinedDiceError("dice_coefficient: both masks empty");
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sum);
}

struct MotionEvent {
  int frame_index = -1;
  double dice = 0.0;
  int reference_frame_index = -1;
};

enum class DetectionMode {
  kReference,  // compare against the last confirmed-stationary mask
  kSliding,    // compare against frame i - j
};

struct MotionDetectorConfig {
  double t_dice = 0.95;
  DetectionMode mode = DetectionMode::kReference;
  int sliding_j = 1;

  void validate() const {
    if (!(t_dice > 0.0 && t_dice < 1.0)) {
      throw std::invalid_argument("MotionDetector: T_dice must be in (0, 1)");
    }
    if (sliding_j < 1) throw std::invalid_argument("MotionDetector: sliding j must be >= 1");
  }
};

/// Stateful per-session detector; single-writer contract (one instance per
/// scan session). Feed one mask per frame; an event is emitted on the first
/// frame whose dice against the comparison mask drops below T_dice. An empty
/// comparison propagates as a motion event (conservative).
class MotionDetector {
 public:
  explicit MotionDetector(MotionDetectorConfig config = {}) : config_(config) {
    config_.validate();
  }

  std::optional<MotionEvent> update(const Mask& mask) {
    const int frame = next_frame_++;
    std::optional<MotionEvent> event;
    const Mask* comparison = nullptr;
    int comparison_frame = -1;
    if (config_.mode == DetectionMode::kReference) {
      if (reference_) {
        comparison = &*reference_;
        comparison_frame = reference_frame_;
      }
    } else {
      if (static_cast<int>(window_.size()) >= config_.sliding_j) {
        comparison = &window_[window_.size() - static_cast<std::size_t>(config_.sliding_j)].first;
        comparison_frame = window_[window_.size() - static_cast<std::size_t>(config_.sliding_j)].second;
      }
    }
    if (comparison) {
      double d;
      bool undefined = false;
      try {
        d = dice_coefficient(mask, *comparison);
      } catch (const UndefinedDiceError&) {
        d = 0.0;
        undefined = true;
      }
      if (undefined || d < config_.t_dice) {
        event = MotionEvent{frame, d, comparison_frame};
      }
    } else if (config_.mode == DetectionMode::kReference) {
      reference_ = mask;
      reference_frame_ = frame;
    }
    if (config_.mode == DetectionMode::kSliding) {
      window_.emplace_back(mask, frame);
      while (static_cast<int>(window_.size()) > config_.sliding_j) window_.pop_front();
    }
    return event;
  }

  /// Called after compensation completes: the current state becomes the new
  /// stationary reference.
  void reset_reference(const Mask& mask) {
    reference_ = mask;
    reference_frame_ = next_frame_ == 0 ? 0 : next_frame_ - 1;
    window_.clear();
  }

  const MotionDetectorConfig& config() const { return config_; }
  int frames_seen() const { return next_frame_; }

 private:
  MotionDetectorConfig config_;
  std::optional<Mask> reference_;
  int reference_frame_ = -1;
  std::deque<std::pair<Mask, int>> window_;
  int next_frame_ = 0;
};

struct PlaneFitParams {
  int iterations = 200;
  double min_inlier_fraction = 0.10;
  // The table is horizontal in the base frame; candidate planes are
  // restricted to near-horizontal normals and the lowest qualifying plane
  // wins, so a flat band on the object itself cannot be mistaken for it.
  double max_tilt_deg = 25.0;
  uint64_t seed = 12345;
};

struct MaskCloudParams {
  double plane_dist_tol_mm = 10.0;  // consensus-plane inlier distance
  double z_cut_mm = 1e9;            // drop base-frame points above this height
  int stride = 1;                   // pixel subsampling inside the bbox
  int bbox_margin_px = 12;          // context around the mask bounding box
  PlaneFitParams plane;
};

namespace detail {

struct Plane {
  Vec3 normal = Vec3::UnitZ();  // oriented upward
  double offset = 0.0;          // n . x = offset
  double signed_height(const Vec3& p) const { return normal.dot(p) - offset; }
};

/// Seeded consensus fit of the lowest near-horizontal plane with sufficient
/// support. Returns nullopt when no candidate qualifies.
inline std::optional<Plane> fit_table_plane(const std::vector<Vec3>& pts,
                                            const PlaneFitParams& params, double tol) {
  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
  const double min_up = std::cos(params.max_tilt_deg * M_PI / 180.0);
  const auto min_inliers = static_cast<std::size_t>(
      params.min_inlier_fraction * static_cast<double>(pts.size()));
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());

  std::optional<Plane> best;
  double best_height = std::numeric_limits<double>::infinity();
  std::size_t best_inliers = 0;
  for (int it = 0; it < params.iterations; ++it) {
    const Vec3& a = pts[pick(rng)];
    const Vec3& b = pts[pick(rng)];
    const Vec3& c = pts[pick(rng)];
    Vec3 n = (b - a).cross(c - a);
    const double nn = n.norm();
    if (nn < 1e-9) continue;
    n /= nn;
    if (n.z() < 0.0) n = -n;
    if (n.z() < min_up) continue;
    const double off = n.dot(a);
    std::size_t inliers = 0;
    for (const Vec3& p : pts) {
      if (std::abs(n.dot(p) - off) <= tol) ++inliers;
    }
    if (inliers < std::max<std::size_t>(min_inliers, 3)) continue;
    // Plane height under the cloud centroid, with a tie band of one inlier
    // tolerance so the flattest, best-supported candidate wins.
    const double height = (off - n.x() * centroid.x() - n.y() * centroid.y()) / n.z();
    if (height < best_height - tol ||
        (height < best_height + tol && inliers > best_inliers)) {
      best_height = std::min(best_height, height);
      best_inliers = inliers;
      best = Plane{n, off};
    }
  }
  return best;
}

}  // namespace detail

/// Back-projects valid-depth pixels inside the mask's bounding box (plus a
/// small margin of context) through the pinhole model into the base frame,
/// removes the table: the lowest dominant near-horizontal plane and anything
/// under it, then drops points above z_cut.
inline PointCloud mask_to_cloud(const Mask& mask, const DepthGrid& depth, const CameraModel& cam,
                                const MaskCloudParams& params = {}) {
  cam.validate();
  if (!mask.values.same_shape(depth)) {
    throw std::invalid_argument("mask_to_cloud: mask and depth resolutions differ");
  }

  int u0 = mask.values.width, u1 = -1, v0 = mask.values.height, v1 = -1;
  for (int v = 0; v < mask.values.height; ++v) {
    for (int u = 0; u < mask.values.width; ++u) {
      if (mask.values.at(v, u)) {
        u0 = std::min(u0, u);
        u1 = std::max(u1, u);
        v0 = std::min(v0, v);
        v1 = std::max(v1, v);
      }
    }
  }
  if (u1 < 0) throw EmptyCloudError("mask_to_cloud: empty mask");
  u0 = std::max(0, u0 - params.bbox_margin_px);
  v0 = std::max(0, v0 - params.bbox_margin_px);
  u1 = std::min(mask.values.width - 1, u1 + params.bbox_margin_px);
  v1 = std::min(mask.values.height - 1, v1 + params.bbox_margin_px);

  std::vector<Vec3> pts;
  for (int v = v0; v <= v1; v += params.stride) {
    for (int u = u0; u <= u1; u += params.stride) {
      const double z = depth.at(v, u);
      if (!(z > 0.0) || !std::isfinite(z)) continue;
      pts.push_back(cam.pose * cam.backproject_mm(u + 0.5, v + 0.5, z));
    }
  }
  if (pts.empty()) throw EmptyCloudError("mask_to_cloud: no valid-depth pixels in bounding box");

  // Table removal; skipped with a warning when no plane has enough support.
  if (pts.size() >= 3) {
    const std::optional<detail::Plane> table =
        detail::fit_table_plane(pts, params.plane, params.plane_dist_tol_mm);
    if (table) {
      std::vector<Vec3> kept;
      kept.reserve(pts.size());
      for (const Vec3& p : pts) {
        if (table->signed_height(p) > params.plane_dist_tol_mm) kept.push_back(p);
      }
      pts = std::move(kept);
    } else {
      log::warn("mask_to_cloud: no qualifying table plane, keeping all points");
    }
  }

  PointCloud out;
  out.points.reserve(pts.size());
  for (const Vec3& p : pts) {
    if (p.z() <= params.z_cut_mm) out.points.push_back(p);
  }
  if (out.empty()) throw EmptyCloudError("mask_to_cloud: all points filtered out");
  return out;
}

}  // namespace scanpilot::monitor
