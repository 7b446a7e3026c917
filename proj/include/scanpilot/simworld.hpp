#pragma once

// Deterministic desk-scale stand-ins for the physical rig: an arm phantom
// with an uneven surface and an embedded vessel, a z-buffered depth-camera
// render with self-occlusion and an optional robot-arm occluder, a B-mode
// synthesizer with contact-dependent shadowing, a 1-DoF constant-force
// contact surrogate and scripted rigid motion of the phantom + table
// fiducial. Everything is reproducible from seeds.

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "scanpilot/geom.hpp"
#include "scanpilot/grid.hpp"
#include "scanpilot/monitor.hpp"
#include "scanpilot/planner.hpp"

namespace scanpilot::sim {

using geom::KdTree;
using geom::RigidTransform;
using monitor::CameraModel;
using monitor::Mask;
using planner::CalibrationSet;

class EmptyViewError : public std::runtime_error {
 public:
  explicit EmptyViewError(const std::string& msg) : std::runtime_error(msg) {}
};

class ContactLostError : public std::runtime_error {
 public:
  explicit ContactLostError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Phantom

struct PhantomParams {
  double length_mm = 440.0;
  double arm_radius_mm = 25.0;
  double vessel_radius_mm = 3.0;
  double vessel_depth_mm = 12.0;  // top surface to vessel center
  double roughness_mm = 2.0;      // max radial perturbation
  double vessel_bow_mm = 0.0;     // lateral bow at mid-length; 0 = straight
  int surface_samples_axial = 352;
  int surface_samples_circ = 60;
  int vessel_samples_axial = 220;
  int vessel_samples_circ = 24;

  void validate() const {
    if (length_mm <= 0.0 || arm_radius_mm <= 0.0 || vessel_radius_mm <= 0.0) {
      throw std::invalid_argument("PhantomParams: dimensions must be > 0");
    }
    if (vessel_depth_mm + vessel_radius_mm >= arm_radius_mm) {
      throw std::invalid_argument("PhantomParams: vessel depth + radius must be < arm radius");
    }
    if (roughness_mm < 0.0) throw std::invalid_argument("PhantomParams: roughness must be >= 0");
  }
};

/// Canonical (template) frame: tube axis along X centered at the origin,
/// +Z up. The world placement is carried separately in `pose` and is the only
/// state the motion script mutates.
struct Phantom {
  PhantomParams params;
  PointCloud surface;            // canonical frame, analytic normals
  PointCloud vessel_surface;     // canonical frame
  std::vector<Vec3> centerline;  // canonical frame ground truth, ~1 mm steps
  RigidTransform pose;           // canonical -> world (base frame)

  PointCloud surface_world() const { return surface.transformed(pose); }
  PointCloud vessel_surface_world() const { return vessel_surface.transformed(pose); }
  std::vector<Vec3> centerline_world() const {
    std::vector<Vec3> out;
    out.reserve(centerline.size());
    for (const Vec3& p : centerline) out.push_back(pose * p);
    return out;
  }
};

namespace detail {

/// Smooth low-frequency radial perturbation and its parametric derivatives.
struct RoughnessField {
  struct Term {
    double amp, freq_x, phase_x, mode_phi, phase_phi;
  };
  std::vector<Term> terms;
  double length = 1.0;

  static RoughnessField make(uint64_t seed, double amplitude, double length) {
    RoughnessField f;
    f.length = length;
    if (amplitude <= 0.0) return f;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<Term> raw;
    double total = 0.0;
    for (int k = 0; k < 8; ++k) {
      Term t;
      t.amp = 0.5 + 0.5 * u01(rng);
      t.freq_x = 1.0 + std::floor(6.0 * u01(rng));           // 1..6 periods
      t.phase_x = 2.0 * M_PI * u01(rng);
      t.mode_phi = std::floor(6.0 * u01(rng));               // 0..5 lobes
      t.phase_phi = 2.0 * M_PI * u01(rng);
      total += t.amp;
      raw.push_back(t);
    }
    for (Term& t : raw) t.amp *= amplitude / total;
    f.terms = std::move(raw);
    return f;
  }

  double value(double x, double phi) const {
    double r = 0.0;
    for (const Term& t : terms) {
      r += t.amp * std::cos(2.0 * M_PI * t.freq_x * x / length + t.phase_x) *
           std::cos(t.mode_phi * phi + t.phase_phi);
    }
    return r;
  }

  double d_dx(double x, double phi) const {
    double r = 0.0;
    for (const Term& t : terms) {
      const double w = 2.0 * M_PI * t.freq_x / length;
      r += -t.amp * w * std::sin(w * x + t.phase_x) * std::cos(t.mode_phi * phi + t.phase_phi);
    }
    return r;
  }

  double d_dphi(double x, double phi) const {
    double r = 0.0;
    for (const Term& t : terms) {
      r += -t.amp * t.mode_phi * std::cos(2.0 * M_PI * t.freq_x * x / length + t.phase_x) *
           std::sin(t.mode_phi * phi + t.phase_phi);
    }
    return r;
  }
};

}  // namespace detail

/// Deterministic phantom: a tube with a seeded low-frequency uneven surface
/// and a vessel at the given depth under the top surface. Returns analytic
/// surface normals and the ground-truth vessel centerline.
inline Phantom gen_phantom(uint64_t seed, const PhantomParams& params = {}) {
  params.validate();
  Phantom ph;
  ph.params = params;
  const double half = params.length_mm / 2.0;

  detail::RoughnessField rough =
      detail::RoughnessField::make(seed, params.roughness_mm, params.length_mm);

  // Arm surface on an (x, phi) grid; phi = 0 is the top (+Z).
  const int nx = params.surface_samples_axial, nphi = params.surface_samples_circ;
  ph.surface.points.reserve(static_cast<std::size_t>(nx) * nphi);
  ph.surface.normals.reserve(static_cast<std::size_t>(nx) * nphi);
  for (int ix = 0; ix < nx; ++ix) {
    const double x = -half + params.length_mm * ix / (nx - 1);
    for (int ip = 0; ip < nphi; ++ip) {
      const double phi = 2.0 * M_PI * ip / nphi;
      const double r = params.arm_radius_mm + rough.value(x, phi);
      const double rx = rough.d_dx(x, phi);
      const double rp = rough.d_dphi(x, phi);
      const double s = std::sin(phi), c = std::cos(phi);
      ph.surface.points.emplace_back(x, r * s, r * c);
      const Vec3 du(1.0, rx * s, rx * c);
      const Vec3 dv(0.0, rp * s + r * c, rp * c - r * s);
      Vec3 n = du.cross(dv);
      if (n.dot(Vec3(0.0, s, c)) < 0.0) n = -n;  // outward
      ph.surface.normals.push_back(n.normalized());
    }
  }

  // Vessel centerline: z fixed below the nominal top surface, optional
  // lateral bow y(x) = bow * (1 - (2x/L)^2).
  const double z_v = params.arm_radius_mm - params.vessel_depth_mm;
  auto vessel_y = [&](double x) {
    const double t = 2.0 * x / params.length_mm;
    return params.vessel_bow_mm * (1.0 - t * t);
  };
  auto vessel_dy = [&](double x) {
    return params.vessel_bow_mm * (-8.0 * x / (params.length_mm * params.length_mm));
  };
  const int n_cl = static_cast<int>(std::ceil(params.length_mm)) + 1;
  ph.centerline.reserve(static_cast<std::size_t>(n_cl));
  for (int i = 0; i < n_cl; ++i) {
    const double x = -half + params.length_mm * i / (n_cl - 1);
    ph.centerline.emplace_back(x, vessel_y(x), z_v);
  }
  // Containment check against the actual (rough) surface.
  for (const Vec3& c : ph.centerline) {
    const double rad = std::hypot(c.y(), c.z());
    if (rad + params.vessel_radius_mm >= params.arm_radius_mm - params.roughness_mm) {
      throw std::invalid_argument("gen_phantom: vessel leaves the arm interior");
    }
  }

  // Vessel surface tube.
  const int va = params.vessel_samples_axial, vc = params.vessel_samples_circ;
  ph.vessel_surface.points.reserve(static_cast<std::size_t>(va) * vc);
  for (int ia = 0; ia < va; ++ia) {
    const double x = -half + params.length_mm * ia / (va - 1);
    const Vec3 center(x, vessel_y(x), z_v);
    Vec3 tangent(1.0, vessel_dy(x), 0.0);
    tangent.normalize();
    Vec3 n1 = tangent.cross(Vec3::UnitZ()).normalized();
    const Vec3 n2 = tangent.cross(n1);
    for (int ic = 0; ic < vc; ++ic) {
      const double th = 2.0 * M_PI * ic / vc;
      ph.vessel_surface.points.push_back(center + params.vessel_radius_mm *
                                                      (std::cos(th) * n1 + std::sin(th) * n2));
    }
  }
  return ph;
}

// ---------------------------------------------------------------------------
// Depth-camera render

enum class SceneLabel : uint8_t { kNone = 0, kObject = 1, kTable = 2, kOccluder = 3 };

struct RenderOptions {
  bool include_table = true;
  double table_z_mm = 0.0;
  double table_margin_mm = 120.0;   // table extent beyond the object bbox
  double table_spacing_mm = 6.0;
  double depth_noise_sigma_mm = 0.0;
  uint64_t noise_seed = 0;
  double occluder_fraction = 0.0;   // image-space fraction of the object bbox
  double occluder_anchor = 0.4;     // left edge of the occluder inside the bbox
  int splat_radius_px = 2;
  double timestamp_s = 0.0;
};

struct CameraRender {
  Mask mask;                 // object silhouette (segmentation stand-in)
  DepthGrid depth;           // meters, full scene
  PointCloud visible_cloud;  // camera frame; self-occlusion subset of the object
  Grid<uint8_t> labels;      // SceneLabel per pixel, for simulator oracles
};

namespace detail {

struct Splat {
  const PointCloud* cloud;
  SceneLabel label;
};

}  // namespace detail

/// Z-buffered point-splat render of an arbitrary object cloud (world frame,
/// normals required for backface culling) plus an optional table plane and
/// image-space occluder.
inline CameraRender render_scene(const PointCloud& object_world, const CameraModel& cam,
                                 const RenderOptions& opts = {}) {
  cam.validate();
  if (object_world.empty()) throw EmptyViewError("render_scene: empty object cloud");

  CameraRender out;
  out.depth = DepthGrid(cam.width, cam.height, 0.0);
  out.labels = Grid<uint8_t>(cam.width, cam.height, 0);
  out.mask.values = BinaryGrid(cam.width, cam.height, 0);
  out.mask.timestamp_s = opts.timestamp_s;

  const RigidTransform base_to_cam = cam.pose.inverse();
  const Vec3 cam_pos_world = cam.pose.translation();

  std::vector<float> zbuf(static_cast<std::size_t>(cam.width) * cam.height,
                          std::numeric_limits<float>::infinity());
  auto zb = [&](int v, int u) -> float& {
    return zbuf[static_cast<std::size_t>(v) * cam.width + u];
  };

  struct Projected {
    int u, v;
    double z_m;
    int index;
  };
  std::vector<Projected> object_px;

  auto splat_cloud = [&](const PointCloud& cloud, SceneLabel label, bool cull_backfaces,
                         bool record) {
    const bool normals = cloud.has_normals();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const Vec3& p = cloud.points[i];
      if (cull_backfaces && normals &&
          cloud.normals[i].dot(cam_pos_world - p) <= 0.0) {
        continue;
      }
      const Vec3 q = base_to_cam * p;
      if (q.z() <= 1.0) continue;  // behind or on the camera plane (mm)
      const double z_m = q.z() / 1000.0;
      const double u = cam.fx * q.x() / q.z() + cam.cx;
      const double v = cam.fy * q.y() / q.z() + cam.cy;
      const int ui = static_cast<int>(std::lround(u));
      const int vi = static_cast<int>(std::lround(v));
      if (ui < 0 || ui >= cam.width || vi < 0 || vi >= cam.height) continue;
      if (record) object_px.push_back({ui, vi, z_m, static_cast<int>(i)});
      const int r = opts.splat_radius_px;
      for (int dv = -r; dv <= r; ++dv) {
        for (int du = -r; du <= r; ++du) {
          if (du * du + dv * dv > r * r) continue;
          const int uu = ui + du, vv = vi + dv;
          if (uu < 0 || uu >= cam.width || vv < 0 || vv >= cam.height) continue;
          if (z_m < zb(vv, uu)) {
            zb(vv, uu) = static_cast<float>(z_m);
            out.labels.at(vv, uu) = static_cast<uint8_t>(label);
          }
        }
      }
    }
  };

  splat_cloud(object_world, SceneLabel::kObject, true, true);
  if (object_px.empty()) {
    throw EmptyViewError("render_scene: object fully outside the camera frustum");
  }

  if (opts.include_table) {
    auto [lo, hi] = object_world.bounding_box();
    PointCloud table;
    const double m = opts.table_margin_mm, s = opts.table_spacing_mm;
    for (double x = lo.x() - m; x <= hi.x() + m; x += s) {
      for (double y = lo.y() - m; y <= hi.y() + m; y += s) {
        table.points.emplace_back(x, y, opts.table_z_mm);
      }
    }
    splat_cloud(table, SceneLabel::kTable, false, false);
  }

  // Optional occluder: a simulated probe/robot blob in front of the object,
  // covering a configurable image-space strip of the object's bounding box.
  if (opts.occluder_fraction > 0.0) {
    int u_min = cam.width, u_max = -1, v_min = cam.height, v_max = -1;
    double z_min = std::numeric_limits<double>::infinity();
    for (const Projected& p : object_px) {
      u_min = std::min(u_min, p.u);
      u_max = std::max(u_max, p.u);
      v_min = std::min(v_min, p.v);
      v_max = std::max(v_max, p.v);
      z_min = std::min(z_min, p.z_m);
    }
    const int bw = u_max - u_min + 1;
    const int o0 = u_min + static_cast<int>(opts.occluder_anchor * bw);
    const int o1 = o0 + std::max(1, static_cast<int>(opts.occluder_fraction * bw));
    const double occ_z = 0.7 * z_min;
    for (int v = std::max(0, v_min - 4); v <= std::min(cam.height - 1, v_max + 4); ++v) {
      for (int u = std::max(0, o0); u <= std::min(cam.width - 1, o1); ++u) {
        zb(v, u) = static_cast<float>(occ_z);
        out.labels.at(v, u) = static_cast<uint8_t>(SceneLabel::kOccluder);
      }
    }
  }

  // Visibility: an object point survives if its projected pixel is object-
  // labeled and its depth is within tolerance of the buffer (its own splat or
  // a neighbor's).
  const double vis_tol_m = 0.004;
  std::vector<int> visible;
  for (const Projected& p : object_px) {
    if (out.labels.at(p.v, p.u) == static_cast<uint8_t>(SceneLabel::kObject) &&
        p.z_m <= zb(p.v, p.u) + vis_tol_m) {
      visible.push_back(p.index);
    }
  }
  if (visible.empty()) throw EmptyViewError("render_scene: object fully occluded");

  // Depth grid in meters with optional seeded sensor noise.
  std::mt19937_64 rng(opts.noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sigma_m = opts.depth_noise_sigma_mm / 1000.0;
  for (int v = 0; v < cam.height; ++v) {
    for (int u = 0; u < cam.width; ++u) {
      const float z = zb(v, u);
      if (!std::isfinite(z)) continue;
      double d = z;
      if (sigma_m > 0.0 && out.labels.at(v, u) != static_cast<uint8_t>(SceneLabel::kOccluder)) {
        d += sigma_m * gauss(rng);
      }
      out.depth.at(v, u) = std::max(1e-4, d);
      if (out.labels.at(v, u) == static_cast<uint8_t>(SceneLabel::kObject)) {
        out.mask.values.at(v, u) = 1;
      }
    }
  }

  // Self-occlusion cloud in the camera frame, with per-point depth noise
  // drawn from an independent stream.
  std::mt19937_64 cloud_rng(geom::derive_seed(opts.noise_seed, 0x5eed));
  out.visible_cloud.points.reserve(visible.size());
  for (int idx : visible) {
    Vec3 q = base_to_cam * object_world.points[static_cast<std::size_t>(idx)];
    if (sigma_m > 0.0) {
      const double range = q.norm();
      q *= (range + opts.depth_noise_sigma_mm * gauss(cloud_rng)) / range;
    }
    out.visible_cloud.points.push_back(q);
  }
  return out;
}

inline CameraRender render_camera_view(const Phantom& phantom, const CameraModel& cam,
                                       const RenderOptions& opts = {}) {
  return render_scene(phantom.surface_world(), cam, opts);
}

// ---------------------------------------------------------------------------
// B-mode synthesis

struct BModeOptions {
  // Multiplicative speckle, kept mild so the confidence solve sees tissue
  // texture rather than a wall of gradients.
  double speckle_sigma = 0.04;
  uint64_t speckle_seed = 0;
  // Coupling length: lift at which a column goes fully dark. Chosen so the
  // barycenter correction loop has a near-unity gain and converges.
  double contact_tol_mm = 4.0;
  double rim_width_mm = 1.0;    // bright vessel rim thickness
  double background = 0.45;     // TGC-flattened tissue level
  double surface_proximity_mm = 20.0;
};

struct BModeResult {
  UsImage image;
  Mask vessel_mask;
  std::vector<double> column_contact;  // per-column contact fraction
};

namespace detail {

/// Exact distance from a point to a sampled polyline (nearest sample plus its
/// two adjacent segments).
inline double polyline_distance(const std::vector<Vec3>& line, const KdTree& tree, const Vec3& p) {
  const int i = tree.nearest(p);
  double best = (line[static_cast<std::size_t>(i)] - p).norm();
  for (int j : {i - 1, i}) {
    if (j < 0 || j + 1 >= static_cast<int>(line.size())) continue;
    const Vec3& a = line[static_cast<std::size_t>(j)];
    const Vec3& b = line[static_cast<std::size_t>(j) + 1];
    const Vec3 ab = b - a;
    const double len2 = ab.squaredNorm();
    if (len2 <= 0.0) continue;
    const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
    best = std::min(best, (a + t * ab - p).norm());
  }
  return best;
}

}  // namespace detail

/// Renders the B-mode-like frame at the given probe pose: a bright-rimmed
/// dark ellipse where the image plane cuts the vessel, near-zero columns with
/// a bright air-interface line where the probe footprint lifts off the
/// surface, and seeded speckle. The vessel mask covers the dark interior of
/// contacted columns only.
inline BModeResult render_bmode(const Phantom& phantom, const RigidTransform& probe_pose,
                                const CalibrationSet& calib, const BModeOptions& opts = {}) {
  calib.validate();
  const PointCloud surface = phantom.surface_world();
  const KdTree surface_tree(surface.points);

  // Precondition: probe near the surface.
  {
    const auto [idx, dist] = surface_tree.nearest_with_dist(probe_pose.translation());
    (void)idx;
    if (dist > opts.surface_proximity_mm) {
      throw std::invalid_argument("render_bmode: probe farther than " +
                                  std::to_string(opts.surface_proximity_mm) + " mm from surface");
    }
  }

  const std::vector<Vec3> centerline = phantom.centerline_world();
  const KdTree centerline_tree(centerline);

  const int w_px = calib.image_width_px, h_px = calib.image_height_px;
  BModeResult out;
  out.image = UsImage(w_px, h_px, 0.0);
  out.vessel_mask.values = BinaryGrid(w_px, h_px, 0);
  out.column_contact.assign(static_cast<std::size_t>(w_px), 1.0);

  // Per-column contact fraction from the lift of the probe footprint.
  for (int w = 0; w < w_px; ++w) {
    const double y_mm = calib.probe_width_mm / 2.0 - calib.lateral_scale() * (w + 0.5);
    const Vec3 tip = probe_pose * Vec3(0.0, y_mm, 0.0);
    const int si = surface_tree.nearest(tip);
    const Vec3& sp = surface.points[static_cast<std::size_t>(si)];
    const Vec3& sn = surface.normals[static_cast<std::size_t>(si)];
    const double lift = (tip - sp).dot(sn);
    out.column_contact[static_cast<std::size_t>(w)] =
        std::clamp(1.0 - std::max(0.0, lift) / opts.contact_tol_mm, 0.0, 1.0);
  }

  std::mt19937_64 rng(opts.speckle_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const Mat3& r = probe_pose.rotation();
  const Vec3 col_y = r.col(1), col_z = r.col(2);
  for (int h = 0; h < h_px; ++h) {
    const double z_mm = calib.depth_scale() * (h + 0.5) + calib.element_offset_mm;
    for (int w = 0; w < w_px; ++w) {
      const double y_mm = calib.probe_width_mm / 2.0 - calib.lateral_scale() * (w + 0.5);
      const Vec3 p = probe_pose.translation() + y_mm * col_y + z_mm * col_z;
      const double d = detail::polyline_distance(centerline, centerline_tree, p);

      double intensity = opts.background * (1.0 + 0.1 * std::exp(-z_mm / 8.0));
      if (d <= phantom.params.vessel_radius_mm) {
        intensity = 0.06;
      } else if (d <= phantom.params.vessel_radius_mm + opts.rim_width_mm) {
        intensity = 0.9;
      }

      const double contact = out.column_contact[static_cast<std::size_t>(w)];
      intensity *= contact;
      if (contact < 1.0 && z_mm < 1.5) {
        // Air-interface reverberation line at the top of lifted columns.
        intensity = std::max(intensity, (1.0 - contact) * 0.95);
      }
      intensity *= 1.0 + opts.speckle_sigma * gauss(rng);
      out.image.at(h, w) = std::clamp(intensity, 0.0, 1.0);

      if (d <= phantom.params.vessel_radius_mm && contact >= 0.5) {
        out.vessel_mask.values.at(h, w) = 1;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contact surrogate

struct ContactParams {
  double desired_force_n = 2.0;
  double stiffness_n_per_m = 250.0;  // [125, 500] for human tissues
  double search_range_mm = 50.0;
  // The local surface model (nearest point + its tangent plane) is only
  // trusted within this lateral distance of the sampled surface.
  double locality_mm = 8.0;

  double penetration_mm() const { return desired_force_n / stiffness_n_per_m * 1000.0; }

  void validate() const {
    if (desired_force_n < 0.0) throw std::invalid_argument("ContactParams: force must be >= 0");
    if (stiffness_n_per_m <= 0.0) throw std::invalid_argument("ContactParams: stiffness must be > 0");
  }
};

struct ContactStep {
  RigidTransform executed_pose;
  double surface_offset_mm = 0.0;  // ray parameter of the surface crossing
  double penetration_mm = 0.0;
};

/// Translates the target pose along its probe axis Z_p until the tip sits
/// exactly F_d / k below the local surface (constant-force spring surrogate).
/// Orientation is unchanged.
inline ContactStep simulate_contact_step(const RigidTransform& target_pose, const Phantom& phantom,
                                         const ContactParams& params = {}) {
  params.validate();
  const PointCloud surface = phantom.surface_world();
  const KdTree tree(surface.points);
  const Vec3 dir = target_pose.rotation().col(2);  // Z_p, into the surface
  const Vec3 origin = target_pose.translation();

  auto height_above = [&](double t) {
    const Vec3 p = origin + t * dir;
    const int i = tree.nearest(p);
    const Vec3 d = p - surface.points[static_cast<std::size_t>(i)];
    const double h = d.dot(surface.normals[static_cast<std::size_t>(i)]);
    // Off the side of the sampled surface there is nothing to touch.
    if ((d - h * surface.normals[static_cast<std::size_t>(i)]).norm() > params.locality_mm) {
      return std::numeric_limits<double>::infinity();
    }
    return h;
  };

  const double range = params.search_range_mm;
  const double step = 1.0;
  double t_lo = -range, t_hi = t_lo;
  double h_lo = height_above(t_lo);
  bool found = false;
  for (double t = t_lo + step; t <= range + 1e-9; t += step) {
    const double h = height_above(t);
    if (h_lo > 0.0 && h <= 0.0) {
      t_hi = t;
      found = true;
      break;
    }
    t_lo = t;
    h_lo = h;
  }
  if (!found) {
    throw ContactLostError("simulate_contact_step: no surface crossing within range");
  }
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (t_lo + t_hi);
    if (height_above(mid) > 0.0) {
      t_lo = mid;
    } else {
      t_hi = mid;
    }
  }
  const double t_surface = 0.5 * (t_lo + t_hi);
  const double delta = params.penetration_mm();
  ContactStep out;
  out.surface_offset_mm = t_surface;
  out.penetration_mm = delta;
  out.executed_pose =
      RigidTransform(target_pose.rotation(), origin + (t_surface + delta) * dir);
  return out;
}

// ---------------------------------------------------------------------------
// Scripted motion

/// Simulated ArUco marker rigidly attached to the table/phantom assembly.
struct Fiducial {
  Vec3 position = Vec3::Zero();
};

/// One scripted rigid in-plane move: rotation about +Z through a pivot,
/// followed by a table-plane translation.
struct MotionScriptEvent {
  int trigger_waypoint = 0;
  double rot_z_deg = 0.0;
  Vec3 pivot = Vec3::Zero();
  Vec3 translation = Vec3::Zero();

  RigidTransform transform() const {
    const Mat3 r = geom::rot_z(geom::deg2rad(rot_z_deg));
    return RigidTransform(r, pivot - r * pivot + translation);
  }
};

struct MotionScript {
  std::vector<MotionScriptEvent> events;
  double max_translation_mm = 140.0;
  double max_rotation_deg = 80.0;

  void validate() const {
    for (const MotionScriptEvent& e : events) {
      if (std::abs(e.translation.x()) > max_translation_mm ||
          std::abs(e.translation.y()) > max_translation_mm) {
        throw std::invalid_argument("MotionScript: in-plane translation exceeds bound");
      }
      if (std::abs(e.translation.z()) > 1e-6) {
        throw std::invalid_argument("MotionScript: motion must stay in the table plane");
      }
      if (std::abs(e.rot_z_deg) > max_rotation_deg) {
        throw std::invalid_argument("MotionScript: rotation exceeds bound");
      }
    }
  }

  std::vector<const MotionScriptEvent*> events_at(int waypoint) const {
    std::vector<const MotionScriptEvent*> out;
    for (const MotionScriptEvent& e : events) {
      if (e.trigger_waypoint == waypoint) out.push_back(&e);
    }
    return out;
  }
};

/// Composes the scripted transform into the phantom pose and the fiducial
/// position atomically; returns the applied world-frame transform so oracles
/// can use the ground truth.
inline RigidTransform apply_motion_script(Phantom& phantom, Fiducial& fiducial,
                                          const MotionScriptEvent& event) {
  const RigidTransform t = event.transform();
  phantom.pose = t * phantom.pose;
  fiducial.position = t * fiducial.position;
  return t;
}

/// Uniform random in-plane motion inside a rectangle with bounded rotation
/// (the desk-scale analog of moving the phantom + table by hand).
inline MotionScriptEvent random_motion_event(uint64_t seed, const Vec3& pivot,
                                             double rect_x_mm = 110.0, double rect_y_mm = 140.0,
                                             double max_rot_deg = 80.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  MotionScriptEvent e;
  e.pivot = pivot;
  e.translation = Vec3((u01(rng) - 0.5) * rect_x_mm, (u01(rng) - 0.5) * rect_y_mm, 0.0);
  e.rot_z_deg = (2.0 * u01(rng) - 1.0) * max_rot_deg;
  return e;
}

}  // namespace scanpilot::sim
