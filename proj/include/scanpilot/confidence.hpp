#pragma once

// Random-walk ultrasound confidence maps and the in-plane probe orientation
// correction derived from them. The map is the equilibrium of a random walk
// on the 8-connected pixel graph with Dirichlet boundaries (transducer row
// fixed to 1, bottom row to 0) and depth-attenuated intensity edge weights.
// The weighted barycenter of the binarized map yields the correction angle
// theta_c, which is spread over the next N_up waypoints with decaying
// weights.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "scanpilot/geom.hpp"
#include "scanpilot/grid.hpp"
#include "scanpilot/log.hpp"
#include "scanpilot/planner.hpp"

namespace scanpilot::confidence {

using planner::CalibrationSet;
using planner::Trajectory;

class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& msg, double residual)
      : std::runtime_error(msg + " (residual " + std::to_string(residual) + ")"),
        residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

class NoSignalError : public std::runtime_error {
 public:
  explicit NoSignalError(const std::string& msg) : std::runtime_error(msg) {}
};

class UndefinedAngleError : public std::runtime_error {
 public:
  explicit UndefinedAngleError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfidenceParams {
  double alpha = 2.0;   // depth attenuation exponent
  double beta = 90.0;   // intensity-difference sensitivity
  double gamma = 0.05;  // horizontal walk penalty
  int downsample = 4;   // solve at 1/downsample per axis, bilinear upsample

  void validate() const {
    if (alpha <= 0.0 || beta <= 0.0 || gamma <= 0.0) {
      throw std::invalid_argument("ConfidenceParams: alpha, beta, gamma must be > 0");
    }
    if (downsample < 1) throw std::invalid_argument("ConfidenceParams: downsample must be >= 1");
  }
};

namespace detail {

inline Grid<double> block_mean_downsample(const UsImage& img, int f) {
  if (f == 1) return img;
  const int w = (img.width + f - 1) / f;
  const int h = (img.height + f - 1) / f;
  Grid<double> out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      int cnt = 0;
      for (int dy = 0; dy < f; ++dy) {
        for (int dx = 0; dx < f; ++dx) {
          const int sy = y * f + dy, sx = x * f + dx;
          if (sy < img.height && sx < img.width) {
            acc += img.at(sy, sx);
            ++cnt;
          }
        }
      }
      out.at(y, x) = acc / cnt;
    }
  }
  return out;
}

inline Grid<double> bilinear_upsample(const Grid<double>& coarse, int width, int height) {
  Grid<double> out(width, height);
  const double sx = static_cast<double>(coarse.width) / width;
  const double sy = static_cast<double>(coarse.height) / height;
  for (int y = 0; y < height; ++y) {
    double cy = (y + 0.5) * sy - 0.5;
    cy = std::clamp(cy, 0.0, static_cast<double>(coarse.height - 1));
    const int y0 = static_cast<int>(cy);
    const int y1 = std::min(y0 + 1, coarse.height - 1);
    const double fy = cy - y0;
    for (int x = 0; x < width; ++x) {
      double cx = (x + 0.5) * sx - 0.5;
      cx = std::clamp(cx, 0.0, static_cast<double>(coarse.width - 1));
      const int x0 = static_cast<int>(cx);
      const int x1 = std::min(x0 + 1, coarse.width - 1);
      const double fx = cx - x0;
      out.at(y, x) = (1 - fy) * ((1 - fx) * coarse.at(y0, x0) + fx * coarse.at(y0, x1)) +
                     fy * ((1 - fx) * coarse.at(y1, x0) + fx * coarse.at(y1, x1));
    }
  }
  return out;
}

/// Dirichlet solve on the 8-connected grid graph at the given resolution.
inline Grid<double> solve_random_walk(const Grid<double>& img, const ConfidenceParams& params) {
  const int w = img.width, h = img.height;
  if (h < 3) throw std::invalid_argument("confidence_map: image too short for interior rows");

  // Depth-attenuated intensities g = I * exp(-alpha * normalized depth).
  Grid<double> g(w, h);
  for (int y = 0; y < h; ++y) {
    const double depth = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
    const double att = std::exp(-params.alpha * depth);
    for (int x = 0; x < w; ++x) g.at(y, x) = img.at(y, x) * att;
  }

  // Unknowns are the interior rows; the top row is clamped to 1, bottom to 0.
  const int interior_rows = h - 2;
  const int n = interior_rows * w;
  auto unknown_id = [&](int y, int x) { return (y - 1) * w + x; };

  const double eps = 1e-6;
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(n) * 9);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  std::vector<double> diag(static_cast<std::size_t>(n), 0.0);

  static const int dx8[] = {1, -1, 0, 0, 1, 1, -1, -1};
  static const int dy8[] = {0, 0, 1, -1, 1, -1, 1, -1};
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 0; x < w; ++x) {
      const int id = unknown_id(y, x);
      for (int k = 0; k < 8; ++k) {
        const int ny = y + dy8[k], nx = x + dx8[k];
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const double grad = std::abs(g.at(y, x) - g.at(ny, nx));
        double penalty = 0.0;
        if (dy8[k] == 0) {
          penalty = params.gamma;  // horizontal walk
        } else if (dx8[k] != 0) {
          penalty = std::sqrt(2.0) * params.gamma;  // diagonal walk
        }
        const double weight = std::exp(-params.beta * (grad + penalty)) + eps;
        diag[static_cast<std::size_t>(id)] += weight;
        if (ny == 0) {
          rhs[id] += weight * 1.0;  // transducer boundary, value 1
        } else if (ny == h - 1) {
          // bottom boundary, value 0: no rhs contribution
        } else {
          triplets.emplace_back(id, unknown_id(ny, nx), -weight);
        }
      }
    }
  }
  for (int id = 0; id < n; ++id) {
    triplets.emplace_back(id, id, diag[static_cast<std::size_t>(id)]);
  }

  Eigen::SparseMatrix<double> laplacian(n, n);
  laplacian.setFromTriplets(triplets.begin(), triplets.end());
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
  solver.compute(laplacian);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("confidence_map: sparse factorization failed",
                         std::numeric_limits<double>::quiet_NaN());
  }
  const Eigen::VectorXd sol = solver.solve(rhs);
  const double residual = (laplacian * sol - rhs).norm() / std::max(1.0, rhs.norm());
  if (solver.info() != Eigen::Success || !(residual < 1e-6)) {
    throw NumericalError("confidence_map: sparse solve did not converge", residual);
  }

  Grid<double> out(w, h);
  for (int x = 0; x < w; ++x) {
    out.at(0, x) = 1.0;
    out.at(h - 1, x) = 0.0;
  }
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 0; x < w; ++x) {
      out.at(y, x) = std::clamp(sol[unknown_id(y, x)], 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace detail

/// Solves the random-walk equilibrium for the image, optionally on a
/// downsampled grid with bilinear upsampling back to full resolution. The
/// result keeps the top row exactly 1 and the bottom row exactly 0.
inline ConfidenceGrid confidence_map(const UsImage& img, const ConfidenceParams& params = {}) {
  params.validate();
  if (img.empty()) throw std::invalid_argument("confidence_map: empty image");
  Grid<double> coarse = detail::block_mean_downsample(img, params.downsample);
  Grid<double> solved = detail::solve_random_walk(coarse, params);
  Grid<double> full = params.downsample == 1
                          ? solved
                          : detail::bilinear_upsample(solved, img.width, img.height);
  for (int x = 0; x < full.width; ++x) {
    full.at(0, x) = 1.0;
    full.at(full.height - 1, x) = 0.0;
  }
  for (double& v : full.data) v = std::clamp(v, 0.0, 1.0);
  return full;
}

inline ConfidenceGrid confidence_map(const UsImage& img, double alpha, double beta, double gamma) {
  ConfidenceParams p;
  p.alpha = alpha;
  p.beta = beta;
  p.gamma = gamma;
  return confidence_map(img, p);
}

/// 1 where C >= T_com, else 0.
inline BinaryGrid binarize_map(const ConfidenceGrid& map, double t_com) {
  if (!(t_com > 0.0 && t_com < 1.0)) {
    throw std::invalid_argument("binarize_map: T_com must be in (0, 1)");
  }
  BinaryGrid out(map.width, map.height);
  for (std::size_t i = 0; i < map.data.size(); ++i) out.data[i] = map.data[i] >= t_com ? 1 : 0;
  return out;
}

/// Pixel-index coordinates (h, w) of a barycenter or mask centroid.
struct Barycenter {
  double h = 0.0;
  double w = 0.0;
};

/// Confidence-weighted barycenter over the grid; on a binary map this is the
/// mean index of the retained pixels.
inline Barycenter weighted_barycenter(const BinaryGrid& binary) {
  double mass = 0.0, mh = 0.0, mw = 0.0;
  for (int y = 0; y < binary.height; ++y) {
    for (int x = 0; x < binary.width; ++x) {
      if (binary.at(y, x)) {
        mass += 1.0;
        mh += y;
        mw += x;
      }
    }
  }
  if (mass <= 0.0) {
    throw NoSignalError("weighted_barycenter: all-zero grid (total contact loss)");
  }
  return {mh / mass, mw / mass};
}

/// In-plane correction angle in degrees: the physical-space angle between the
/// ray to the barycenter and the vertical image centerline. Positive when the
/// barycenter lies on the +Y_p side of the probe (left image half), so that
/// post-multiplying the probe orientation by R_x(-theta_c) re-seats it toward
/// the contacted side.
inline double correction_angle(const Barycenter& zeta, const CalibrationSet& calib) {
  calib.validate();
  if (zeta.h < 0.0 || zeta.h > calib.image_height_px - 1 || zeta.w < 0.0 ||
      zeta.w > calib.image_width_px - 1) {
    throw std::invalid_argument("correction_angle: barycenter outside grid");
  }
  if (zeta.h == 0.0) {
    throw UndefinedAngleError("correction_angle: barycenter on the transducer row");
  }
  const double lateral_mm =
      calib.probe_width_mm / 2.0 - calib.lateral_scale() * (zeta.w + 0.5);
  const double depth_mm = calib.depth_scale() * zeta.h;
  return geom::rad2deg(std::atan2(lateral_mm, depth_mm));
}

struct CorrectionResult {
  Barycenter barycenter;
  double theta_c_deg = 0.0;
  bool shadow_detected = false;
};

struct ShadowPolicy {
  double min_angle_deg = 2.0;      // engage only for a clear asymmetry
  double min_dark_fraction = 0.1;  // and a meaningful below-threshold area
};

/// Binarize, locate the barycenter and decide whether the frame shows a
/// one-sided contact shadow worth correcting.
inline CorrectionResult evaluate_correction(const ConfidenceGrid& map, double t_com,
                                            const CalibrationSet& calib,
                                            const ShadowPolicy& policy = {}) {
  const BinaryGrid binary = binarize_map(map, t_com);
  CorrectionResult out;
  out.barycenter = weighted_barycenter(binary);
  out.theta_c_deg = correction_angle(out.barycenter, calib);
  std::size_t dark = 0;
  for (uint8_t v : binary.data) {
    if (!v) ++dark;
  }
  const double dark_fraction = static_cast<double>(dark) / static_cast<double>(binary.size());
  out.shadow_detected = std::abs(out.theta_c_deg) > policy.min_angle_deg &&
                        dark_fraction > policy.min_dark_fraction;
  return out;
}

/// Rotates the current waypoint in-plane by the full -theta_c about X_p and
/// the next N_up waypoints by decaying fractions eta_i = d^2_{N_up-i+1} /
/// sum_j d^2_j, where d_j is the arc length from the current waypoint to
/// waypoint i_c + j. Positions are untouched.
inline Trajectory update_lookahead(const Trajectory& traj, std::size_t i_c, double theta_c_deg,
                                   int n_up) {
  if (i_c >= traj.waypoints.size()) {
    throw std::invalid_argument("update_lookahead: current index out of range");
  }
  if (n_up < 1) throw std::invalid_argument("update_lookahead: N_up must be >= 1");
  const int remaining = static_cast<int>(traj.waypoints.size()) - 1 - static_cast<int>(i_c);
  if (n_up > remaining) {
    log::warn("update_lookahead: N_up exceeds remaining waypoints, clamping to " +
              std::to_string(remaining));
    n_up = remaining;
  }

  Trajectory out = traj;
  const double theta = geom::deg2rad(theta_c_deg);
  auto rotate_about_probe_x = [](Mat3& orientation, double angle) {
    orientation = geom::project_to_rotation(orientation * geom::rot_x(angle));
  };
  rotate_about_probe_x(out.waypoints[i_c].orientation, -theta);
  if (n_up <= 0) return out;

  std::vector<double> d(static_cast<std::size_t>(n_up) + 1, 0.0);
  for (int j = 1; j <= n_up; ++j) {
    d[static_cast<std::size_t>(j)] =
        d[static_cast<std::size_t>(j) - 1] +
        (traj.waypoints[i_c + static_cast<std::size_t>(j)].position -
         traj.waypoints[i_c + static_cast<std::size_t>(j) - 1].position)
            .norm();
  }
  double denom = 0.0;
  for (int j = 1; j <= n_up; ++j) denom += d[static_cast<std::size_t>(j)] * d[static_cast<std::size_t>(j)];
  if (denom <= 0.0) throw std::invalid_argument("update_lookahead: arc distances must be > 0");
  for (int i = 1; i <= n_up; ++i) {
    const double di = d[static_cast<std::size_t>(n_up - i + 1)];
    const double eta = di * di / denom;
    rotate_about_probe_x(out.waypoints[i_c + static_cast<std::size_t>(i)].orientation,
                         -eta * theta);
  }
  return out;
}

/// Eq. 5 weights alone, exposed for the weight-identity checks.
inline std::vector<double> lookahead_weights(const std::vector<double>& arc_lengths) {
  double denom = 0.0;
  for (double d : arc_lengths) {
    if (d <= 0.0) throw std::invalid_argument("lookahead_weights: arc distances must be > 0");
    denom += d * d;
  }
  const int n = static_cast<int>(arc_lengths.size());
  std::vector<double> eta(arc_lengths.size());
  for (int i = 1; i <= n; ++i) {
    const double d = arc_lengths[static_cast<std::size_t>(n - i)];
    eta[static_cast<std::size_t>(i - 1)] = d * d / denom;
  }
  return eta;
}

}  // namespace scanpilot::confidence
