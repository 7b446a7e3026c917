#pragma once

// Rigid point-cloud registration: a coarse initial transform from multiscale
// normal-angle feature correspondences, refined by point-to-point ICP with
// per-iteration MSE telemetry. Used for template-to-camera registration and
// for motion compensation between camera clouds.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "scanpilot/geom.hpp"

namespace scanpilot::reg {

using geom::KdTree;
using geom::RigidTransform;

class CoarseAlignmentError : public std::runtime_error {
 public:
  explicit CoarseAlignmentError(const std::string& msg) : std::runtime_error(msg) {}
};

class RegistrationError : public std::runtime_error {
 public:
  RegistrationError(const std::string& msg, std::vector<double> partial_history)
      : std::runtime_error(msg), mse_history(std::move(partial_history)) {}
  std::vector<double> mse_history;
};

// ---------------------------------------------------------------------------
// Multiscale feature descriptors

/// 33-bin normal-angle histogram (11 bins per Darboux angle) computed over
/// neighbor pairs inside the support radius.
using Histogram = Eigen::Matrix<double, 33, 1>;

struct FeatureDescriptor {
  int point_index = -1;
  std::vector<Histogram> histograms;  // one per configured scale
};

struct MultiscaleFeatures {
  std::vector<FeatureDescriptor> descriptors;  // one per point
  std::vector<int> persistent_indices;         // distinctive at every scale
  double base_radius = 0.0;                    // mm; scales multiply this
  std::vector<double> scales;
};

struct FeatureParams {
  std::vector<double> scales{0.5, 1.0, 1.5};
  double base_radius_spacing_mult = 4.0;  // base radius = mult x median spacing
  double persistence_sigma = 1.0;         // distinctive when dist > mu + sigma*s
};

namespace detail {

inline Histogram pair_angle_histogram(const PointCloud& cloud, int idx,
                                      const std::vector<int>& neighbors) {
  Histogram h = Histogram::Zero();
  const Vec3& p = cloud.points[static_cast<std::size_t>(idx)];
  const Vec3& u = cloud.normals[static_cast<std::size_t>(idx)];
  int pairs = 0;
  for (int j : neighbors) {
    if (j == idx) continue;
    const Vec3 d = cloud.points[static_cast<std::size_t>(j)] - p;
    const double dist = d.norm();
    if (dist < 1e-12) continue;
    const Vec3 du = d / dist;
    Vec3 v = du.cross(u);
    const double vn = v.norm();
    if (vn < 1e-9) continue;
    v /= vn;
    const Vec3 w = u.cross(v);
    const Vec3& nj = cloud.normals[static_cast<std::size_t>(j)];
    const double alpha = std::clamp(v.dot(nj), -1.0, 1.0);
    const double phi = std::clamp(u.dot(du), -1.0, 1.0);
    const double theta = std::atan2(w.dot(nj), u.dot(nj));
    auto bin = [](double value, double lo, double hi) {
      int b = static_cast<int>((value - lo) / (hi - lo) * 11.0);
      return std::clamp(b, 0, 10);
    };
    h[bin(alpha, -1.0, 1.0)] += 1.0;
    h[11 + bin(phi, -1.0, 1.0)] += 1.0;
    h[22 + bin(theta, -M_PI, M_PI)] += 1.0;
    ++pairs;
  }
  if (pairs > 0) h /= static_cast<double>(pairs);
  return h;
}

}  // namespace detail

/// Computes the same histogram descriptor at each scale and flags the points
/// whose descriptors stay distinctive (farther than mu + sigma from the cloud
/// mean) across all of them.
inline MultiscaleFeatures multiscale_descriptors(const PointCloud& cloud,
                                                 const FeatureParams& params = {}) {
  cloud.require_normals("multiscale_descriptors");
  if (params.scales.empty()) {
    throw std::invalid_argument("multiscale_descriptors: scales must be non-empty");
  }
  for (double s : params.scales) {
    if (s <= 0.0) throw std::invalid_argument("multiscale_descriptors: scales must be positive");
  }

  MultiscaleFeatures out;
  out.scales = params.scales;
  out.base_radius = params.base_radius_spacing_mult * geom::median_nn_spacing(cloud);
  out.descriptors.resize(cloud.size());

  KdTree tree(cloud.points);
  const std::size_t n = cloud.size();
  std::vector<uint8_t> persistent(n, 1);
  for (std::size_t si = 0; si < params.scales.size(); ++si) {
    const double radius = params.scales[si] * out.base_radius;
    Histogram mean = Histogram::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<int> nb = tree.radius(cloud.points[i], radius);
      Histogram h = detail::pair_angle_histogram(cloud, static_cast<int>(i), nb);
      out.descriptors[i].point_index = static_cast<int>(i);
      out.descriptors[i].histograms.push_back(h);
      mean += h;
    }
    mean /= static_cast<double>(n);
    std::vector<double> dist(n);
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = (out.descriptors[i].histograms[si] - mean).norm();
      mu += dist[i];
    }
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double d : dist) var += (d - mu) * (d - mu);
    const double sigma = std::sqrt(var / static_cast<double>(n));
    const double cut = mu + params.persistence_sigma * sigma;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(dist[i] > cut)) persistent[i] = 0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (persistent[i]) out.persistent_indices.push_back(static_cast<int>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Coarse alignment

struct Correspondence {
  int source_index = -1;
  int target_index = -1;
  double descriptor_distance = 0.0;
};

struct CoarseParams {
  FeatureParams features;
  // Pairwise rigid-distance consistency threshold, as a fraction of the
  // larger cloud bounding-box diagonal.
  double distance_consistency = 0.25;
};

namespace detail {

inline Eigen::VectorXd concat_histograms(const FeatureDescriptor& d) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(d.histograms.size()) * 33);
  for (std::size_t s = 0; s < d.histograms.size(); ++s) {
    v.segment(static_cast<Eigen::Index>(s) * 33, 33) = d.histograms[s];
  }
  return v;
}

inline std::vector<Correspondence> reciprocal_matches(const PointCloud& source,
                                                      const MultiscaleFeatures& fs,
                                                      const PointCloud& target,
                                                      const MultiscaleFeatures& ft) {
  std::vector<Eigen::VectorXd> ds, dt;
  ds.reserve(fs.persistent_indices.size());
  dt.reserve(ft.persistent_indices.size());
  for (int i : fs.persistent_indices) {
    ds.push_back(concat_histograms(fs.descriptors[static_cast<std::size_t>(i)]));
  }
  for (int i : ft.persistent_indices) {
    dt.push_back(concat_histograms(ft.descriptors[static_cast<std::size_t>(i)]));
  }
  auto nearest = [](const Eigen::VectorXd& q, const std::vector<Eigen::VectorXd>& pool) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const double d = (pool[i] - q).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    return std::pair<int, double>(best, best_d);
  };
  std::vector<Correspondence> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto [j, dij] = nearest(ds[i], dt);
    if (j < 0) continue;
    auto [back, unused] = nearest(dt[static_cast<std::size_t>(j)], ds);
    (void)unused;
    if (back == static_cast<int>(i)) {
      out.push_back({fs.persistent_indices[i],
                     ft.persistent_indices[static_cast<std::size_t>(j)], std::sqrt(dij)});
    }
  }
  return out;
}

}  // namespace detail

/// Initial transform from persistent-feature correspondences filtered by
/// pairwise rigid-distance consistency. Throws CoarseAlignmentError when
/// fewer than 3 correspondences survive; callers may fall back to identity.
inline RigidTransform coarse_align(const PointCloud& source, const PointCloud& target,
                                   const CoarseParams& params = {}) {
  source.require_normals("coarse_align");
  target.require_normals("coarse_align");
  if (source.size() < 50 || target.size() < 50) {
    throw std::invalid_argument("coarse_align: need at least 50 points per cloud");
  }

  const MultiscaleFeatures fs = multiscale_descriptors(source, params.features);
  const MultiscaleFeatures ft = multiscale_descriptors(target, params.features);
  std::vector<Correspondence> matches = detail::reciprocal_matches(source, fs, target, ft);
  if (matches.size() < 3) {
    throw CoarseAlignmentError("coarse_align: fewer than 3 reciprocal correspondences");
  }

  const double tau =
      params.distance_consistency * std::max(source.bbox_diagonal(), target.bbox_diagonal());
  const std::size_t m = matches.size();
  auto consistent = [&](std::size_t i, std::size_t j) {
    const double ds = (source.points[static_cast<std::size_t>(matches[i].source_index)] -
                       source.points[static_cast<std::size_t>(matches[j].source_index)])
                          .norm();
    const double dt = (target.points[static_cast<std::size_t>(matches[i].target_index)] -
                       target.points[static_cast<std::size_t>(matches[j].target_index)])
                          .norm();
    return std::abs(ds - dt) <= tau;
  };
  std::vector<int> degree(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      if (consistent(i, j)) {
        ++degree[i];
        ++degree[j];
      }
    }
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return degree[a] > degree[b] || (degree[a] == degree[b] && a < b);
  });
  std::vector<std::size_t> kept;
  for (std::size_t cand : order) {
    bool ok = true;
    for (std::size_t s : kept) {
      if (!consistent(cand, s)) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(cand);
  }
  if (kept.size() < 3) {
    throw CoarseAlignmentError("coarse_align: fewer than 3 consistent correspondences");
  }

  auto fit_from = [&](const std::vector<std::size_t>& sel) {
    std::vector<Vec3> src, dst;
    src.reserve(sel.size());
    dst.reserve(sel.size());
    for (std::size_t s : sel) {
      src.push_back(source.points[static_cast<std::size_t>(matches[s].source_index)]);
      dst.push_back(target.points[static_cast<std::size_t>(matches[s].target_index)]);
    }
    return geom::fit_rigid_least_squares(src, dst);
  };
  RigidTransform t = fit_from(kept);

  // One residual-trim pass to shed stragglers that slipped the pair filter.
  std::vector<double> residuals;
  residuals.reserve(kept.size());
  for (std::size_t s : kept) {
    residuals.push_back((t * source.points[static_cast<std::size_t>(matches[s].source_index)] -
                         target.points[static_cast<std::size_t>(matches[s].target_index)])
                            .norm());
  }
  std::vector<double> sorted = residuals;
  const std::size_t mid = sorted.size() / 2;
  std::nth_element(sorted.begin(), sorted.begin() + mid, sorted.end());
  const double cut = std::max(3.0 * sorted[mid], 1e-9);
  std::vector<std::size_t> trimmed;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (residuals[i] <= cut) trimmed.push_back(kept[i]);
  }
  if (trimmed.size() >= 3 && trimmed.size() < kept.size()) t = fit_from(trimmed);
  return t;
}

// ---------------------------------------------------------------------------
// ICP refinement

struct IcpParams {
  int max_iterations = 200;
  double mse_delta_tolerance = 1e-4;  // mm, on the RMS value
  // Correspondence rejection distance in mm. A positive value is used as a
  // fixed threshold. 0 selects the robust schedule: each iteration rejects
  // beyond max(2.5 x target median spacing, 5 x median residual), so a bad
  // init keeps everything while partial-overlap outliers are shed as soon as
  // the inlier majority aligns.
  double rejection_distance = 0.0;

  void validate() const {
    if (max_iterations <= 0 || mse_delta_tolerance <= 0.0 || rejection_distance < 0.0) {
      throw std::invalid_argument("IcpParams: values must be positive");
    }
  }
};

struct RegistrationResult {
  RigidTransform transform;        // maps source into target coordinates
  std::vector<double> mse_history; // RMS mm per iteration, non-increasing
  int iterations = 0;
  bool converged = false;
};

/// Alternates nearest-neighbor correspondence and closed-form rigid fit until
/// the MSE change drops below tolerance. The recorded history is kept
/// non-increasing: a step that would raise the MSE is never applied.
inline RegistrationResult icp_refine(const PointCloud& source, const PointCloud& target,
                                     const RigidTransform& init, const IcpParams& params = {}) {
  params.validate();
  if (source.empty() || target.empty()) {
    throw std::invalid_argument("icp_refine: clouds must be non-empty");
  }
  const bool fixed_reject = params.rejection_distance > 0.0;
  const double floor_reject =
      fixed_reject ? params.rejection_distance
                   : (target.size() >= 2 ? 2.5 * geom::median_nn_spacing(target)
                                         : std::numeric_limits<double>::infinity());

  KdTree tree(target.points);
  struct Snapshot {
    std::vector<std::pair<int, int>> corr;
    double mse = 0.0;
  };
  auto correspond = [&](const RigidTransform& t) {
    std::vector<std::pair<int, double>> nn(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
      nn[i] = tree.nearest_with_dist(t * source.points[i]);
    }
    double reject = floor_reject;
    if (!fixed_reject) {
      std::vector<double> d(source.size());
      for (std::size_t i = 0; i < source.size(); ++i) d[i] = nn[i].second;
      const std::size_t mid = d.size() / 2;
      std::nth_element(d.begin(), d.begin() + mid, d.end());
      reject = std::max(floor_reject, 5.0 * d[mid]);
    }
    Snapshot s;
    double acc = 0.0;
    for (std::size_t i = 0; i < source.size(); ++i) {
      if (nn[i].second <= reject) {
        s.corr.emplace_back(static_cast<int>(i), nn[i].first);
        acc += nn[i].second * nn[i].second;
      }
    }
    if (!s.corr.empty()) s.mse = std::sqrt(acc / static_cast<double>(s.corr.size()));
    return s;
  };

  RegistrationResult result;
  result.transform = init;
  Snapshot snap = correspond(init);
  if (snap.corr.empty()) {
    throw RegistrationError("icp_refine: all correspondences rejected at init", {});
  }
  result.mse_history.push_back(snap.mse);

  for (int iter = 1; iter <= params.max_iterations; ++iter) {
    std::vector<Vec3> src, dst;
    src.reserve(snap.corr.size());
    dst.reserve(snap.corr.size());
    for (auto [i, j] : snap.corr) {
      src.push_back(source.points[static_cast<std::size_t>(i)]);
      dst.push_back(target.points[static_cast<std::size_t>(j)]);
    }
    RigidTransform candidate;
    try {
      candidate = geom::fit_rigid_least_squares(src, dst);
    } catch (const std::invalid_argument& e) {
      throw RegistrationError(std::string("icp_refine: ") + e.what(), result.mse_history);
    }
    const double prev = result.mse_history.back();
    Snapshot next = correspond(candidate);
    if (next.corr.empty()) {
      throw RegistrationError("icp_refine: all correspondences rejected", result.mse_history);
    }
    if (next.mse > prev + 1e-12) {
      // No improving step exists: a fixed point of the alternating scheme.
      // The candidate is rejected so the history never records an increase.
      result.converged = true;
      break;
    }
    result.transform = candidate;
    snap = std::move(next);
    result.mse_history.push_back(snap.mse);
    result.iterations = iter;
    if (prev - snap.mse < params.mse_delta_tolerance) {
      result.converged = true;
      break;
    }
  }
  return result;
}

/// Full pipeline: multiscale coarse alignment (falling back to identity when
/// it fails) followed by ICP refinement.
inline RegistrationResult register_clouds(const PointCloud& source, const PointCloud& target,
                                          const CoarseParams& coarse = {},
                                          const IcpParams& icp = {}) {
  RigidTransform init;
  try {
    init = coarse_align(source, target, coarse);
  } catch (const CoarseAlignmentError&) {
    init = RigidTransform::identity();
  }
  return icp_refine(source, target, init, icp);
}

}  // namespace scanpilot::reg
