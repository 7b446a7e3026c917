#pragma once

// Core 3D value types and geometric primitives shared by every other
// module: rigid transforms on SE(3), point clouds with optional normals,
// exact nearest-neighbor search, PCA, normal estimation and Poisson disc
// subsampling. All distances are millimeters.

#include <Eigen/Core>
#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace scanpilot {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

namespace geom {

inline constexpr double kRotationTol = 1e-9;

inline double deg2rad(double deg) { return deg * M_PI / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / M_PI; }

/// Nearest rotation matrix in Frobenius norm (polar projection via SVD).
inline Mat3 project_to_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return r;
}

inline Mat3 rot_x(double rad) {
  Mat3 r;
  r << 1, 0, 0, 0, std::cos(rad), -std::sin(rad), 0, std::sin(rad), std::cos(rad);
  return r;
}

inline Mat3 rot_y(double rad) {
  Mat3 r;
  r << std::cos(rad), 0, std::sin(rad), 0, 1, 0, -std::sin(rad), 0, std::cos(rad);
  return r;
}

inline Mat3 rot_z(double rad) {
  Mat3 r;
  r << std::cos(rad), -std::sin(rad), 0, std::sin(rad), std::cos(rad), 0, 0, 0, 1;
  return r;
}

/// Element of SE(3): orthonormal rotation (det +1) plus translation in mm.
/// Invariants are checked at every construction; composition re-projects the
/// rotation so long chains stay orthonormal.
class RigidTransform {
 public:
  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho <= kRotationTol)) {
      throw std::invalid_argument("RigidTransform: rotation not orthonormal (drift " +
                                  std::to_string(ortho) + ")");
    }
    if (std::abs(rotation.determinant() - 1.0) > kRotationTol) {
      throw std::invalid_argument("RigidTransform: rotation determinant != +1");
    }
    if (!translation.allFinite()) {
      throw std::invalid_argument("RigidTransform: non-finite translation");
    }
  }

  static RigidTransform identity() { return RigidTransform(); }

  /// Builds from a possibly drifted matrix by projecting to the nearest rotation.
  static RigidTransform from_parts_projected(const Mat3& rotation, const Vec3& translation) {
    return RigidTransform(project_to_rotation(rotation), translation);
  }

  static RigidTransform translation_only(const Vec3& t) {
    return RigidTransform(Mat3::Identity(), t);
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  Vec3 operator*(const Vec3& p) const { return apply(p); }

  RigidTransform compose(const RigidTransform& rhs) const {
    Mat3 r = rotation_ * rhs.rotation_;
    const double drift = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (drift > 1e-12) r = project_to_rotation(r);
    return RigidTransform(r, rotation_ * rhs.translation_ + translation_);
  }
  RigidTransform operator*(const RigidTransform& rhs) const { return compose(rhs); }

  RigidTransform inverse() const {
    Mat3 rt = rotation_.transpose();
    return RigidTransform(rt, -(rt * translation_));
  }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation_;
    m.topRightCorner<3, 1>() = translation_;
    return m;
  }

  bool is_approx(const RigidTransform& other, double tol) const {
    return (rotation_ - other.rotation_).cwiseAbs().maxCoeff() <= tol &&
           (translation_ - other.translation_).cwiseAbs().maxCoeff() <= tol;
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

/// Geodesic rotation distance in degrees.
inline double rotation_angle_deg(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return rad2deg(std::acos(c));
}

/// Ordered set of 3D points (mm) with optional per-point unit normals.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // empty, or one unit normal per point

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }

  void require_normals(const char* who) const {
    if (normals.size() != points.size()) {
      throw std::invalid_argument(std::string(who) + ": cloud has no normals");
    }
  }

  PointCloud transformed(const RigidTransform& t) const {
    PointCloud out;
    out.points.reserve(points.size());
    for (const Vec3& p : points) out.points.push_back(t * p);
    out.normals.reserve(normals.size());
    for (const Vec3& n : normals) out.normals.push_back(t.rotation() * n);
    return out;
  }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const Vec3& p : points) c += p;
    return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
  }

  std::pair<Vec3, Vec3> bounding_box() const {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (const Vec3& p : points) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    return {lo, hi};
  }

  double bbox_diagonal() const {
    if (points.empty()) return 0.0;
    auto [lo, hi] = bounding_box();
    return (hi - lo).norm();
  }
};

/// Orthonormal axes of a cloud ordered by descending variance.
struct PrincipalAxes {
  std::array<Vec3, 3> axes;
  Vec3 eigenvalues;  // mm^2, sorted descending, non-negative
  Vec3 mean;
};

namespace detail {

struct DistIdx {
  double d2;
  int idx;
  bool operator<(const DistIdx& o) const {
    return d2 < o.d2 || (d2 == o.d2 && idx < o.idx);
  }
};

}  // namespace detail

/// Exact k-d tree over a point set. Queries are bit-identical to exhaustive
/// search: candidates are ordered by (distance, index) and subtrees are only
/// pruned when strictly farther than the current k-th best.
class KdTree {
 public:
  KdTree() = default;

  explicit KdTree(const std::vector<Vec3>& pts) : pts_(&pts) {
    order_.resize(pts.size());
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(pts.size() * 2 / kLeafSize + 4);
    if (!pts.empty()) root_ = build(0, static_cast<int>(pts.size()));
  }

  std::size_t size() const { return pts_ ? pts_->size() : 0; }

  /// Indices of the k nearest points, ascending by (distance, index).
  std::vector<int> knn(const Vec3& q, int k) const {
    if (!pts_ || k < 1 || static_cast<std::size_t>(k) > pts_->size()) {
      throw std::invalid_argument("KdTree::knn: k out of range");
    }
    std::vector<detail::DistIdx> heap;  // max-heap, worst candidate on top
    heap.reserve(static_cast<std::size_t>(k) + 1);
    search(root_, q, k, heap);
    std::sort_heap(heap.begin(), heap.end());
    std::vector<int> out(heap.size());
    for (std::size_t i = 0; i < heap.size(); ++i) out[i] = heap[i].idx;
    return out;
  }

  int nearest(const Vec3& q) const { return knn(q, 1)[0]; }

  std::pair<int, double> nearest_with_dist(const Vec3& q) const {
    const int i = nearest(q);
    return {i, ((*pts_)[i] - q).norm()};
  }

  /// All indices within radius r, ascending by (distance, index).
  std::vector<int> radius(const Vec3& q, double r) const {
    std::vector<detail::DistIdx> found;
    if (pts_ && !pts_->empty()) radius_search(root_, q, r * r, found);
    std::sort(found.begin(), found.end());
    std::vector<int> out(found.size());
    for (std::size_t i = 0; i < found.size(); ++i) out[i] = found[i].idx;
    return out;
  }

 private:
  static constexpr int kLeafSize = 12;

  struct Node {
    double split = 0.0;
    int axis = -1;  // -1 marks a leaf
    int left = -1, right = -1;
    int begin = 0, end = 0;
  };

  int build(int begin, int end) {
    Node node;
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (int i = begin; i < end; ++i) {
      const Vec3& p = (*pts_)[order_[i]];
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                       const double ca = (*pts_)[a][axis], cb = (*pts_)[b][axis];
                       return ca < cb || (ca == cb && a < b);
                     });
    node.axis = axis;
    node.split = (*pts_)[order_[mid]][axis];
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[self].left = l;
    nodes_[self].right = r;
    return self;
  }

  void consider(const Vec3& q, int idx, int k, std::vector<detail::DistIdx>& heap) const {
    detail::DistIdx c{((*pts_)[idx] - q).squaredNorm(), idx};
    if (static_cast<int>(heap.size()) < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end());
    } else if (c < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  void search(int ni, const Vec3& q, int k, std::vector<detail::DistIdx>& heap) const {
    const Node& node = nodes_[ni];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) consider(q, order_[i], k, heap);
      return;
    }
    const double delta = q[node.axis] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    search(near, q, k, heap);
    // Visit the far side unless strictly farther than the current worst.
    if (static_cast<int>(heap.size()) < k || delta * delta <= heap.front().d2) {
      search(far, q, k, heap);
    }
  }

  void radius_search(int ni, const Vec3& q, double r2, std::vector<detail::DistIdx>& found) const {
    const Node& node = nodes_[ni];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[i];
        const double d2 = ((*pts_)[idx] - q).squaredNorm();
        if (d2 <= r2) found.push_back({d2, idx});
      }
      return;
    }
    const double delta = q[node.axis] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    radius_search(near, q, r2, found);
    if (delta * delta <= r2) radius_search(far, q, r2, found);
  }

  const std::vector<Vec3>* pts_ = nullptr;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// k indices with smallest Euclidean distance to the query, ascending by
/// distance with ties broken by lower index (exhaustive semantics).
inline std::vector<int> knn_search(const PointCloud& cloud, const Vec3& query, int k) {
  if (cloud.empty() || k < 1 || static_cast<std::size_t>(k) > cloud.size()) {
    throw std::invalid_argument("knn_search: k out of range or empty cloud");
  }
  std::vector<detail::DistIdx> all(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    all[i] = {(cloud.points[i] - query).squaredNorm(), static_cast<int>(i)};
  }
  const auto kth = all.begin() + k;
  std::nth_element(all.begin(), kth - 1, all.end());
  std::sort(all.begin(), kth);
  std::vector<int> out(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = all[static_cast<std::size_t>(i)].idx;
  return out;
}

struct NormalEstimate {
  PointCloud cloud;             // input points plus estimated unit normals
  std::vector<uint8_t> valid;   // 0 where the neighborhood was degenerate
  int invalid_count = 0;
};

/// Per-point normals as the smallest-eigenvalue eigenvector of the
/// k-neighborhood covariance, oriented toward the viewpoint. Collinear
/// neighborhoods are flagged instead of producing garbage.
inline NormalEstimate estimate_normals(const PointCloud& cloud, int k, const Vec3& viewpoint) {
  if (k < 3 || cloud.size() < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("estimate_normals: need |cloud| >= k >= 3");
  }
  NormalEstimate out;
  out.cloud.points = cloud.points;
  out.cloud.normals.assign(cloud.size(), Vec3::UnitZ());
  out.valid.assign(cloud.size(), 1);

  KdTree tree(cloud.points);
  Eigen::SelfAdjointEigenSolver<Mat3> eig;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const std::vector<int> nb = tree.knn(cloud.points[i], k);
    Vec3 mean = Vec3::Zero();
    for (int j : nb) mean += cloud.points[j];
    mean /= static_cast<double>(nb.size());
    Mat3 cov = Mat3::Zero();
    for (int j : nb) {
      const Vec3 d = cloud.points[j] - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(nb.size());
    eig.computeDirect(cov);
    const Vec3 ev = eig.eigenvalues();  // ascending
    if (ev[2] <= 0.0 || ev[1] <= 1e-9 * ev[2]) {
      out.valid[i] = 0;
      ++out.invalid_count;
      continue;
    }
    Vec3 n = eig.eigenvectors().col(0);
    if (n.dot(viewpoint - cloud.points[i]) < 0.0) n = -n;
    out.cloud.normals[i] = n.normalized();
  }
  return out;
}

/// Covariance eigen-decomposition of the centered cloud, descending.
inline PrincipalAxes principal_axes(const PointCloud& cloud) {
  if (cloud.size() < 2) {
    throw std::invalid_argument("principal_axes: need at least 2 points");
  }
  Vec3 mean = cloud.centroid();
  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : cloud.points) {
    const Vec3 d = p - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(cloud.size());
  if (cov.cwiseAbs().maxCoeff() <= 0.0) {
    throw std::invalid_argument("principal_axes: degenerate input (all points identical)");
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig;
  eig.computeDirect(cov);
  PrincipalAxes out;
  out.mean = mean;
  for (int i = 0; i < 3; ++i) {
    out.eigenvalues[i] = std::max(0.0, eig.eigenvalues()[2 - i]);
    Vec3 a = eig.eigenvectors().col(2 - i);
    // Deterministic sign: largest-magnitude component positive.
    int c = 0;
    a.cwiseAbs().maxCoeff(&c);
    if (a[c] < 0.0) a = -a;
    out.axes[static_cast<std::size_t>(i)] = a;
  }
  return out;
}

namespace detail {

struct CellKey {
  int64_t x, y, z;
  bool operator==(const CellKey&) const = default;
};

struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    uint64_t h = 1469598103934665603ull;
    for (uint64_t v : {static_cast<uint64_t>(k.x), static_cast<uint64_t>(k.y),
                       static_cast<uint64_t>(k.z)}) {
      h = (h ^ v) * 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace detail

/// Greedy maximal subset with min pairwise distance >= radius (dart throwing
/// over a seeded permutation of the input points). Deterministic given seed.
inline PointCloud poisson_disc_sample(const PointCloud& cloud, double radius, uint64_t seed = 0) {
  if (radius <= 0.0) throw std::invalid_argument("poisson_disc_sample: radius must be > 0");
  PointCloud out;
  if (cloud.empty()) return out;

  std::vector<int> perm(cloud.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::unordered_map<detail::CellKey, std::vector<int>, detail::CellHash> grid;
  const double inv = 1.0 / radius;
  auto key_of = [&](const Vec3& p) {
    return detail::CellKey{static_cast<int64_t>(std::floor(p.x() * inv)),
                           static_cast<int64_t>(std::floor(p.y() * inv)),
                           static_cast<int64_t>(std::floor(p.z() * inv))};
  };

  const double r2 = radius * radius;
  const bool with_normals = cloud.has_normals();
  for (int idx : perm) {
    const Vec3& p = cloud.points[static_cast<std::size_t>(idx)];
    const detail::CellKey k = key_of(p);
    bool ok = true;
    for (int64_t dx = -1; dx <= 1 && ok; ++dx) {
      for (int64_t dy = -1; dy <= 1 && ok; ++dy) {
        for (int64_t dz = -1; dz <= 1 && ok; ++dz) {
          auto it = grid.find({k.x + dx, k.y + dy, k.z + dz});
          if (it == grid.end()) continue;
          for (int j : it->second) {
            if ((out.points[static_cast<std::size_t>(j)] - p).squaredNorm() < r2) {
              ok = false;
              break;
            }
          }
        }
      }
    }
    if (!ok) continue;
    grid[k].push_back(static_cast<int>(out.points.size()));
    out.points.push_back(p);
    if (with_normals) out.normals.push_back(cloud.normals[static_cast<std::size_t>(idx)]);
  }
  return out;
}

/// Bisects the disc radius until the sample lands within tol_frac of the
/// requested count. Used to reproduce fixed-size registration clouds.
inline PointCloud poisson_disc_sample_to_count(const PointCloud& cloud, int target_count,
                                               uint64_t seed = 0, double tol_frac = 0.05) {
  if (target_count < 1 || static_cast<std::size_t>(target_count) > cloud.size()) {
    throw std::invalid_argument("poisson_disc_sample_to_count: bad target count");
  }
  double lo = 1e-6, hi = cloud.bbox_diagonal() + 1e-6;
  PointCloud best;
  double best_err = std::numeric_limits<double>::infinity();
  for (int it = 0; it < 40; ++it) {
    const double r = 0.5 * (lo + hi);
    PointCloud s = poisson_disc_sample(cloud, r, seed);
    const double err = std::abs(static_cast<double>(s.size()) - target_count);
    if (err < best_err) {
      best_err = err;
      best = s;
    }
    if (err <= tol_frac * target_count) break;
    if (static_cast<int>(s.size()) > target_count) {
      lo = r;
    } else {
      hi = r;
    }
  }
  return best;
}

/// Mean squared corresponding-point distance, reported as its root in mm
/// (RMS convention; see cloud_mse_squared for the raw mean square).
inline double cloud_mse_squared(const PointCloud& a, const PointCloud& b,
                                const std::vector<std::pair<int, int>>& correspondence) {
  if (correspondence.empty()) {
    throw std::invalid_argument("cloud_mse: empty correspondence");
  }
  double acc = 0.0;
  for (auto [ia, ib] : correspondence) {
    if (ia < 0 || ib < 0 || static_cast<std::size_t>(ia) >= a.size() ||
        static_cast<std::size_t>(ib) >= b.size()) {
      throw std::invalid_argument("cloud_mse: correspondence index out of range");
    }
    acc += (a.points[static_cast<std::size_t>(ia)] - b.points[static_cast<std::size_t>(ib)]).squaredNorm();
  }
  return acc / static_cast<double>(correspondence.size());
}

inline double cloud_mse(const PointCloud& a, const PointCloud& b,
                        const std::vector<std::pair<int, int>>& correspondence) {
  return std::sqrt(cloud_mse_squared(a, b, correspondence));
}

/// Closed-form least-squares rigid fit (Arun/Umeyama, no scaling): returns T
/// minimizing sum ||T(src_i) - dst_i||^2. Throws on size mismatch, fewer than
/// 3 pairs, or collinear configurations where the rotation is undetermined.
inline RigidTransform fit_rigid_least_squares(const std::vector<Vec3>& src,
                                              const std::vector<Vec3>& dst) {
  if (src.size() != dst.size()) {
    throw std::invalid_argument("fit_rigid_least_squares: size mismatch");
  }
  if (src.size() < 3) {
    throw std::invalid_argument("fit_rigid_least_squares: need at least 3 pairs");
  }
  const double n = static_cast<double>(src.size());
  Vec3 src_mean = Vec3::Zero(), dst_mean = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    src_mean += src[i];
    dst_mean += dst[i];
  }
  src_mean /= n;
  dst_mean /= n;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    h += (src[i] - src_mean) * (dst[i] - dst_mean).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (sv[1] <= 1e-12 * std::max(sv[0], 1e-300)) {
    throw std::invalid_argument("fit_rigid_least_squares: degenerate (collinear) configuration");
  }
  Mat3 d = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return RigidTransform(project_to_rotation(r), dst_mean - r * src_mean);
}

/// Median nearest-neighbor spacing; scale-free length unit for registration.
inline double median_nn_spacing(const PointCloud& cloud) {
  if (cloud.size() < 2) {
    throw std::invalid_argument("median_nn_spacing: need at least 2 points");
  }
  KdTree tree(cloud.points);
  std::vector<double> d;
  d.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const std::vector<int> nb = tree.knn(cloud.points[i], 2);
    const int other = nb[0] == static_cast<int>(i) ? nb[1] : nb[0];
    d.push_back((cloud.points[static_cast<std::size_t>(other)] - cloud.points[i]).norm());
  }
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + mid, d.end());
  return d[mid];
}

/// Splitmix-style seed derivation so each consumer of a session seed draws
/// from an independent stream.
inline uint64_t derive_seed(uint64_t base, uint64_t tag) {
  uint64_t z = base + 0x9e3779b97f4a7c15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace geom

using geom::PointCloud;
using geom::RigidTransform;

}  // namespace scanpilot
