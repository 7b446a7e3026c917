#pragma once

// Shared deterministic generators for the test suites.

#include <random>
#include <vector>

#include "scanpilot/geom.hpp"

namespace scanpilot::testing {

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::Quaterniond q(gauss(rng), gauss(rng), gauss(rng), gauss(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline RigidTransform random_transform(std::mt19937_64& rng, double translation_scale = 100.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return RigidTransform(random_rotation(rng),
                        Vec3(u(rng), u(rng), u(rng)) * translation_scale);
}

/// Rotation by a bounded random angle about a random axis.
inline Mat3 random_rotation_bounded(std::mt19937_64& rng, double max_angle_rad) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
  axis.normalize();
  const double angle = (2.0 * u01(rng) - 1.0) * max_angle_rad;
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

inline PointCloud random_cloud(std::mt19937_64& rng, std::size_t n, double extent = 100.0) {
  std::uniform_real_distribution<double> u(-extent, extent);
  PointCloud c;
  c.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) c.points.emplace_back(u(rng), u(rng), u(rng));
  return c;
}

inline PointCloud plane_grid(int nx, int ny, double spacing, double z = 0.0) {
  PointCloud c;
  c.points.reserve(static_cast<std::size_t>(nx) * ny);
  for (int i = 0; i < nx; ++i) {
    for (int j = 0; j < ny; ++j) c.points.emplace_back(i * spacing, j * spacing, z);
  }
  return c;
}

/// Deterministic spiral sampling of the unit sphere.
inline PointCloud sphere_cloud(std::size_t n, double radius = 1.0) {
  PointCloud c;
  c.points.reserve(n);
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / static_cast<double>(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double th = golden * static_cast<double>(i);
    c.points.emplace_back(radius * r * std::cos(th), radius * r * std::sin(th), radius * z);
  }
  return c;
}

inline double angle_deg_between(const Vec3& a, const Vec3& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

}  // namespace scanpilot::testing
