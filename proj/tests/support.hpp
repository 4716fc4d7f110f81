#pragma once

#include "liftpose/random.hpp"
#include "liftpose/skeleton.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>

namespace testing_support {

using liftpose::Rng;

inline Eigen::VectorXd random_vector(Rng& rng, Eigen::Index n, double lo = -1.0, double hi = 1.0) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    v[i] = liftpose::uniform(rng, lo, hi);
  }
  return v;
}

inline Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                                     double lo = -1.0, double hi = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = liftpose::uniform(rng, lo, hi);
  }
  return m;
}

template <int Dim>
liftpose::Pose<Dim> random_pose(Rng& rng, int joints, liftpose::Frame frame, double scale = 500.0) {
  return liftpose::Pose<Dim>(random_vector(rng, Dim * joints, -scale, scale), frame);
}

/// Rotation built from Rodrigues' formula, independent of the library code.
inline Eigen::Matrix3d rotation(const Eigen::Vector3d& axis, double angle) {
  const Eigen::Vector3d k = axis.normalized();
  Eigen::Matrix3d kx;
  kx << 0, -k.z(), k.y(), k.z(), 0, -k.x(), -k.y(), k.x(), 0;
  return Eigen::Matrix3d::Identity() + std::sin(angle) * kx + (1 - std::cos(angle)) * kx * kx;
}

inline Eigen::Matrix3d random_rotation(Rng& rng) {
  const Eigen::Vector3d axis = random_vector(rng, 3);
  return rotation(axis, liftpose::uniform(rng, -3.1, 3.1));
}

inline liftpose::Pose3D transform(const liftpose::Pose3D& p, const Eigen::Matrix3d& r,
                                  const Eigen::Vector3d& t) {
  liftpose::Pose3D out = p;
  for (int j = 0; j < p.joint_count(); ++j) {
    out.joint(j) = r * p.joint(j) + t;
  }
  return out;
}

inline double rel_diff(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

}  // namespace testing_support
