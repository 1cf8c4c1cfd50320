#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace twinvio {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat9 = Eigen::Matrix<double, 9, 9>;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

// Skew-symmetric matrix such that hat(a) * b = a x b.
Mat3 hat(const Vec3& w);

// Rodrigues formula, with a Taylor fallback below 1e-8 rad.
Mat3 exp_so3(const Vec3& omega);

// Principal logarithm with rotation angle in [0, pi]. Stable near zero
// (Taylor) and near pi (largest-diagonal branch).
Vec3 log_so3(const Mat3& r);

// Right Jacobian of SO(3) and its inverse.
Mat3 right_jacobian_so3(const Vec3& omega);
Mat3 right_jacobian_inv_so3(const Vec3& omega);

// Rigid transform. Tangent convention throughout the project: rotation
// block first, translation block second.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
  Pose operator*(const Pose& other) const;
  Pose inverse() const;

  // Adjoint in (rotation, translation) ordering:
  //   [ R        0 ]
  //   [ [t]x R   R ]
  Mat6 adjoint() const;
};

bool is_rotation(const Mat3& r, double tol = 1e-9);

// Yaw rotation about the +z axis.
Mat3 yaw_rotation(double yaw);

constexpr double deg2rad(double d) { return d * M_PI / 180.0; }
constexpr double rad2deg(double r) { return r * 180.0 / M_PI; }

}  // namespace twinvio
