#include "twinvio/geometry.hpp"

#include <cmath>

namespace twinvio {

Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return m;
}

Mat3 exp_so3(const Vec3& omega) {
  const double angle = omega.norm();
  const Mat3 w = hat(omega);
  if (angle < 1e-8) {
    return Mat3::Identity() + w + 0.5 * w * w;
  }
  const double s = std::sin(angle) / angle;
  const double c = (1.0 - std::cos(angle)) / (angle * angle);
  return Mat3::Identity() + s * w + c * w * w;
}

Vec3 log_so3(const Mat3& r) {
  const double trace = r.trace();
  const double cos_angle = std::clamp(0.5 * (trace - 1.0), -1.0, 1.0);
  const double angle = std::acos(cos_angle);
  const Vec3 axis_term(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));

  if (angle < 1e-8) {
    // log(R) ~ 0.5 * (1 + angle^2 / 6) * vee(R - R^T)
    return 0.5 * (1.0 + angle * angle / 6.0) * axis_term;
  }
  if (angle > M_PI - 1e-6) {
    // Near pi the vee term vanishes; recover the axis from the diagonal of
    // R = I + 2 * sin^2(angle/2) * (aa^T - I), picking the largest diagonal
    // entry for stability.
    Mat3 s = 0.5 * (r + Mat3::Identity());
    int k = 0;
    s.diagonal().maxCoeff(&k);
    Vec3 axis;
    axis[k] = std::sqrt(std::max(s(k, k), 0.0));
    for (int i = 0; i < 3; ++i) {
      if (i != k) axis[i] = s(k, i) / axis[k];
    }
    axis.normalize();
    // Fix the sign with the (possibly tiny) vee term.
    if (axis.dot(axis_term) < 0.0) axis = -axis;
    return angle * axis;
  }
  return 0.5 * angle / std::sin(angle) * axis_term;
}

Mat3 right_jacobian_so3(const Vec3& omega) {
  const double angle = omega.norm();
  const Mat3 w = hat(omega);
  if (angle < 1e-8) {
    return Mat3::Identity() - 0.5 * w + (1.0 / 6.0) * w * w;
  }
  const double a2 = angle * angle;
  const double c1 = (1.0 - std::cos(angle)) / a2;
  const double c2 = (angle - std::sin(angle)) / (a2 * angle);
  return Mat3::Identity() - c1 * w + c2 * w * w;
}

Mat3 right_jacobian_inv_so3(const Vec3& omega) {
  const double angle = omega.norm();
  const Mat3 w = hat(omega);
  if (angle < 1e-8) {
    return Mat3::Identity() + 0.5 * w + (1.0 / 12.0) * w * w;
  }
  const double c =
      1.0 / (angle * angle) - (1.0 + std::cos(angle)) / (2.0 * angle * std::sin(angle));
  return Mat3::Identity() + 0.5 * w + c * w * w;
}

Pose Pose::operator*(const Pose& other) const {
  return {rotation * other.rotation, rotation * other.translation + translation};
}

Pose Pose::inverse() const {
  return {rotation.transpose(), -(rotation.transpose() * translation)};
}

Mat6 Pose::adjoint() const {
  Mat6 adj = Mat6::Zero();
  adj.topLeftCorner<3, 3>() = rotation;
  adj.bottomLeftCorner<3, 3>() = hat(translation) * rotation;
  adj.bottomRightCorner<3, 3>() = rotation;
  return adj;
}

bool is_rotation(const Mat3& r, double tol) {
  const double ortho = (r.transpose() * r - Mat3::Identity()).norm();
  return ortho < tol && std::abs(r.determinant() - 1.0) < tol;
}

Mat3 yaw_rotation(double yaw) {
  return exp_so3(Vec3(0.0, 0.0, yaw));
}

}  // namespace twinvio
