#pragma once

#include <optional>

#include "twinvio/imu_preintegration.hpp"
#include "twinvio/registration.hpp"
#include "twinvio/simkit.hpp"

namespace twinvio {

// Keyframe tangent ordering: rotation, position, velocity, gyro bias,
// accel bias. Pose update: R <- R * exp_so3(dtheta), p <- p + dp.
using Vec15 = Eigen::Matrix<double, 15, 1>;
using Mat15 = Eigen::Matrix<double, 15, 15>;

struct KeyframeState {
  double t = 0.0;
  Pose T_LB;
  Vec3 v = Vec3::Zero();   // m/s, L frame
  Vec3 bg = Vec3::Zero();  // rad/s
  Vec3 ba = Vec3::Zero();  // m/s^2
};

KeyframeState apply_delta(const KeyframeState& s, const Vec15& d);
Vec15 state_difference(const KeyframeState& a, const KeyframeState& b);  // a boxminus b

// Reprojection residual e = z - h(T_CB * T_BL * p_L) in pixels, with
// Jacobians in the pose tangent (rotation, position) and landmark position.
// nullopt when the landmark is behind the camera (depth <= 1e-3 m).
struct VisualEval {
  Vec2 residual;
  Eigen::Matrix<double, 2, 6> j_pose;
  Eigen::Matrix<double, 2, 3> j_landmark;
};
std::optional<VisualEval> visual_residual(const Pose& T_LB, const Vec3& p_L, const Vec2& pixel,
                                          const CameraConfig& camera);

// Preintegration residual (rotation, velocity, position) with first-order
// bias correction; Jacobians over both 15-dim keyframe tangents.
struct ImuEval {
  Vec9 residual;
  Eigen::Matrix<double, 9, 15> j_i;
  Eigen::Matrix<double, 9, 15> j_j;
};
ImuEval imu_residual(const KeyframeState& kf_i, const KeyframeState& kf_j,
                     const PreintegratedImu& pre, const Vec3& gravity);

// Global pose measurement in the L frame derived from a converged twin
// registration (measured T_LB = T_LW * dT * T_WL * T_LB_est). The weight is
// the registration weight carried into the L-frame tangent by the adjoint
// congruence and reordered to the residual layout (position, rotation).
struct MapFactor {
  double t = 0.0;
  Pose measured;
  Mat6 weight = Mat6::Zero();
};
// noise_floor_m / noise_floor_rad lower-bound the per-direction measurement
// sigma: the ICP weight is built from target-mesh geometry alone and is
// blind to source-cloud landmark noise, so without the floor a large cloud
// claims centimeter certainty it cannot have. Zero disables the floor.
MapFactor derive_map_measurement(const registration::RegistrationResult& reg, const Pose& T_WL,
                                 const Pose& T_LB_est, double noise_floor_m = 0.0,
                                 double noise_floor_rad = 0.0);

// e = [p_est - p_meas; log_so3(R_meas^T * R_est)], Jacobian in the pose
// tangent (rotation, position).
struct MapEval {
  Vec6 residual;
  Mat6 j_pose;
};
MapEval map_residual(const Pose& T_LB, const MapFactor& factor);

// GPS position fix already expressed in the L frame.
struct GpsFactor {
  double t = 0.0;
  Vec3 p_meas = Vec3::Zero();
  Mat3 weight = Mat3::Identity();
};

}  // namespace twinvio
