#pragma once

#include <vector>

#include "twinvio/simkit.hpp"

namespace twinvio {

// On-manifold preintegrated IMU increment between two keyframes, with
// first-order bias Jacobians and propagated covariance.
// Tangent / covariance ordering: rotation, velocity, position.
struct PreintegratedImu {
  double dt = 0.0;
  Mat3 delta_r = Mat3::Identity();
  Vec3 delta_v = Vec3::Zero();
  Vec3 delta_p = Vec3::Zero();
  Mat9 covariance = Mat9::Zero();
  Mat3 dr_dbg = Mat3::Zero();
  Mat3 dv_dbg = Mat3::Zero();
  Mat3 dv_dba = Mat3::Zero();
  Mat3 dp_dbg = Mat3::Zero();
  Mat3 dp_dba = Mat3::Zero();
  Vec3 bg_lin = Vec3::Zero();  // linearization biases
  Vec3 ba_lin = Vec3::Zero();
};

// Midpoint on-manifold integration over consecutive sample pairs. Throws
// when fewer than 2 samples are given or when a gap exceeds 3x the nominal
// period.
PreintegratedImu preintegrate(const std::vector<ImuSample>& samples, const Vec3& bg,
                              const Vec3& ba, const ImuNoise& noise, double nominal_rate);

// Increment corrected to first order for a bias change away from the
// linearization point.
Mat3 corrected_delta_r(const PreintegratedImu& pre, const Vec3& bg);
Vec3 corrected_delta_v(const PreintegratedImu& pre, const Vec3& bg, const Vec3& ba);
Vec3 corrected_delta_p(const PreintegratedImu& pre, const Vec3& bg, const Vec3& ba);

}  // namespace twinvio
