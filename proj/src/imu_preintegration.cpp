#include "twinvio/imu_preintegration.hpp"

#include <stdexcept>

namespace twinvio {

PreintegratedImu preintegrate(const std::vector<ImuSample>& samples, const Vec3& bg,
                              const Vec3& ba, const ImuNoise& noise, double nominal_rate) {
  if (samples.size() < 2) throw std::runtime_error("preintegrate: need >= 2 samples");
  const double nominal_dt = 1.0 / nominal_rate;

  PreintegratedImu pre;
  pre.bg_lin = bg;
  pre.ba_lin = ba;

  const double sg2 = noise.gyro_noise_density * noise.gyro_noise_density;
  const double sa2 = noise.accel_noise_density * noise.accel_noise_density;

  for (size_t k = 0; k + 1 < samples.size(); ++k) {
    const double dt = samples[k + 1].t - samples[k].t;
    if (dt <= 0.0) throw std::runtime_error("preintegrate: non-increasing sample timestamps");
    if (dt > 3.0 * nominal_dt) throw std::runtime_error("preintegrate: sample gap exceeds 3x nominal period");

    const Vec3 w = 0.5 * (samples[k].gyro + samples[k + 1].gyro) - bg;
    const Vec3 a = 0.5 * (samples[k].accel + samples[k + 1].accel) - ba;
    const Mat3 dr_step = exp_so3(w * dt);
    const Mat3 jr = right_jacobian_so3(w * dt);
    const Mat3 a_hat = hat(a);

    // Covariance and bias Jacobians first: they use the pre-step delta_r.
    Mat9 a_mat = Mat9::Identity();
    a_mat.block<3, 3>(0, 0) = dr_step.transpose();
    a_mat.block<3, 3>(3, 0) = -pre.delta_r * a_hat * dt;
    a_mat.block<3, 3>(6, 0) = -0.5 * pre.delta_r * a_hat * dt * dt;
    a_mat.block<3, 3>(6, 3) = Mat3::Identity() * dt;

    Eigen::Matrix<double, 9, 6> b_mat = Eigen::Matrix<double, 9, 6>::Zero();
    b_mat.block<3, 3>(0, 0) = jr * dt;
    b_mat.block<3, 3>(3, 3) = pre.delta_r * dt;
    b_mat.block<3, 3>(6, 3) = 0.5 * pre.delta_r * dt * dt;

    Vec6 noise_diag;
    noise_diag << Vec3::Constant(sg2 / dt), Vec3::Constant(sa2 / dt);
    pre.covariance = a_mat * pre.covariance * a_mat.transpose() +
                     b_mat * noise_diag.asDiagonal() * b_mat.transpose();

    pre.dp_dba += pre.dv_dba * dt - 0.5 * pre.delta_r * dt * dt;
    pre.dp_dbg += pre.dv_dbg * dt - 0.5 * pre.delta_r * a_hat * pre.dr_dbg * dt * dt;
    pre.dv_dba += -pre.delta_r * dt;
    pre.dv_dbg += -pre.delta_r * a_hat * pre.dr_dbg * dt;
    pre.dr_dbg = dr_step.transpose() * pre.dr_dbg - jr * dt;

    pre.delta_p += pre.delta_v * dt + 0.5 * pre.delta_r * a * dt * dt;
    pre.delta_v += pre.delta_r * a * dt;
    pre.delta_r = pre.delta_r * dr_step;
    pre.dt += dt;
  }
  // symmetrize against accumulated round-off
  pre.covariance = 0.5 * (pre.covariance + pre.covariance.transpose()).eval();
  return pre;
}

Mat3 corrected_delta_r(const PreintegratedImu& pre, const Vec3& bg) {
  return pre.delta_r * exp_so3(pre.dr_dbg * (bg - pre.bg_lin));
}

Vec3 corrected_delta_v(const PreintegratedImu& pre, const Vec3& bg, const Vec3& ba) {
  return pre.delta_v + pre.dv_dbg * (bg - pre.bg_lin) + pre.dv_dba * (ba - pre.ba_lin);
}

Vec3 corrected_delta_p(const PreintegratedImu& pre, const Vec3& bg, const Vec3& ba) {
  return pre.delta_p + pre.dp_dbg * (bg - pre.bg_lin) + pre.dp_dba * (ba - pre.ba_lin);
}

}  // namespace twinvio
