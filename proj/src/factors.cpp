#include "twinvio/factors.hpp"

#include <Eigen/Eigenvalues>

namespace twinvio {

KeyframeState apply_delta(const KeyframeState& s, const Vec15& d) {
  KeyframeState out = s;
  out.T_LB.rotation = s.T_LB.rotation * exp_so3(d.segment<3>(0));
  out.T_LB.translation = s.T_LB.translation + d.segment<3>(3);
  out.v = s.v + d.segment<3>(6);
  out.bg = s.bg + d.segment<3>(9);
  out.ba = s.ba + d.segment<3>(12);
  return out;
}

Vec15 state_difference(const KeyframeState& a, const KeyframeState& b) {
  Vec15 d;
  d.segment<3>(0) = log_so3(b.T_LB.rotation.transpose() * a.T_LB.rotation);
  d.segment<3>(3) = a.T_LB.translation - b.T_LB.translation;
  d.segment<3>(6) = a.v - b.v;
  d.segment<3>(9) = a.bg - b.bg;
  d.segment<3>(12) = a.ba - b.ba;
  return d;
}

std::optional<VisualEval> visual_residual(const Pose& T_LB, const Vec3& p_L, const Vec2& pixel,
                                          const CameraConfig& camera) {
  const Mat3 r_cb = camera.T_BC.rotation.transpose();
  const Vec3 p_B = T_LB.inverse() * p_L;
  const Vec3 p_C = r_cb * (p_B - camera.T_BC.translation);
  if (p_C.z() <= 1e-3) return std::nullopt;

  VisualEval out;
  out.residual = pixel - project_pinhole(camera, p_C);

  const double inv_z = 1.0 / p_C.z();
  Eigen::Matrix<double, 2, 3> dh;  // projection derivative wrt p_C
  dh << camera.fx * inv_z, 0.0, -camera.fx * p_C.x() * inv_z * inv_z,
      0.0, camera.fy * inv_z, -camera.fy * p_C.y() * inv_z * inv_z;
  const Eigen::Matrix<double, 2, 3> de = -dh;  // residual = z - h

  const Mat3 r_lb_t = T_LB.rotation.transpose();
  out.j_pose.leftCols<3>() = de * r_cb * hat(p_B);
  out.j_pose.rightCols<3>() = de * r_cb * (-r_lb_t);
  out.j_landmark = de * r_cb * r_lb_t;
  return out;
}

ImuEval imu_residual(const KeyframeState& kf_i, const KeyframeState& kf_j,
                     const PreintegratedImu& pre, const Vec3& gravity) {
  const Mat3& r_i = kf_i.T_LB.rotation;
  const Mat3& r_j = kf_j.T_LB.rotation;
  const double dt = pre.dt;

  const Vec3 dbg = kf_i.bg - pre.bg_lin;
  const Mat3 dr_corr = corrected_delta_r(pre, kf_i.bg);
  const Vec3 dv_corr = corrected_delta_v(pre, kf_i.bg, kf_i.ba);
  const Vec3 dp_corr = corrected_delta_p(pre, kf_i.bg, kf_i.ba);

  const Vec3 v_term = r_i.transpose() * (kf_j.v - kf_i.v - gravity * dt);
  const Vec3 p_term = r_i.transpose() * (kf_j.T_LB.translation - kf_i.T_LB.translation -
                                         kf_i.v * dt - 0.5 * gravity * dt * dt);

  ImuEval out;
  const Vec3 r_rot = log_so3(dr_corr.transpose() * r_i.transpose() * r_j);
  out.residual.segment<3>(0) = r_rot;
  out.residual.segment<3>(3) = v_term - dv_corr;
  out.residual.segment<3>(6) = p_term - dp_corr;

  const Mat3 jr_inv = right_jacobian_inv_so3(r_rot);
  out.j_i.setZero();
  out.j_j.setZero();

  // rotation rows
  out.j_i.block<3, 3>(0, 0) = -jr_inv * r_j.transpose() * r_i;
  out.j_j.block<3, 3>(0, 0) = jr_inv;
  out.j_i.block<3, 3>(0, 9) = -jr_inv * exp_so3(r_rot).transpose() *
                              right_jacobian_so3(pre.dr_dbg * dbg) * pre.dr_dbg;
  // velocity rows
  out.j_i.block<3, 3>(3, 0) = hat(v_term);
  out.j_i.block<3, 3>(3, 6) = -r_i.transpose();
  out.j_j.block<3, 3>(3, 6) = r_i.transpose();
  out.j_i.block<3, 3>(3, 9) = -pre.dv_dbg;
  out.j_i.block<3, 3>(3, 12) = -pre.dv_dba;
  // position rows
  out.j_i.block<3, 3>(6, 0) = hat(p_term);
  out.j_i.block<3, 3>(6, 3) = -r_i.transpose();
  out.j_j.block<3, 3>(6, 3) = r_i.transpose();
  out.j_i.block<3, 3>(6, 6) = -r_i.transpose() * dt;
  out.j_i.block<3, 3>(6, 9) = -pre.dp_dbg;
  out.j_i.block<3, 3>(6, 12) = -pre.dp_dba;
  return out;
}

MapFactor derive_map_measurement(const registration::RegistrationResult& reg, const Pose& T_WL,
                                 const Pose& T_LB_est, double noise_floor_m,
                                 double noise_floor_rad) {
  MapFactor factor;
  factor.measured = T_WL.inverse() * reg.delta_T * T_WL * T_LB_est;

  // The ICP weight lives in the W-frame left tangent of delta_T at the W
  // origin: a perturbation (phi, rho) moves a surface point p to
  // p + rho + phi x p. The factor residual is (p_est - p_meas in L, body
  // rotation error), so express that parametrization in the ICP tangent:
  // phi = R_WB dtheta and rho = R_WL dp + [p_W]x R_WB dtheta, with p_W the
  // measured body position in W. The lever arm [p_W]x is essential; dropping
  // it misattributes rotation confidence to translation by meters per degree
  // once the body is far from the frame origin.
  const Pose T_WB = reg.delta_T * T_WL * T_LB_est;
  Mat6 m = Mat6::Zero();
  m.block<3, 3>(0, 3) = T_WB.rotation;
  m.block<3, 3>(3, 0) = T_WL.rotation;
  m.block<3, 3>(3, 3) = hat(T_WB.translation) * T_WB.rotation;
  Mat6 weight = m.transpose() * reg.weight * m;

  // H only knows the target mesh geometry; the source cloud's landmark noise
  // bounds what any direction can really claim. Cap eigenvalues at the floor
  // information, W <- (W^-1 + S)^-1 evaluated as S^-1/2 B(I+B)^-1 S^-1/2 with
  // B = S^1/2 W S^1/2, which is exact on the range of W and keeps its null
  // space null.
  if (noise_floor_m > 0.0 && noise_floor_rad > 0.0) {
    Vec6 s;
    s << noise_floor_m, noise_floor_m, noise_floor_m, noise_floor_rad, noise_floor_rad,
        noise_floor_rad;
    const Mat6 s_half = s.asDiagonal();
    const Mat6 s_half_inv = s.cwiseInverse().asDiagonal();
    const Mat6 b = s_half * weight * s_half;
    Eigen::SelfAdjointEigenSolver<Mat6> eig(b);
    const Vec6 lam = eig.eigenvalues().cwiseMax(0.0);
    const Vec6 capped = lam.array() / (1.0 + lam.array());
    weight = s_half_inv * eig.eigenvectors() * capped.asDiagonal() *
             eig.eigenvectors().transpose() * s_half_inv;
  }
  factor.weight = weight;
  return factor;
}

MapEval map_residual(const Pose& T_LB, const MapFactor& factor) {
  MapEval out;
  out.residual.segment<3>(0) = T_LB.translation - factor.measured.translation;
  const Vec3 r_rot = log_so3(factor.measured.rotation.transpose() * T_LB.rotation);
  out.residual.segment<3>(3) = r_rot;
  out.j_pose.setZero();
  out.j_pose.block<3, 3>(0, 3) = Mat3::Identity();
  out.j_pose.block<3, 3>(3, 0) = right_jacobian_inv_so3(r_rot);
  return out;
}

}  // namespace twinvio
