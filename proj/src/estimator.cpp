#include "twinvio/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

namespace twinvio {

namespace {

using Mat30 = Eigen::Matrix<double, 30, 30>;
using Vec30 = Eigen::Matrix<double, 30, 1>;

Mat15 pinv_spd(const Mat15& m) {
  Eigen::SelfAdjointEigenSolver<Mat15> eig(m);
  const Vec15 lam = eig.eigenvalues();
  const double cutoff = std::max(lam.maxCoeff(), 0.0) * 1e-12;
  Vec15 inv = Vec15::Zero();
  for (int i = 0; i < 15; ++i) {
    if (lam[i] > cutoff) inv[i] = 1.0 / lam[i];
  }
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

// Jacobian of the prior residual d = x boxminus x_lin wrt the state tangent.
Mat15 prior_jacobian(const Vec15& delta) {
  Mat15 j = Mat15::Identity();
  j.block<3, 3>(0, 0) = right_jacobian_inv_so3(delta.segment<3>(0));
  return j;
}

Mat6 sqrt_psd(const Mat6& w) {
  Eigen::SelfAdjointEigenSolver<Mat6> eig(w);
  Vec6 lam = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

struct SlidingWindowEstimator::ProblemLayout {
  std::map<int, int> kf_index;       // keyframe id -> window position
  std::vector<int> landmark_ids;     // active landmarks, ascending id
  std::map<int, int> landmark_col;   // landmark id -> column offset
  int n_pose_dims = 0;
  int total_dims = 0;
};

VecX solve_normal_equations(const MatX& h, const VecX& g, double lambda, int n_pose_dims) {
  const int dim = static_cast<int>(h.rows());
  MatX damped = h;
  for (int i = 0; i < dim; ++i) {
    damped(i, i) += lambda * std::max(h(i, i), 1e-9);
  }
  if (n_pose_dims == dim) {
    return damped.ldlt().solve(g);
  }

  const int n_lm = (dim - n_pose_dims) / 3;
  MatX hcc = damped.topLeftCorner(n_pose_dims, n_pose_dims);
  VecX gc = g.head(n_pose_dims);
  std::vector<Mat3> hll_inv(n_lm);
  for (int l = 0; l < n_lm; ++l) {
    const int col = n_pose_dims + 3 * l;
    hll_inv[l] = damped.block<3, 3>(col, col).inverse();
    const MatX hcl = damped.block(0, col, n_pose_dims, 3);
    hcc.noalias() -= hcl * hll_inv[l] * hcl.transpose();
    gc.noalias() -= hcl * hll_inv[l] * g.segment<3>(col);
  }
  VecX step(dim);
  step.head(n_pose_dims) = hcc.ldlt().solve(gc);
  for (int l = 0; l < n_lm; ++l) {
    const int col = n_pose_dims + 3 * l;
    const MatX hlc = damped.block(col, 0, 3, n_pose_dims);
    step.segment<3>(col) =
        hll_inv[l] * (g.segment<3>(col) - hlc * step.head(n_pose_dims));
  }
  return step;
}

SlidingWindowEstimator::SlidingWindowEstimator(const EstimatorConfig& config,
                                               const KeyframeState& initial_state,
                                               const std::vector<Observation>& initial_observations)
    : config_(config) {
  Keyframe kf;
  kf.id = next_id_++;
  kf.state = initial_state;
  window_.push_back(kf);
  for (const Observation& obs : initial_observations) {
    landmarks_[obs.landmark_id].obs[kf.id] = obs.pixel;
  }

  prior_.x_lin = initial_state;
  Vec15 sigmas;
  sigmas << Vec3::Constant(config.prior_sigma_rot), Vec3::Constant(config.prior_sigma_pos),
      Vec3::Constant(config.prior_sigma_vel), Vec3::Constant(config.prior_sigma_bg),
      Vec3::Constant(config.prior_sigma_ba);
  prior_.information = sigmas.cwiseAbs2().cwiseInverse().asDiagonal();
  prior_.info_vector.setZero();
  prior_.delta_bar.setZero();
  prior_.valid = true;
}

void SlidingWindowEstimator::add_keyframe(const KeyframeInput& input) {
  const Keyframe& prev = window_.back();
  if (input.t <= prev.state.t) {
    throw std::runtime_error("add_keyframe: non-increasing keyframe timestamps");
  }
  auto pre = std::make_shared<PreintegratedImu>(
      preintegrate(input.imu, prev.state.bg, prev.state.ba, config_.imu_noise, config_.imu_rate));

  Keyframe kf;
  kf.id = next_id_++;
  kf.preint = pre;
  KeyframeState& s = kf.state;
  const double dt = pre->dt;
  const Vec3& g = config_.gravity;
  s.t = input.t;
  s.T_LB.rotation = prev.state.T_LB.rotation * pre->delta_r;
  s.v = prev.state.v + g * dt + prev.state.T_LB.rotation * pre->delta_v;
  s.T_LB.translation = prev.state.T_LB.translation + prev.state.v * dt + 0.5 * g * dt * dt +
                       prev.state.T_LB.rotation * pre->delta_p;
  s.bg = prev.state.bg;
  s.ba = prev.state.ba;
  window_.push_back(kf);

  for (const Observation& obs : input.observations) {
    landmarks_[obs.landmark_id].obs[kf.id] = obs.pixel;
  }
  initialize_landmarks();

  if (static_cast<int>(window_.size()) > config_.window_size) marginalize_front();
}

void SlidingWindowEstimator::attach_map_factor(const MapFactor& factor) {
  for (auto& kf : window_) {
    if (std::abs(kf.state.t - factor.t) < 1e-6) {
      map_factors_[kf.id] = factor;
      return;
    }
  }
}

void SlidingWindowEstimator::attach_gps_factor(const GpsFactor& factor) {
  for (auto& kf : window_) {
    if (std::abs(kf.state.t - factor.t) < 1e-6) {
      gps_factors_[kf.id] = factor;
      return;
    }
  }
}

bool SlidingWindowEstimator::triangulate(LandmarkEntry& lm) const {
  const Keyframe* first = nullptr;
  const Keyframe* last = nullptr;
  for (const auto& kf : window_) {
    if (lm.obs.count(kf.id)) {
      if (first == nullptr) first = &kf;
      last = &kf;
    }
  }
  if (first == nullptr || first == last) return false;

  const auto ray = [&](const Keyframe& kf, Vec3* origin, Vec3* dir) {
    const Vec2& px = lm.obs.at(kf.id);
    const Vec3 d_c((px.x() - config_.camera.cx) / config_.camera.fx,
                   (px.y() - config_.camera.cy) / config_.camera.fy, 1.0);
    *origin = kf.state.T_LB * config_.camera.T_BC.translation;
    *dir = (kf.state.T_LB.rotation * config_.camera.T_BC.rotation * d_c).normalized();
  };
  Vec3 c1, d1, c2, d2;
  ray(*first, &c1, &d1);
  ray(*last, &c2, &d2);

  const Vec3 e = c2 - c1;
  if (e.norm() < config_.min_triangulation_baseline) return false;
  const double b = d1.dot(d2);
  const double det = 1.0 - b * b;
  if (std::abs(det) < 1e-9) return false;
  const double t = (b * d1.dot(e) - d2.dot(e)) / det;
  const double s = d1.dot(e) + b * t;
  if (s < 0.05 || t < 0.05) return false;

  lm.p = 0.5 * (c1 + s * d1 + c2 + t * d2);
  return true;
}

void SlidingWindowEstimator::initialize_landmarks() {
  for (auto& [id, lm] : landmarks_) {
    if (lm.initialized || lm.obs.size() < 2) continue;
    if (triangulate(lm)) lm.initialized = true;
  }
}

double SlidingWindowEstimator::assemble(const ProblemLayout& layout, MatX* h, VecX* g,
                                        KeyframeDiagnostics* diag) const {
  if (h != nullptr) {
    h->setZero(layout.total_dims, layout.total_dims);
    g->setZero(layout.total_dims);
  }
  KeyframeDiagnostics local;

  // marginalization / bootstrap prior on the oldest keyframe
  if (prior_.valid) {
    const Vec15 delta = state_difference(window_.front().state, prior_.x_lin);
    const Mat15 j = prior_jacobian(delta);
    const Vec15 err = delta - prior_.delta_bar;
    local.cost_prior += 0.5 * err.dot(prior_.information * err);
    if (h != nullptr) {
      h->block<15, 15>(0, 0) += j.transpose() * prior_.information * j;
      g->segment<15>(0) -= j.transpose() * (prior_.information * err);
    }
  }

  // inertial and bias random-walk factors between consecutive keyframes
  for (size_t k = 1; k < window_.size(); ++k) {
    const Keyframe& ki = window_[k - 1];
    const Keyframe& kj = window_[k];
    const int ci = 15 * static_cast<int>(k - 1);
    const int cj = 15 * static_cast<int>(k);

    const ImuEval ev = imu_residual(ki.state, kj.state, *kj.preint, config_.gravity);
    const Eigen::LLT<Mat9> llt(kj.preint->covariance);
    const Vec9 rw = llt.matrixL().solve(ev.residual);
    local.cost_imu += 0.5 * rw.squaredNorm();
    if (h != nullptr) {
      const Eigen::Matrix<double, 9, 15> ji = llt.matrixL().solve(ev.j_i);
      const Eigen::Matrix<double, 9, 15> jj = llt.matrixL().solve(ev.j_j);
      h->block<15, 15>(ci, ci) += ji.transpose() * ji;
      h->block<15, 15>(ci, cj) += ji.transpose() * jj;
      h->block<15, 15>(cj, ci) += jj.transpose() * ji;
      h->block<15, 15>(cj, cj) += jj.transpose() * jj;
      g->segment<15>(ci) -= ji.transpose() * rw;
      g->segment<15>(cj) -= jj.transpose() * rw;
    }

    const double dt = kj.preint->dt;
    const double inv_sg = 1.0 / (config_.imu_noise.gyro_bias_walk * std::sqrt(dt));
    const double inv_sa = 1.0 / (config_.imu_noise.accel_bias_walk * std::sqrt(dt));
    const Vec3 rbg = (kj.state.bg - ki.state.bg) * inv_sg;
    const Vec3 rba = (kj.state.ba - ki.state.ba) * inv_sa;
    local.cost_bias += 0.5 * (rbg.squaredNorm() + rba.squaredNorm());
    if (h != nullptr) {
      for (int a = 0; a < 3; ++a) {
        const std::pair<int, double> rows[2] = {{9 + a, inv_sg}, {12 + a, inv_sa}};
        for (const auto& [off, w] : rows) {
          const double w2 = w * w;
          (*h)(ci + off, ci + off) += w2;
          (*h)(cj + off, cj + off) += w2;
          (*h)(ci + off, cj + off) -= w2;
          (*h)(cj + off, ci + off) -= w2;
          const double r = off < 12 ? rbg[a] : rba[a];
          (*g)(ci + off) += w * r;
          (*g)(cj + off) -= w * r;
        }
      }
    }
  }

  // visual factors, Huber-robust at the whitened level
  const double inv_sigma = 1.0 / config_.sigma_px;
  const double huber_k = config_.huber_px * inv_sigma;
  for (const int lid : layout.landmark_ids) {
    const LandmarkEntry& lm = landmarks_.at(lid);
    const int cl = layout.landmark_col.at(lid);
    for (const auto& [kf_id, pixel] : lm.obs) {
      const auto it = layout.kf_index.find(kf_id);
      if (it == layout.kf_index.end()) continue;
      const Keyframe& kf = window_[it->second];
      const auto ev = visual_residual(kf.state.T_LB, lm.p, pixel, config_.camera);
      if (!ev) continue;
      const Vec2 rw = ev->residual * inv_sigma;
      const double s = rw.norm();
      const double w_rob = s <= huber_k ? 1.0 : huber_k / s;
      local.cost_visual += s <= huber_k ? 0.5 * s * s : huber_k * (s - 0.5 * huber_k);
      if (h != nullptr) {
        const int ck = 15 * it->second;
        const Eigen::Matrix<double, 2, 6> jp = ev->j_pose * inv_sigma;
        const Eigen::Matrix<double, 2, 3> jl = ev->j_landmark * inv_sigma;
        h->block<6, 6>(ck, ck) += w_rob * jp.transpose() * jp;
        h->block<6, 3>(ck, cl) += w_rob * jp.transpose() * jl;
        h->block<3, 6>(cl, ck) += w_rob * jl.transpose() * jp;
        h->block<3, 3>(cl, cl) += w_rob * jl.transpose() * jl;
        g->segment<6>(ck) -= w_rob * jp.transpose() * rw;
        g->segment<3>(cl) -= w_rob * jl.transpose() * rw;
      }
    }
  }

  // map-registration and GPS factors
  for (const auto& [kf_id, factor] : map_factors_) {
    const auto it = layout.kf_index.find(kf_id);
    if (it == layout.kf_index.end()) continue;
    const Keyframe& kf = window_[it->second];
    const MapEval ev = map_residual(kf.state.T_LB, factor);
    local.cost_map += 0.5 * ev.residual.dot(factor.weight * ev.residual);
    local.map_factor = true;
    if (h != nullptr) {
      const int ck = 15 * it->second;
      const Mat6 sw = sqrt_psd(factor.weight);
      const Mat6 jw = sw * ev.j_pose;
      h->block<6, 6>(ck, ck) += jw.transpose() * jw;
      g->segment<6>(ck) -= jw.transpose() * (sw * ev.residual);
    }
  }
  for (const auto& [kf_id, factor] : gps_factors_) {
    const auto it = layout.kf_index.find(kf_id);
    if (it == layout.kf_index.end()) continue;
    const Keyframe& kf = window_[it->second];
    const Vec3 r = kf.state.T_LB.translation - factor.p_meas;
    local.cost_gps += 0.5 * r.dot(factor.weight * r);
    local.gps_factor = true;
    if (h != nullptr) {
      const int ck = 15 * it->second;
      h->block<3, 3>(ck + 3, ck + 3) += factor.weight;
      g->segment<3>(ck + 3) -= factor.weight * r;
    }
  }

  local.cost_total = local.cost_visual + local.cost_imu + local.cost_bias + local.cost_prior +
                     local.cost_map + local.cost_gps;
  if (diag != nullptr) *diag = local;
  return local.cost_total;
}

void SlidingWindowEstimator::optimize() {
  ProblemLayout layout;
  for (size_t k = 0; k < window_.size(); ++k) layout.kf_index[window_[k].id] = static_cast<int>(k);
  layout.n_pose_dims = 15 * static_cast<int>(window_.size());
  int col = layout.n_pose_dims;
  for (const auto& [id, lm] : landmarks_) {
    if (!lm.initialized || lm.obs.size() < 2) continue;
    layout.landmark_ids.push_back(id);
    layout.landmark_col[id] = col;
    col += 3;
  }
  layout.total_dims = col;

  MatX h;
  VecX g;
  KeyframeDiagnostics diag;
  double cost = assemble(layout, &h, &g, &diag);

  double lambda = 1e-4;
  int rejections = 0;
  int iter = 0;
  while (iter < config_.max_iterations) {
    ++iter;
    const VecX step = solve_normal_equations(h, g, lambda, layout.n_pose_dims);
    if (step.norm() < 1e-10) break;

    std::vector<KeyframeState> saved_states;
    saved_states.reserve(window_.size());
    for (const auto& kf : window_) saved_states.push_back(kf.state);
    std::map<int, Vec3> saved_landmarks;
    for (const int lid : layout.landmark_ids) saved_landmarks[lid] = landmarks_.at(lid).p;

    for (size_t k = 0; k < window_.size(); ++k) {
      window_[k].state = apply_delta(window_[k].state, step.segment<15>(15 * k));
    }
    for (const int lid : layout.landmark_ids) {
      landmarks_.at(lid).p += step.segment<3>(layout.landmark_col.at(lid));
    }

    MatX h_new;
    VecX g_new;
    KeyframeDiagnostics diag_new;
    const double new_cost = assemble(layout, &h_new, &g_new, &diag_new);
    if (new_cost <= cost) {
      const double decrease = cost - new_cost;
      h.swap(h_new);
      g.swap(g_new);
      diag = diag_new;
      lambda = std::max(lambda * 0.5, 1e-9);
      rejections = 0;
      const bool converged = decrease < config_.cost_rel_tol * std::max(cost, 1e-12);
      cost = new_cost;
      if (converged) break;
    } else {
      for (size_t k = 0; k < window_.size(); ++k) window_[k].state = saved_states[k];
      for (const auto& [lid, p] : saved_landmarks) landmarks_.at(lid).p = p;
      lambda *= 4.0;
      if (++rejections >= 5) {
        throw std::runtime_error("step_window: solver diverged (5 consecutive rejected steps)");
      }
    }
  }

  diag.t = window_.back().state.t;
  diag.window_size = static_cast<int>(window_.size());
  diag.n_landmarks = static_cast<int>(layout.landmark_ids.size());
  diag.iterations = iter;
  diags_.push_back(diag);
}

void SlidingWindowEstimator::marginalize_front() {
  const Keyframe dep = window_.front();
  history_.emplace_back(dep.state.t, dep.state.T_LB);

  bool touched = false;
  Mat30 h = Mat30::Zero();
  Vec30 g = Vec30::Zero();

  if (prior_.valid) {
    const Vec15 delta = state_difference(dep.state, prior_.x_lin);
    const Mat15 j = prior_jacobian(delta);
    h.block<15, 15>(0, 0) += j.transpose() * prior_.information * j;
    g.segment<15>(0) -= j.transpose() * (prior_.information * (delta - prior_.delta_bar));
    touched = true;
  }
  if (window_.size() >= 2) {
    const Keyframe& next = window_[1];
    const ImuEval ev = imu_residual(dep.state, next.state, *next.preint, config_.gravity);
    const Eigen::LLT<Mat9> llt(next.preint->covariance);
    const Vec9 rw = llt.matrixL().solve(ev.residual);
    const Eigen::Matrix<double, 9, 15> ji = llt.matrixL().solve(ev.j_i);
    const Eigen::Matrix<double, 9, 15> jj = llt.matrixL().solve(ev.j_j);
    h.block<15, 15>(0, 0) += ji.transpose() * ji;
    h.block<15, 15>(0, 15) += ji.transpose() * jj;
    h.block<15, 15>(15, 0) += jj.transpose() * ji;
    h.block<15, 15>(15, 15) += jj.transpose() * jj;
    g.segment<15>(0) -= ji.transpose() * rw;
    g.segment<15>(15) -= jj.transpose() * rw;

    const double dt = next.preint->dt;
    const double inv_sg = 1.0 / (config_.imu_noise.gyro_bias_walk * std::sqrt(dt));
    const double inv_sa = 1.0 / (config_.imu_noise.accel_bias_walk * std::sqrt(dt));
    for (int a = 0; a < 3; ++a) {
      const std::pair<int, double> rows[2] = {{9 + a, inv_sg}, {12 + a, inv_sa}};
      for (const auto& [off, w] : rows) {
        const double w2 = w * w;
        h(off, off) += w2;
        h(15 + off, 15 + off) += w2;
        h(off, 15 + off) -= w2;
        h(15 + off, off) -= w2;
        const double r = off < 12 ? (next.state.bg[a] - dep.state.bg[a]) * w
                                  : (next.state.ba[a] - dep.state.ba[a]) * w;
        g(off) += w * r;
        g(15 + off) -= w * r;
      }
    }
    touched = true;
  }
  if (const auto it = map_factors_.find(dep.id); it != map_factors_.end()) {
    const MapEval ev = map_residual(dep.state.T_LB, it->second);
    const Mat6 sw = sqrt_psd(it->second.weight);
    const Mat6 jw = sw * ev.j_pose;
    h.block<6, 6>(0, 0) += jw.transpose() * jw;
    g.segment<6>(0) -= jw.transpose() * (sw * ev.residual);
    touched = true;
  }
  if (const auto it = gps_factors_.find(dep.id); it != gps_factors_.end()) {
    const Vec3 r = dep.state.T_LB.translation - it->second.p_meas;
    h.block<3, 3>(3, 3) += it->second.weight;
    g.segment<3>(3) -= it->second.weight * r;
    touched = true;
  }

  // landmark bookkeeping: visual observations of the departing keyframe are
  // dropped; landmarks with no remaining observations leave entirely
  for (auto it = landmarks_.begin(); it != landmarks_.end();) {
    it->second.obs.erase(dep.id);
    if (it->second.obs.empty()) {
      it = landmarks_.erase(it);
    } else {
      ++it;
    }
  }
  map_factors_.erase(dep.id);
  gps_factors_.erase(dep.id);
  window_.pop_front();
  window_.front().preint.reset();

  if (!touched) return;

  const Mat15 h_mm_inv = pinv_spd(h.block<15, 15>(0, 0));
  const Mat15 h_mr = h.block<15, 15>(0, 15);
  Mat15 info = h.block<15, 15>(15, 15) - h_mr.transpose() * h_mm_inv * h_mr;
  info = (0.5 * (info + info.transpose())).eval();

  prior_.x_lin = window_.front().state;
  prior_.information = info;
  prior_.info_vector = g.segment<15>(15) - h_mr.transpose() * h_mm_inv * g.segment<15>(0);
  prior_.delta_bar = pinv_spd(info) * prior_.info_vector;
  prior_.valid = true;
}

std::vector<std::pair<int, Vec3>> SlidingWindowEstimator::landmark_cloud(double sigma_max) const {
  const double info_floor = sigma_max > 0.0 ? 1.0 / (sigma_max * sigma_max) : 0.0;
  const double inv_var_px = 1.0 / (config_.sigma_px * config_.sigma_px);
  std::vector<std::pair<int, Vec3>> cloud;
  for (const auto& [id, lm] : landmarks_) {
    if (!lm.initialized) continue;
    if (info_floor > 0.0) {
      Mat3 h_ll = Mat3::Zero();
      for (const auto& kf : window_) {
        const auto it = lm.obs.find(kf.id);
        if (it == lm.obs.end()) continue;
        const auto eval = visual_residual(kf.state.T_LB, lm.p, it->second, config_.camera);
        if (!eval) continue;
        h_ll += eval->j_landmark.transpose() * eval->j_landmark * inv_var_px;
      }
      const Eigen::SelfAdjointEigenSolver<Mat3> eig(h_ll);
      if (eig.eigenvalues()(0) < info_floor) continue;
    }
    cloud.emplace_back(id, lm.p);
  }
  return cloud;
}

std::vector<std::pair<double, Pose>> SlidingWindowEstimator::trajectory() const {
  std::vector<std::pair<double, Pose>> out = history_;
  for (const auto& kf : window_) out.emplace_back(kf.state.t, kf.state.T_LB);
  return out;
}

}  // namespace twinvio
