#pragma once

#include <deque>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "twinvio/factors.hpp"

namespace twinvio {

// Gaussian prior from marginalization, attached to the oldest keyframe.
// Cost(x) = 0.5 * (d - d_bar)^T * information * (d - d_bar) with
// d = x boxminus x_lin and d_bar = pinv(information) * info_vector.
struct WindowPrior {
  KeyframeState x_lin;
  Mat15 information = Mat15::Zero();
  Vec15 info_vector = Vec15::Zero();
  Vec15 delta_bar = Vec15::Zero();
  bool valid = false;
};

struct EstimatorConfig {
  int window_size = 5;
  double sigma_px = 1.0;
  double huber_px = 2.0;  // robust threshold, pixels
  int max_iterations = 10;
  double cost_rel_tol = 1e-6;
  double imu_rate = 200.0;
  ImuNoise imu_noise;
  CameraConfig camera;
  Vec3 gravity = kGravityW;
  double min_triangulation_baseline = 0.05;  // meters between camera centers
  // initial prior standard deviations (gauge anchor on the first keyframe)
  double prior_sigma_rot = 1e-3;
  double prior_sigma_pos = 1e-3;
  double prior_sigma_vel = 0.1;
  double prior_sigma_bg = 0.01;
  double prior_sigma_ba = 0.1;
};

struct KeyframeInput {
  double t = 0.0;
  std::vector<Observation> observations;
  std::vector<ImuSample> imu;  // spanning [previous keyframe t, t]
};

struct KeyframeDiagnostics {
  double t = 0.0;
  int window_size = 0;
  int n_landmarks = 0;
  int iterations = 0;
  double cost_visual = 0.0;
  double cost_imu = 0.0;
  double cost_bias = 0.0;
  double cost_prior = 0.0;
  double cost_map = 0.0;
  double cost_gps = 0.0;
  double cost_total = 0.0;
  bool map_factor = false;
  bool gps_factor = false;
};

// Damped normal-equation solve (H + lambda * diag(H)) s = g that eliminates
// the trailing 3x3 landmark blocks by Schur complement; exactly equivalent
// to the dense factorization of the damped system.
VecX solve_normal_equations(const MatX& h, const VecX& g, double lambda, int n_pose_dims);

class SlidingWindowEstimator {
 public:
  struct Keyframe {
    int id = -1;
    KeyframeState state;
    std::shared_ptr<PreintegratedImu> preint;  // from previous window keyframe
  };

  struct LandmarkEntry {
    Vec3 p = Vec3::Zero();
    bool initialized = false;
    std::map<int, Vec2> obs;  // keyframe id -> pixel
  };

  SlidingWindowEstimator(const EstimatorConfig& config, const KeyframeState& initial_state,
                         const std::vector<Observation>& initial_observations = {});

  // Inserts the keyframe (state propagated through the IMU span), updates
  // landmark bookkeeping, and marginalizes the oldest keyframe when the
  // window would exceed its size. Does not optimize.
  void add_keyframe(const KeyframeInput& input);

  // Global factors attach to the keyframe whose timestamp matches within
  // half a keyframe period; factors for already-marginalized keyframes are
  // discarded.
  void attach_map_factor(const MapFactor& factor);
  void attach_gps_factor(const GpsFactor& factor);

  // Levenberg-Marquardt over the window states and landmarks; throws after
  // 5 consecutive cost-increasing step rejections.
  void optimize();

  const std::deque<Keyframe>& window() const { return window_; }
  const WindowPrior& prior() const { return prior_; }
  const std::map<int, LandmarkEntry>& landmarks() const { return landmarks_; }
  const std::vector<KeyframeDiagnostics>& diagnostics() const { return diags_; }

  // Landmark estimates usable as a registration source cloud (L frame).
  // When sigma_max > 0, only landmarks whose worst-direction position sigma
  // (from the in-window visual information) is at most sigma_max survive;
  // this drops weak-parallax points whose depth error would masquerade as a
  // registration correction.
  std::vector<std::pair<int, Vec3>> landmark_cloud(double sigma_max = 0.0) const;

  // Marginalized history plus the current window, in time order.
  std::vector<std::pair<double, Pose>> trajectory() const;

 private:
  struct ProblemLayout;
  void initialize_landmarks();
  bool triangulate(LandmarkEntry& lm) const;
  double assemble(const ProblemLayout& layout, MatX* h, VecX* g, KeyframeDiagnostics* diag) const;
  void marginalize_front();

  EstimatorConfig config_;
  std::deque<Keyframe> window_;
  std::map<int, LandmarkEntry> landmarks_;
  WindowPrior prior_;
  std::map<int, MapFactor> map_factors_;  // keyframe id -> factor
  std::map<int, GpsFactor> gps_factors_;
  std::vector<std::pair<double, Pose>> history_;
  std::vector<KeyframeDiagnostics> diags_;
  int next_id_ = 0;
};

}  // namespace twinvio
