#pragma once

#include <deque>
#include <limits>
#include <string>
#include <vector>

#include "twinvio/geometry.hpp"

namespace twinvio {
namespace alignment {

// 4-DoF transform from the estimator frame L to the world frame W:
// p_W = R_z_WL * p_L + p_WL.
struct AlignmentEstimate {
  double yaw = 0.0;  // radians
  Mat3 R_z_WL = Mat3::Identity();
  Vec3 p_WL = Vec3::Zero();
  double heading_variance = std::numeric_limits<double>::infinity();  // rad^2
  bool converged = false;
  enum class Source { kGps, kRegistration } source = Source::kGps;
};

// Closed-form yaw-only Procrustes on centered xy coordinates plus the full
// 3-D translation. Throws on fewer than 2 pairs or horizontal spread
// below 0.5 m (yaw unobservable).
AlignmentEstimate umeyama_yaw(const std::vector<Vec3>& global_positions,
                              const std::vector<Vec3>& local_positions);

// Yaw variance of the (yaw, t) Gauss-Newton solution at the estimate: the
// information of the alignment cost scaled by the empirical residual
// variance, inverted, yaw entry. Throws on singular information.
// residual_floor (meters) lower-bounds the empirical pair scatter: locally
// rigid trajectories fit a compact pair cluster almost perfectly, and without
// the floor those tiny residuals would claim yaw certainty the cluster's
// spatial extent cannot support.
double heading_covariance(const std::vector<Vec3>& global_positions,
                          const std::vector<Vec3>& local_positions,
                          const AlignmentEstimate& estimate,
                          double residual_floor = 0.0);

struct AlignerConfig {
  double epsilon = deg2rad(1.0) * deg2rad(1.0);  // rad^2, 1 deg heading std
  int min_pairs = 20;      // before convergence is tested
  double max_dt = 0.1;     // association window, seconds
  double residual_floor = 0.3;  // m, see heading_covariance
  // Horizontal RMS spread the phase-2 pair set must reach before its fit may
  // replace the served estimate. Registration pairs arrive in bursts; a burst
  // spanning a few meters has no yaw leverage regardless of its residuals.
  double min_phase2_spread = 0.0;  // m, 0 disables
  bool expect_registration = true;  // phase 2 will occur; phase 1 never freezes
};

struct TimedPosition {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
};

struct AlignmentLogEntry {
  double t = 0.0;
  int phase = 1;
  AlignmentEstimate estimate;
};

// Incremental two-phase aligner. Phase 1 pairs GPS fixes with vslam
// positions; the first registration position switches to phase 2, which
// re-solves from registration pairs only. The estimate freezes once the
// terminal phase converges.
class FrameAligner {
 public:
  explicit FrameAligner(const AlignerConfig& config);

  void add_vslam(double t, const Vec3& p_L);
  void add_global(double t, const Vec3& p_W);        // phase-1 GPS position
  void add_registration(double t, const Vec3& p_W);  // phase-2 position
  void flush();  // associate trailing globals once streams end

  bool has_estimate() const { return has_estimate_; }
  const AlignmentEstimate& current() const { return estimate_; }
  int n_pairs() const { return static_cast<int>(global_pairs_.size()); }
  int phase() const { return phase_; }
  bool frozen() const { return frozen_; }
  const std::vector<AlignmentLogEntry>& log() const { return log_; }

 private:
  void pair_pending(bool final_flush);
  void resolve(double t);

  AlignerConfig config_;
  std::vector<TimedPosition> vslam_;
  std::deque<TimedPosition> pending_;
  std::vector<Vec3> global_pairs_;
  std::vector<Vec3> local_pairs_;
  AlignmentEstimate estimate_;
  bool has_estimate_ = false;
  bool frozen_ = false;
  int phase_ = 1;
  std::vector<AlignmentLogEntry> log_;
};

// Batch form: merges the three streams in time order and returns the
// estimate after each newly associated pair.
std::vector<AlignmentEstimate> run_alignment(const std::vector<TimedPosition>& gps,
                                             const std::vector<TimedPosition>& registration,
                                             const std::vector<TimedPosition>& vslam,
                                             const AlignerConfig& config = {});

// CSV: t, phase, yaw, t_x, t_y, t_z, heading_variance, converged.
void write_alignment_log(const std::string& path, const std::vector<AlignmentLogEntry>& entries);

}  // namespace alignment
}  // namespace twinvio
