#pragma once

#include <string>
#include <vector>

#include "twinvio/spatial_index.hpp"

namespace twinvio {
namespace registration {

struct Correspondence {
  Vec3 a;           // source point, W frame
  Vec3 b;           // closest twin surface point
  Vec3 n;           // unit normal at b
  double distance;  // |a - b|
};

// Closest-point association with a hard distance gate. Throws when fewer
// than 12 correspondences survive (under-determined 6-DoF solve).
std::vector<Correspondence> associate(const std::vector<Vec3>& source, const SpatialIndex& index,
                                      double max_dist);

struct PlaneSolve {
  Pose delta;          // step aligning source toward the twin
  Vec6 x;              // tangent step, rotation block first
  Mat6 hessian;        // sum A_j^T A_j
  double inlier_rmse;  // point-to-plane RMSE after the step
  bool degenerate;     // condition number > 1e12; x is the minimum-norm step
};

// One Gauss-Newton step of the linearized point-to-plane problem. The
// residual for correspondence j is n_j . (delta * a_j - b_j); rank-deficient
// normal equations give the minimum-norm step with the degenerate flag set.
PlaneSolve solve_point_to_plane(const std::vector<Correspondence>& corrs);

// W = (beta / trace(H)) * exp(-gamma^2 / (2 * gamma_scale^2)) * H.
// Throws when trace(H) is not positive.
Mat6 compute_weight(const Mat6& hessian, double inlier_rmse, double beta,
                    double gamma_scale = 1.0);

struct IcpConfig {
  int max_iter = 30;
  std::vector<double> max_dist_schedule = {1.0, 0.5, 0.25};  // last entry holds
  double tol = 1e-6;             // tangent step norm
  double rmse_threshold = 0.3;   // meters
  double min_inlier_fraction = 0.5;
  double beta = 1.0;             // weight scale, calibrated then frozen
  double gamma_scale = 1.0;      // meters, units of gamma in exp(-g^2/2)
};

struct RegistrationResult {
  Pose delta_T;                  // cumulative correction, delta_T * source ~ twin
  Mat6 hessian = Mat6::Zero();
  Mat6 weight = Mat6::Zero();
  double inlier_rmse = 0.0;
  int inlier_count = 0;
  bool converged = false;
  bool degenerate = false;
  int iterations = 0;
};

// Alternates associate / solve from the prior pose until the step norm
// drops below tol or max_iter is reached. Convergence additionally requires
// an inlier fraction >= min_inlier_fraction and rmse <= rmse_threshold.
// Too few correspondences yield a non-converged result, never a throw.
RegistrationResult iterate_icp(const std::vector<Vec3>& source, const SpatialIndex& index,
                               const Pose& init, const IcpConfig& config = {});

struct RegistrationLogEntry {
  double t = 0.0;
  RegistrationResult result;
};

// CSV: t, converged, inlier_count, gamma, trace_h, 6 ascending eigenvalues of W.
void write_registration_log(const std::string& path,
                            const std::vector<RegistrationLogEntry>& entries);

}  // namespace registration
}  // namespace twinvio
