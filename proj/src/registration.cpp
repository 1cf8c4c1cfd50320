#include "twinvio/registration.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>

namespace twinvio {
namespace registration {

std::vector<Correspondence> associate(const std::vector<Vec3>& source, const SpatialIndex& index,
                                      double max_dist) {
  if (source.empty()) throw std::runtime_error("associate: empty source cloud");
  std::vector<Correspondence> corrs;
  corrs.reserve(source.size());
  for (const Vec3& a : source) {
    const auto cp = index.closest_point_with_normal(a);
    if (cp.distance > max_dist) continue;
    corrs.push_back({a, cp.point, cp.normal, cp.distance});
  }
  if (corrs.size() < 12) {
    throw std::runtime_error("associate: fewer than 12 correspondences");
  }
  return corrs;
}

PlaneSolve solve_point_to_plane(const std::vector<Correspondence>& corrs) {
  if (corrs.size() < 12) {
    throw std::runtime_error("solve_point_to_plane: fewer than 12 correspondences");
  }
  Mat6 h = Mat6::Zero();
  Vec6 g = Vec6::Zero();
  for (const auto& c : corrs) {
    Vec6 a_row;
    a_row << -(c.a.cross(c.n)), -c.n;
    const double y = c.n.dot(c.a - c.b);
    h += a_row * a_row.transpose();
    g += a_row * y;
  }

  // Minimum-norm solve through the eigendecomposition; directions below the
  // relative threshold carry no information and receive no step.
  Eigen::SelfAdjointEigenSolver<Mat6> eig(h);
  const Vec6 lam = eig.eigenvalues();
  const double lam_max = lam.maxCoeff();
  const double cutoff = lam_max * 1e-12;
  Vec6 inv = Vec6::Zero();
  bool degenerate = false;
  for (int i = 0; i < 6; ++i) {
    if (lam[i] > cutoff && lam_max > 0.0) {
      inv[i] = 1.0 / lam[i];
    } else {
      degenerate = true;
    }
  }
  const Vec6 x = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose() * g;

  PlaneSolve out;
  out.x = x;
  out.delta = {exp_so3(x.head<3>()), x.tail<3>()};
  out.hessian = h;
  out.degenerate = degenerate;
  double sq_sum = 0.0;
  for (const auto& c : corrs) {
    const double r = c.n.dot(out.delta * c.a - c.b);
    sq_sum += r * r;
  }
  out.inlier_rmse = std::sqrt(sq_sum / corrs.size());
  return out;
}

Mat6 compute_weight(const Mat6& hessian, double inlier_rmse, double beta, double gamma_scale) {
  const double sigma_sq = hessian.trace();
  if (!(sigma_sq > 0.0)) throw std::runtime_error("compute_weight: hessian trace is not positive");
  const double g = inlier_rmse / gamma_scale;
  return (beta / sigma_sq) * std::exp(-0.5 * g * g) * hessian;
}

RegistrationResult iterate_icp(const std::vector<Vec3>& source, const SpatialIndex& index,
                               const Pose& init, const IcpConfig& config) {
  RegistrationResult result;
  result.delta_T = init;
  if (source.empty() || config.max_dist_schedule.empty()) return result;

  bool step_converged = false;
  PlaneSolve solve;
  std::vector<Correspondence> corrs;
  for (int iter = 0; iter < config.max_iter; ++iter) {
    const size_t si = std::min<size_t>(iter, config.max_dist_schedule.size() - 1);
    const double max_dist = config.max_dist_schedule[si];

    std::vector<Vec3> placed;
    placed.reserve(source.size());
    for (const Vec3& p : source) placed.push_back(result.delta_T * p);
    try {
      corrs = associate(placed, index, max_dist);
    } catch (const std::runtime_error&) {
      result.converged = false;
      result.inlier_count = 0;
      return result;
    }

    solve = solve_point_to_plane(corrs);
    result.delta_T = solve.delta * result.delta_T;
    result.iterations = iter + 1;
    if (solve.x.norm() < config.tol) {
      step_converged = true;
      break;
    }
  }

  result.hessian = solve.hessian;
  result.inlier_rmse = solve.inlier_rmse;
  result.inlier_count = static_cast<int>(corrs.size());
  result.degenerate = solve.degenerate;
  const double inlier_fraction = static_cast<double>(corrs.size()) / source.size();
  result.converged = step_converged && inlier_fraction >= config.min_inlier_fraction &&
                     result.inlier_rmse <= config.rmse_threshold;
  if (result.hessian.trace() > 0.0) {
    result.weight =
        compute_weight(result.hessian, result.inlier_rmse, config.beta, config.gamma_scale);
  }
  return result;
}

void write_registration_log(const std::string& path,
                            const std::vector<RegistrationLogEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_registration_log: cannot open " + path);
  out << "t,converged,inlier_count,gamma,trace_h,w_eig_0,w_eig_1,w_eig_2,w_eig_3,w_eig_4,w_eig_5\n";
  char buf[512];
  for (const auto& e : entries) {
    Eigen::SelfAdjointEigenSolver<Mat6> eig(e.result.weight);
    const Vec6 lam = eig.eigenvalues();
    std::snprintf(buf, sizeof(buf),
                  "%.9f,%d,%d,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e\n", e.t,
                  e.result.converged ? 1 : 0, e.result.inlier_count, e.result.inlier_rmse,
                  e.result.hessian.trace(), lam[0], lam[1], lam[2], lam[3], lam[4], lam[5]);
    out << buf;
  }
}

}  // namespace registration
}  // namespace twinvio
