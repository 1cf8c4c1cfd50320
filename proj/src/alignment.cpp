#include "twinvio/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <Eigen/Cholesky>

namespace twinvio {
namespace alignment {

namespace {

double horizontal_spread(const std::vector<Vec3>& pts) {
  Vec2 centroid = Vec2::Zero();
  for (const auto& p : pts) centroid += p.head<2>();
  centroid /= static_cast<double>(pts.size());
  double spread = 0.0;
  for (const auto& p : pts) spread = std::max(spread, (p.head<2>() - centroid).norm());
  return 2.0 * spread;
}

}  // namespace

AlignmentEstimate umeyama_yaw(const std::vector<Vec3>& global_positions,
                              const std::vector<Vec3>& local_positions) {
  const size_t n = global_positions.size();
  if (n < 2 || local_positions.size() != n) {
    throw std::runtime_error("umeyama_yaw: need >= 2 position pairs");
  }
  if (horizontal_spread(local_positions) <= 0.5) {
    throw std::runtime_error("umeyama_yaw: degenerate horizontal spread");
  }

  Vec3 g_bar = Vec3::Zero();
  Vec3 l_bar = Vec3::Zero();
  for (size_t i = 0; i < n; ++i) {
    g_bar += global_positions[i];
    l_bar += local_positions[i];
  }
  g_bar /= static_cast<double>(n);
  l_bar /= static_cast<double>(n);

  // maximize sum g'^T R(yaw) l' = a cos(yaw) + b sin(yaw)
  double a = 0.0;
  double b = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const Vec2 g = (global_positions[i] - g_bar).head<2>();
    const Vec2 l = (local_positions[i] - l_bar).head<2>();
    a += g.x() * l.x() + g.y() * l.y();
    b += l.x() * g.y() - l.y() * g.x();
  }

  AlignmentEstimate est;
  est.yaw = std::atan2(b, a);
  est.R_z_WL = yaw_rotation(est.yaw);
  est.p_WL = g_bar - est.R_z_WL * l_bar;
  return est;
}

double heading_covariance(const std::vector<Vec3>& global_positions,
                          const std::vector<Vec3>& local_positions,
                          const AlignmentEstimate& estimate,
                          double residual_floor) {
  const size_t n = global_positions.size();
  if (n < 2 || local_positions.size() != n) {
    throw std::runtime_error("heading_covariance: need >= 2 position pairs");
  }
  const double c = std::cos(estimate.yaw);
  const double s = std::sin(estimate.yaw);
  Mat3 dr = Mat3::Zero();  // d R_z / d yaw
  dr(0, 0) = -s;
  dr(0, 1) = -c;
  dr(1, 0) = c;
  dr(1, 1) = -s;

  Mat4 info = Mat4::Zero();
  double sq_sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const Vec3 r = global_positions[i] - (estimate.R_z_WL * local_positions[i] + estimate.p_WL);
    sq_sum += r.squaredNorm();
    Eigen::Matrix<double, 3, 4> j;
    j.col(0) = -dr * local_positions[i];
    j.rightCols<3>() = -Mat3::Identity();
    info += j.transpose() * j;
  }

  Eigen::LLT<Mat4> llt(info);
  if (llt.info() != Eigen::Success || info.determinant() < 1e-12) {
    throw std::runtime_error("heading_covariance: singular alignment information");
  }
  const double dof = std::max(3.0 * static_cast<double>(n) - 4.0, 1.0);
  const double residual_var = std::max(sq_sum / dof, residual_floor * residual_floor);
  const Mat4 cov = residual_var * llt.solve(Mat4::Identity());
  return cov(0, 0);
}

FrameAligner::FrameAligner(const AlignerConfig& config) : config_(config) {}

void FrameAligner::add_vslam(double t, const Vec3& p_L) {
  vslam_.push_back({t, p_L});
  pair_pending(false);
}

void FrameAligner::add_global(double t, const Vec3& p_W) {
  if (frozen_ || phase_ != 1) return;
  pending_.push_back({t, p_W});
  pair_pending(false);
}

void FrameAligner::add_registration(double t, const Vec3& p_W) {
  if (frozen_) return;
  if (phase_ == 1) {
    phase_ = 2;
    pending_.clear();
    global_pairs_.clear();
    local_pairs_.clear();
  }
  pending_.push_back({t, p_W});
  pair_pending(false);
}

void FrameAligner::flush() { pair_pending(true); }

void FrameAligner::pair_pending(bool final_flush) {
  while (!pending_.empty() && !vslam_.empty()) {
    const TimedPosition& f = pending_.front();
    if (!final_flush && vslam_.back().t < f.t) break;  // a closer match may still arrive
    const auto after = std::lower_bound(
        vslam_.begin(), vslam_.end(), f.t,
        [](const TimedPosition& v, double t) { return v.t < t; });
    const TimedPosition* best = nullptr;
    if (after != vslam_.end()) best = &*after;
    if (after != vslam_.begin()) {
      const TimedPosition* before = &*(after - 1);
      if (best == nullptr || std::abs(before->t - f.t) <= std::abs(best->t - f.t)) best = before;
    }
    if (best != nullptr && std::abs(best->t - f.t) <= config_.max_dt) {
      global_pairs_.push_back(f.p);
      local_pairs_.push_back(best->p);
      const double t = f.t;
      pending_.pop_front();
      resolve(t);
    } else {
      pending_.pop_front();  // no vslam position near this epoch
    }
  }
}

void FrameAligner::resolve(double t) {
  if (frozen_ || global_pairs_.size() < 2) return;
  if (phase_ == 2 && config_.min_phase2_spread > 0.0) {
    Vec3 centroid = Vec3::Zero();
    for (const Vec3& p : local_pairs_) centroid += p;
    centroid /= static_cast<double>(local_pairs_.size());
    double sq = 0.0;
    for (const Vec3& p : local_pairs_) sq += (p - centroid).head<2>().squaredNorm();
    const double spread = std::sqrt(sq / static_cast<double>(local_pairs_.size()));
    if (spread < config_.min_phase2_spread) return;
  }
  AlignmentEstimate est;
  try {
    est = umeyama_yaw(global_pairs_, local_pairs_);
    est.heading_variance =
        heading_covariance(global_pairs_, local_pairs_, est, config_.residual_floor);
  } catch (const std::runtime_error&) {
    return;  // not yet solvable (spread or conditioning); keep the previous estimate
  }
  est.source = phase_ == 1 ? AlignmentEstimate::Source::kGps
                           : AlignmentEstimate::Source::kRegistration;
  est.converged = static_cast<int>(global_pairs_.size()) >= config_.min_pairs &&
                  est.heading_variance < config_.epsilon;
  // a phase-2 fit must not displace the served estimate until it is at least
  // as certain: registration pairs arrive in compact clusters, and a cluster
  // spanning a few meters has almost no yaw leverage however well it fits
  if (phase_ == 2 && has_estimate_ && est.heading_variance > estimate_.heading_variance) return;
  estimate_ = est;
  has_estimate_ = true;
  if (est.converged && (phase_ == 2 || !config_.expect_registration)) frozen_ = true;
  log_.push_back({t, phase_, est});
}

std::vector<AlignmentEstimate> run_alignment(const std::vector<TimedPosition>& gps,
                                             const std::vector<TimedPosition>& registration,
                                             const std::vector<TimedPosition>& vslam,
                                             const AlignerConfig& config) {
  struct Event {
    double t;
    int kind;  // 0 vslam, 1 gps, 2 registration
    Vec3 p;
  };
  std::vector<Event> events;
  for (const auto& v : vslam) events.push_back({v.t, 0, v.p});
  for (const auto& g : gps) events.push_back({g.t, 1, g.p});
  for (const auto& r : registration) events.push_back({r.t, 2, r.p});
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    if (a.t != b.t) return a.t < b.t;
    return a.kind < b.kind;
  });

  AlignerConfig cfg = config;
  cfg.expect_registration = !registration.empty();
  FrameAligner aligner(cfg);
  for (const auto& e : events) {
    switch (e.kind) {
      case 0: aligner.add_vslam(e.t, e.p); break;
      case 1: aligner.add_global(e.t, e.p); break;
      default: aligner.add_registration(e.t, e.p); break;
    }
  }
  aligner.flush();

  std::vector<AlignmentEstimate> stream;
  stream.reserve(aligner.log().size());
  for (const auto& entry : aligner.log()) stream.push_back(entry.estimate);
  return stream;
}

void write_alignment_log(const std::string& path, const std::vector<AlignmentLogEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_alignment_log: cannot open " + path);
  out << "t,phase,yaw,t_x,t_y,t_z,heading_variance,converged\n";
  char buf[256];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof(buf), "%.9f,%d,%.9f,%.6f,%.6f,%.6f,%.9e,%d\n", e.t, e.phase,
                  e.estimate.yaw, e.estimate.p_WL.x(), e.estimate.p_WL.y(), e.estimate.p_WL.z(),
                  e.estimate.heading_variance, e.estimate.converged ? 1 : 0);
    out << buf;
  }
}

}  // namespace alignment
}  // namespace twinvio
