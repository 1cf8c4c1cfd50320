#include "twinvio/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "twinvio/alignment.hpp"

namespace twinvio {
namespace evaluation {

TrajectoryRecord load_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_trajectory_csv: cannot open " + path);
  TrajectoryRecord record;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.rfind("t,", 0) == 0) continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 8) {
      throw std::runtime_error("load_trajectory_csv: bad record at " + path + ":" +
                               std::to_string(line_no));
    }
    const double t = std::stod(fields[0]);
    const Vec3 p(std::stod(fields[1]), std::stod(fields[2]), std::stod(fields[3]));
    const Eigen::Quaterniond q(std::stod(fields[4]), std::stod(fields[5]), std::stod(fields[6]),
                               std::stod(fields[7]));
    record.poses.emplace_back(t, Pose{q.normalized().toRotationMatrix(), p});
    if (fields.size() >= 9) record.frame = fields[8];
  }
  if (record.poses.empty()) throw std::runtime_error("load_trajectory_csv: empty file " + path);
  for (size_t i = 1; i < record.poses.size(); ++i) {
    if (record.poses[i].first <= record.poses[i - 1].first) {
      throw std::runtime_error("load_trajectory_csv: non-increasing timestamps in " + path);
    }
  }
  return record;
}

void save_trajectory_csv(const std::string& path, const TrajectoryRecord& record) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_trajectory_csv: cannot open " + path);
  out << "t,x,y,z,qw,qx,qy,qz,frame\n";
  char buf[512];
  for (const auto& [t, pose] : record.poses) {
    const Eigen::Quaterniond q(pose.rotation);
    std::snprintf(buf, sizeof(buf), "%.9f,%.9f,%.9f,%.9f,%.12f,%.12f,%.12f,%.12f,%s\n", t,
                  pose.translation.x(), pose.translation.y(), pose.translation.z(), q.w(), q.x(),
                  q.y(), q.z(), record.frame.c_str());
    out << buf;
  }
}

std::vector<std::pair<Pose, Pose>> associate_stamps(const TrajectoryRecord& a,
                                                    const TrajectoryRecord& b, double max_dt) {
  if (a.poses.empty() || b.poses.empty()) {
    throw std::runtime_error("associate_stamps: empty trajectory");
  }
  std::vector<std::pair<Pose, Pose>> pairs;
  size_t j = 0;
  for (const auto& [ta, pa] : a.poses) {
    while (j + 1 < b.poses.size() &&
           std::abs(b.poses[j + 1].first - ta) <= std::abs(b.poses[j].first - ta)) {
      ++j;
    }
    if (std::abs(b.poses[j].first - ta) <= max_dt) pairs.emplace_back(pa, b.poses[j].second);
  }
  if (pairs.empty()) throw std::runtime_error("associate_stamps: no pairs within tolerance");
  return pairs;
}

double ate_position(const std::vector<std::pair<Pose, Pose>>& pairs) {
  if (pairs.size() < 2) throw std::runtime_error("ate_position: need >= 2 pairs");
  double sq = 0.0;
  for (const auto& [a, b] : pairs) sq += (a.translation - b.translation).squaredNorm();
  return std::sqrt(sq / pairs.size());
}

double ate_rotation(const std::vector<std::pair<Pose, Pose>>& pairs) {
  if (pairs.size() < 2) throw std::runtime_error("ate_rotation: need >= 2 pairs");
  double sq = 0.0;
  for (const auto& [a, b] : pairs) {
    sq += log_so3(a.rotation.transpose() * b.rotation).squaredNorm();
  }
  return rad2deg(std::sqrt(sq / pairs.size()));
}

AlignMode parse_align_mode(const std::string& name) {
  if (name == "none") return AlignMode::kNone;
  if (name == "yaw4dof") return AlignMode::kYaw4Dof;
  if (name == "se3") return AlignMode::kSe3;
  throw std::runtime_error("unknown alignment mode: " + name);
}

std::string align_mode_name(AlignMode mode) {
  switch (mode) {
    case AlignMode::kNone: return "none";
    case AlignMode::kYaw4Dof: return "yaw4dof";
    default: return "se3";
  }
}

namespace {

// Full-rotation Umeyama (Kabsch) without scale: gt ~ R * est + t.
Pose umeyama_se3(const std::vector<Vec3>& gt, const std::vector<Vec3>& est) {
  Vec3 g_bar = Vec3::Zero();
  Vec3 e_bar = Vec3::Zero();
  for (size_t i = 0; i < gt.size(); ++i) {
    g_bar += gt[i];
    e_bar += est[i];
  }
  g_bar /= static_cast<double>(gt.size());
  e_bar /= static_cast<double>(est.size());

  Mat3 cov = Mat3::Zero();
  for (size_t i = 0; i < gt.size(); ++i) {
    cov += (gt[i] - g_bar) * (est[i] - e_bar).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3 r = svd.matrixU() * d * svd.matrixV().transpose();
  return {r, g_bar - r * e_bar};
}

}  // namespace

TrajectoryRecord align_for_eval(const TrajectoryRecord& est, const TrajectoryRecord& gt,
                                AlignMode mode) {
  if (mode == AlignMode::kNone) {
    TrajectoryRecord out = est;
    out.frame = "W";
    return out;
  }
  const auto pairs = associate_stamps(gt, est);
  std::vector<Vec3> gt_pos;
  std::vector<Vec3> est_pos;
  gt_pos.reserve(pairs.size());
  est_pos.reserve(pairs.size());
  for (const auto& [g, e] : pairs) {
    gt_pos.push_back(g.translation);
    est_pos.push_back(e.translation);
  }

  Pose transform;
  if (mode == AlignMode::kYaw4Dof) {
    const auto aligned = alignment::umeyama_yaw(gt_pos, est_pos);
    transform = {aligned.R_z_WL, aligned.p_WL};
  } else {
    transform = umeyama_se3(gt_pos, est_pos);
  }

  TrajectoryRecord out;
  out.frame = "W";
  out.source = est.source;
  out.poses.reserve(est.poses.size());
  for (const auto& [t, pose] : est.poses) {
    out.poses.emplace_back(t, transform * pose);
  }
  return out;
}

Metrics evaluate(const TrajectoryRecord& est, const TrajectoryRecord& gt, AlignMode mode,
                 double max_dt) {
  const TrajectoryRecord aligned = align_for_eval(est, gt, mode);
  const auto pairs = associate_stamps(gt, aligned, max_dt);
  Metrics m;
  m.ate_p_m = ate_position(pairs);
  m.ate_r_deg = ate_rotation(pairs);
  m.n_pairs = static_cast<int>(pairs.size());
  m.alignment = mode;
  return m;
}

}  // namespace evaluation
}  // namespace twinvio
