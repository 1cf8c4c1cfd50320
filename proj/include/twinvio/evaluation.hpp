#pragma once

#include <string>
#include <utility>
#include <vector>

#include "twinvio/geometry.hpp"

namespace twinvio {
namespace evaluation {

struct TrajectoryRecord {
  std::vector<std::pair<double, Pose>> poses;  // strictly increasing t
  std::string frame = "W";                     // "L" or "W"
  std::string source;
};

// CSV: t, x, y, z, qw, qx, qy, qz, frame.
TrajectoryRecord load_trajectory_csv(const std::string& path);
void save_trajectory_csv(const std::string& path, const TrajectoryRecord& record);

// Nearest-neighbor stamp pairing within max_dt; unmatched poses dropped.
// Throws when no pair survives.
std::vector<std::pair<Pose, Pose>> associate_stamps(const TrajectoryRecord& a,
                                                    const TrajectoryRecord& b,
                                                    double max_dt = 0.02);

// Root-mean-square position error over pairs, meters.
double ate_position(const std::vector<std::pair<Pose, Pose>>& pairs);

// Root-mean-square rotation error over pairs, degrees.
double ate_rotation(const std::vector<std::pair<Pose, Pose>>& pairs);

enum class AlignMode { kNone, kYaw4Dof, kSe3 };

AlignMode parse_align_mode(const std::string& name);
std::string align_mode_name(AlignMode mode);

// Aligns the estimate onto the ground-truth frame before computing ATE.
// kNone passes through (the system already estimates W); kYaw4Dof solves
// yaw + translation; kSe3 the full rotation + translation (no scale).
TrajectoryRecord align_for_eval(const TrajectoryRecord& est, const TrajectoryRecord& gt,
                                AlignMode mode);

struct Metrics {
  double ate_p_m = 0.0;
  double ate_r_deg = 0.0;
  int n_pairs = 0;
  AlignMode alignment = AlignMode::kNone;
};

Metrics evaluate(const TrajectoryRecord& est, const TrajectoryRecord& gt, AlignMode mode,
                 double max_dt = 0.02);

}  // namespace evaluation
}  // namespace twinvio
