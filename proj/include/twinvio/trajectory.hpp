#pragma once

#include <vector>

#include "twinvio/geometry.hpp"

namespace twinvio {

// Natural cubic spline through (t, value) knots; C2 with analytic
// derivatives. Evaluation is restricted to [t_front, t_back].
class CubicSpline {
 public:
  CubicSpline() = default;
  CubicSpline(std::vector<double> times, std::vector<double> values);

  double value(double t) const;
  double derivative(double t) const;
  double second_derivative(double t) const;

 private:
  int segment(double t) const;

  std::vector<double> times_;
  std::vector<double> values_;
  std::vector<double> second_;  // second derivative at each knot
};

struct Waypoint {
  double t = 0.0;
  Vec3 position = Vec3::Zero();
  double yaw = 0.0;  // radians, continuous (not wrapped)
};

// Position + yaw spline trajectory; attitude is yaw-only about +z.
class Trajectory {
 public:
  explicit Trajectory(const std::vector<Waypoint>& waypoints);

  double duration() const { return duration_; }
  Vec3 position(double t) const;
  Vec3 velocity(double t) const;
  Vec3 acceleration(double t) const;
  double yaw(double t) const;
  double yaw_rate(double t) const;
  Mat3 rotation_wb(double t) const { return yaw_rotation(yaw(t)); }
  Pose pose_wb(double t) const { return {rotation_wb(t), position(t)}; }

  // Polyline length sampled at dt.
  double path_length(double dt = 0.05) const;

 private:
  CubicSpline x_, y_, z_, yaw_;
  double duration_ = 0.0;
};

}  // namespace twinvio
