#include "twinvio/trajectory.hpp"

#include <algorithm>
#include <stdexcept>

namespace twinvio {

CubicSpline::CubicSpline(std::vector<double> times, std::vector<double> values)
    : times_(std::move(times)), values_(std::move(values)) {
  const int n = static_cast<int>(times_.size());
  if (n < 2 || values_.size() != times_.size()) {
    throw std::runtime_error("CubicSpline: need >= 2 knots");
  }
  for (int i = 1; i < n; ++i) {
    if (times_[i] <= times_[i - 1]) {
      throw std::runtime_error("CubicSpline: knot times must be strictly increasing");
    }
  }
  // Natural spline: tridiagonal solve for knot second derivatives
  // (Thomas algorithm), zero curvature at the ends.
  second_.assign(n, 0.0);
  if (n == 2) return;
  std::vector<double> diag(n, 0.0), rhs(n, 0.0), upper(n, 0.0);
  diag[0] = 1.0;
  for (int i = 1; i < n - 1; ++i) {
    const double h0 = times_[i] - times_[i - 1];
    const double h1 = times_[i + 1] - times_[i];
    const double lower = h0 / (h0 + h1);
    upper[i] = h1 / (h0 + h1);
    rhs[i] = 6.0 / (h0 + h1) *
             ((values_[i + 1] - values_[i]) / h1 - (values_[i] - values_[i - 1]) / h0);
    diag[i] = 2.0;
    // forward elimination; M_0 = 0 so row 1 has nothing to eliminate
    const double w = (i == 1) ? 0.0 : lower / diag[i - 1];
    diag[i] -= w * upper[i - 1];
    rhs[i] -= w * rhs[i - 1];
  }
  for (int i = n - 2; i >= 1; --i) {
    second_[i] = (rhs[i] - upper[i] * second_[i + 1]) / diag[i];
  }
}

int CubicSpline::segment(double t) const {
  if (t < times_.front() - 1e-9 || t > times_.back() + 1e-9) {
    throw std::runtime_error("CubicSpline: evaluation outside knot range");
  }
  const auto it = std::upper_bound(times_.begin(), times_.end(), t);
  int idx = static_cast<int>(it - times_.begin()) - 1;
  return std::clamp(idx, 0, static_cast<int>(times_.size()) - 2);
}

double CubicSpline::value(double t) const {
  const int i = segment(t);
  const double h = times_[i + 1] - times_[i];
  const double a = (times_[i + 1] - t) / h;
  const double b = (t - times_[i]) / h;
  return a * values_[i] + b * values_[i + 1] +
         ((a * a * a - a) * second_[i] + (b * b * b - b) * second_[i + 1]) * h * h / 6.0;
}

double CubicSpline::derivative(double t) const {
  const int i = segment(t);
  const double h = times_[i + 1] - times_[i];
  const double a = (times_[i + 1] - t) / h;
  const double b = (t - times_[i]) / h;
  return (values_[i + 1] - values_[i]) / h +
         ((3.0 * b * b - 1.0) * second_[i + 1] - (3.0 * a * a - 1.0) * second_[i]) * h / 6.0;
}

double CubicSpline::second_derivative(double t) const {
  const int i = segment(t);
  const double h = times_[i + 1] - times_[i];
  const double a = (times_[i + 1] - t) / h;
  const double b = (t - times_[i]) / h;
  return a * second_[i] + b * second_[i + 1];
}

Trajectory::Trajectory(const std::vector<Waypoint>& waypoints) {
  if (waypoints.size() < 2) throw std::runtime_error("Trajectory: need >= 2 waypoints");
  std::vector<double> t, x, y, z, yaw;
  for (const auto& w : waypoints) {
    t.push_back(w.t);
    x.push_back(w.position.x());
    y.push_back(w.position.y());
    z.push_back(w.position.z());
    yaw.push_back(w.yaw);
  }
  if (t.front() != 0.0) throw std::runtime_error("Trajectory: first waypoint must be at t = 0");
  x_ = CubicSpline(t, x);
  y_ = CubicSpline(t, y);
  z_ = CubicSpline(t, z);
  yaw_ = CubicSpline(t, yaw);
  duration_ = t.back();
}

Vec3 Trajectory::position(double t) const {
  return {x_.value(t), y_.value(t), z_.value(t)};
}

Vec3 Trajectory::velocity(double t) const {
  return {x_.derivative(t), y_.derivative(t), z_.derivative(t)};
}

Vec3 Trajectory::acceleration(double t) const {
  return {x_.second_derivative(t), y_.second_derivative(t), z_.second_derivative(t)};
}

double Trajectory::yaw(double t) const { return yaw_.value(t); }
double Trajectory::yaw_rate(double t) const { return yaw_.derivative(t); }

double Trajectory::path_length(double dt) const {
  double len = 0.0;
  Vec3 prev = position(0.0);
  for (double t = dt; t < duration_ + 0.5 * dt; t += dt) {
    const Vec3 p = position(std::min(t, duration_));
    len += (p - prev).norm();
    prev = p;
  }
  return len;
}

}  // namespace twinvio
