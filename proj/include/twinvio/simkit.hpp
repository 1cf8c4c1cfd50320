#pragma once

#include <cstdint>
#include <vector>

#include "twinvio/mesh.hpp"
#include "twinvio/spatial_index.hpp"
#include "twinvio/trajectory.hpp"

namespace twinvio {

inline const Vec3 kGravityW(0.0, 0.0, -9.81);

// Axis-aligned box city on a ground plane, centered on the origin.
struct CityParams {
  int blocks_x = 3;
  int blocks_y = 3;
  double building_size_x = 20.0;  // footprint, meters
  double building_size_y = 20.0;
  double street_width = 15.0;
  double height_min = 20.0;
  double height_max = 40.0;
  double ground_margin = 30.0;  // ground plane beyond the outer blocks
};
TwinMesh generate_city(const CityParams& params, std::uint64_t seed);

struct ImuSample {
  double t = 0.0;
  Vec3 gyro = Vec3::Zero();   // rad/s, body frame
  Vec3 accel = Vec3::Zero();  // m/s^2, body frame (specific force)
};

struct ImuNoise {
  double gyro_noise_density = 1.7e-4;   // rad/s/sqrt(Hz)
  double accel_noise_density = 2.0e-3;  // m/s^2/sqrt(Hz)
  double gyro_bias_walk = 1.9e-5;       // rad/s/sqrt(s)... random-walk density
  double accel_bias_walk = 3.0e-3;
  Vec3 initial_gyro_bias = Vec3::Zero();
  Vec3 initial_accel_bias = Vec3::Zero();
};

// Body-frame IMU stream consistent with the trajectory derivatives.
// accel = R_WB^T (a_W - g_W) + b_a + n_a, gyro = (0,0,yaw_rate) + b_g + n_g.
std::vector<ImuSample> synthesize_imu(const Trajectory& traj, double rate,
                                      const ImuNoise& noise, std::uint64_t seed);

struct CameraConfig {
  double fx = 320.0;
  double fy = 320.0;
  double cx = 320.0;
  double cy = 240.0;
  int width = 640;
  int height = 480;
  double rate = 20.0;      // Hz, <= 30
  double min_depth = 0.3;  // meters
  double max_depth = 90.0;
  Pose T_BC;  // camera in body; camera z forward, x right, y down
};

Vec2 project_pinhole(const CameraConfig& cam, const Vec3& p_camera);

struct LandmarkPoint {
  int id = -1;
  Vec3 position;  // world frame
  Vec3 normal;
};

struct Observation {
  int landmark_id = -1;
  Vec2 pixel;
};

struct FrameObservations {
  double t = 0.0;
  int frame_id = 0;
  std::vector<Observation> observations;
};

// Ground-truth data association: landmark visible iff in front of the
// camera, inside the frustum, front-facing, and unoccluded per ray cast
// against the twin. Pixel noise is N(0, sigma^2) per axis; observations
// whose noisy pixel leaves the image are dropped.
std::vector<FrameObservations> synthesize_observations(
    const Trajectory& traj, const std::vector<LandmarkPoint>& landmarks,
    const CameraConfig& camera, const SpatialIndex& twin, double pixel_sigma,
    std::uint64_t seed, int max_obs_per_frame = 0);

// Landmark set for a run: fixed surface sample of the twin with persistent ids.
std::vector<LandmarkPoint> landmarks_from_surface(const TwinMesh& mesh, double density,
                                                  std::uint64_t seed);

}  // namespace twinvio
