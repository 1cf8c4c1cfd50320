#include "twinvio/simkit.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace twinvio {

namespace {

void add_box(TwinMesh& mesh, const Vec3& lo, const Vec3& hi) {
  const int base = static_cast<int>(mesh.vertices.size());
  // 8 corners, bit k of the index selects hi/lo per axis (x=1, y=2, z=4).
  for (int k = 0; k < 8; ++k) {
    mesh.vertices.emplace_back(k & 1 ? hi.x() : lo.x(), k & 2 ? hi.y() : lo.y(),
                               k & 4 ? hi.z() : lo.z());
  }
  // Outward-facing winding per face.
  const std::array<std::array<int, 4>, 6> faces = {{
      {0, 2, 3, 1},  // bottom (-z)
      {4, 5, 7, 6},  // top (+z)
      {0, 1, 5, 4},  // -y
      {2, 6, 7, 3},  // +y
      {0, 4, 6, 2},  // -x
      {1, 3, 7, 5},  // +x
  }};
  for (const auto& f : faces) {
    mesh.triangles.push_back({base + f[0], base + f[1], base + f[2]});
    mesh.triangles.push_back({base + f[0], base + f[2], base + f[3]});
  }
}

void compute_normals(TwinMesh& mesh) {
  mesh.face_normals.clear();
  mesh.face_normals.reserve(mesh.triangles.size());
  for (const auto& t : mesh.triangles) {
    const Vec3 n = (mesh.vertices[t[1]] - mesh.vertices[t[0]])
                       .cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]);
    mesh.face_normals.push_back(n.normalized());
  }
}

}  // namespace

TwinMesh generate_city(const CityParams& params, std::uint64_t seed) {
  if (params.blocks_x <= 0 || params.blocks_y <= 0 || params.building_size_x <= 0.0 ||
      params.building_size_y <= 0.0 || params.street_width < 0.0) {
    throw std::runtime_error("generate_city: dimensions must be positive");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> height_dist(params.height_min, params.height_max);

  const double pitch_x = params.building_size_x + params.street_width;
  const double pitch_y = params.building_size_y + params.street_width;
  const double span_x = params.blocks_x * pitch_x - params.street_width;
  const double span_y = params.blocks_y * pitch_y - params.street_width;
  const Vec3 origin(-0.5 * span_x, -0.5 * span_y, 0.0);

  TwinMesh mesh;
  const double gx0 = origin.x() - params.ground_margin;
  const double gy0 = origin.y() - params.ground_margin;
  const double gx1 = origin.x() + span_x + params.ground_margin;
  const double gy1 = origin.y() + span_y + params.ground_margin;
  const int g = static_cast<int>(mesh.vertices.size());
  mesh.vertices.emplace_back(gx0, gy0, 0.0);
  mesh.vertices.emplace_back(gx1, gy0, 0.0);
  mesh.vertices.emplace_back(gx1, gy1, 0.0);
  mesh.vertices.emplace_back(gx0, gy1, 0.0);
  mesh.triangles.push_back({g, g + 1, g + 2});
  mesh.triangles.push_back({g, g + 2, g + 3});

  for (int i = 0; i < params.blocks_x; ++i) {
    for (int j = 0; j < params.blocks_y; ++j) {
      const double h = height_dist(rng);
      const Vec3 lo = origin + Vec3(i * pitch_x, j * pitch_y, 0.0);
      const Vec3 hi = lo + Vec3(params.building_size_x, params.building_size_y, h);
      add_box(mesh, lo, hi);
    }
  }
  compute_normals(mesh);
  return mesh;
}

std::vector<ImuSample> synthesize_imu(const Trajectory& traj, double rate,
                                      const ImuNoise& noise, std::uint64_t seed) {
  if (rate < 50.0) throw std::runtime_error("synthesize_imu: rate must be >= 50 Hz");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> randn(0.0, 1.0);
  const double dt = 1.0 / rate;
  const double gyro_sigma = noise.gyro_noise_density * std::sqrt(rate);
  const double accel_sigma = noise.accel_noise_density * std::sqrt(rate);
  const double gyro_walk_step = noise.gyro_bias_walk * std::sqrt(dt);
  const double accel_walk_step = noise.accel_bias_walk * std::sqrt(dt);

  Vec3 bg = noise.initial_gyro_bias;
  Vec3 ba = noise.initial_accel_bias;
  std::vector<ImuSample> out;
  const int n = static_cast<int>(traj.duration() * rate) + 1;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    const double t = std::min(k * dt, traj.duration());
    const Mat3 r_wb = traj.rotation_wb(t);
    ImuSample s;
    s.t = t;
    s.gyro = Vec3(0.0, 0.0, traj.yaw_rate(t)) + bg;
    s.accel = r_wb.transpose() * (traj.acceleration(t) - kGravityW) + ba;
    for (int i = 0; i < 3; ++i) {
      s.gyro[i] += gyro_sigma * randn(rng);
      s.accel[i] += accel_sigma * randn(rng);
    }
    out.push_back(s);
    for (int i = 0; i < 3; ++i) {
      bg[i] += gyro_walk_step * randn(rng);
      ba[i] += accel_walk_step * randn(rng);
    }
  }
  return out;
}

Vec2 project_pinhole(const CameraConfig& cam, const Vec3& p) {
  return {cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy};
}

std::vector<LandmarkPoint> landmarks_from_surface(const TwinMesh& mesh, double density,
                                                  std::uint64_t seed) {
  const auto samples = sample_surface(mesh, density, seed);
  std::vector<LandmarkPoint> out;
  out.reserve(samples.size());
  int id = 0;
  for (const auto& s : samples) {
    out.push_back({id++, s.point, s.normal});
  }
  return out;
}

std::vector<FrameObservations> synthesize_observations(
    const Trajectory& traj, const std::vector<LandmarkPoint>& landmarks,
    const CameraConfig& camera, const SpatialIndex& twin, double pixel_sigma,
    std::uint64_t seed, int max_obs_per_frame) {
  if (camera.rate > 30.0) throw std::runtime_error("synthesize_observations: rate must be <= 30 Hz");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> randn(0.0, 1.0);

  std::vector<FrameObservations> frames;
  const double dt = 1.0 / camera.rate;
  const int n = static_cast<int>(traj.duration() * camera.rate) + 1;
  frames.reserve(n);
  for (int k = 0; k < n; ++k) {
    const double t = std::min(k * dt, traj.duration());
    const Pose t_wc = traj.pose_wb(t) * camera.T_BC;
    const Pose t_cw = t_wc.inverse();
    FrameObservations frame;
    frame.t = t;
    frame.frame_id = k;

    struct Candidate {
      int landmark_id;
      Vec2 pixel;
      double depth;
    };
    std::vector<Candidate> candidates;
    for (const auto& lm : landmarks) {
      const Vec3 p_c = t_cw * lm.position;
      if (p_c.z() < camera.min_depth || p_c.z() > camera.max_depth) continue;
      const Vec2 px = project_pinhole(camera, p_c);
      if (px.x() < 0.0 || px.x() > camera.width - 1 || px.y() < 0.0 ||
          px.y() > camera.height - 1) {
        continue;
      }
      const Vec3 to_cam = t_wc.translation - lm.position;
      if (lm.normal.dot(to_cam) <= 0.0) continue;  // back-facing surface
      const double dist = to_cam.norm();
      const auto hit = twin.ray_cast(t_wc.translation, -to_cam / dist);
      // The landmark sits on the mesh, so the ray legitimately hits its own
      // triangle at ~dist; anything clearly closer is an occluder.
      if (hit && hit->t < dist - 0.05) continue;
      candidates.push_back({lm.id, px, p_c.z()});
    }
    if (max_obs_per_frame > 0 && static_cast<int>(candidates.size()) > max_obs_per_frame) {
      std::nth_element(candidates.begin(), candidates.begin() + max_obs_per_frame,
                       candidates.end(),
                       [](const Candidate& a, const Candidate& b) { return a.depth < b.depth; });
      candidates.resize(max_obs_per_frame);
      std::sort(candidates.begin(), candidates.end(),
                [](const Candidate& a, const Candidate& b) { return a.landmark_id < b.landmark_id; });
    }
    for (const auto& c : candidates) {
      Vec2 px = c.pixel;
      if (pixel_sigma > 0.0) {
        px.x() += pixel_sigma * randn(rng);
        px.y() += pixel_sigma * randn(rng);
      }
      if (px.x() < 0.0 || px.x() > camera.width - 1 || px.y() < 0.0 ||
          px.y() > camera.height - 1) {
        continue;
      }
      frame.observations.push_back({c.landmark_id, px});
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

}  // namespace twinvio
