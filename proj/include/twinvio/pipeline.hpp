#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "twinvio/alignment.hpp"
#include "twinvio/estimator.hpp"
#include "twinvio/evaluation.hpp"
#include "twinvio/gnss.hpp"
#include "twinvio/registration.hpp"

namespace twinvio {
namespace pipeline {

enum class Mode { kVioOnly, kVioGps, kVioTwin };
Mode parse_mode(const std::string& name);
std::string mode_name(Mode mode);

struct SceneConfig {
  std::string mesh_path;  // non-empty overrides the generated city
  CityParams city;
};

struct SensorConfig {
  SensorConfig();  // installs the forward-looking camera mount (camera z = body x)
  double imu_rate = 200.0;
  ImuNoise imu_noise;
  CameraConfig camera;
  double pixel_sigma = 1.0;
  int max_obs_per_frame = 60;
  double landmark_density = 0.03;  // per m^2 of twin surface
};

struct GnssSimConfig {
  int n_sats = 12;
  double mask_deg = 10.0;
  double sigma_rho = 1.5;
  double rate = 5.0;
  int training_samples = 400;
  int gmm_components = 2;
  std::vector<double> bin_edges = {0.0, 5.0, 10.0, 20.0, 40.0};
  bool enable_multipath = true;
  bool enable_noise = true;
};

struct RunConfig {
  int keyframe_stride = 4;  // camera frames per keyframe
  double crop_half_extent = 75.0;
  double epsilon_deg = 1.0;       // alignment heading-std threshold
  int alignment_min_pairs = 20;
  double alignment_min_spread_m = 10.0;  // phase-2 pair spread before refit
  registration::IcpConfig icp;    // carries beta and the gate schedule
  EstimatorConfig estimator;
  double gps_sigma_scale = 1.0;
  double gps_gate_chi2 = 16.27;        // 3-dof chi-square innovation gate (99.9%)
  double gps_align_sigma_max = 12.0;   // skip fixes above this claimed sigma when aligning
  // Registration plausibility gates, two tiers. While the alignment is still
  // GPS-grade the genuine correction includes the bootstrap alignment error
  // (several meters), so the boot gates must admit it; they stay below the
  // street width so a fit snapped to the wrong wall is still rejected. Once
  // the phase-2 alignment has converged corrections shrink to VIO drift and
  // the tight gates take over.
  double reg_max_correction_m = 3.5;
  double reg_max_correction_deg = 4.0;
  double reg_max_correction_boot_m = 9.0;
  double reg_max_correction_boot_deg = 8.0;
  double reg_landmark_sigma_max = 1.0;  // worst-direction sigma cap for source landmarks
  double reg_noise_floor_m = 0.3;       // map-factor sigma floor, translation
  double reg_noise_floor_deg = 2.0;     // map-factor sigma floor, rotation
  // Acceptance hygiene. A fit that sheds more than a sliver of its cloud has
  // usually traded real points for a better-looking wrong plane, and a cloud
  // whose median range is far ahead sees walls at grazing incidence where
  // parallel-street aliases live. Degenerate fits get a laxer fraction: they
  // attach position-only, so shedding at occlusion boundaries (normal at
  // corners) is not the same hazard as a full-pose fit swapping walls.
  double reg_min_inlier_fraction = 0.85;
  double reg_min_inlier_fraction_degen = 0.70;
  double reg_max_median_range_m = 20.0;
  // Attach at most one registration every this many keyframes: a burst of
  // consecutive factors acts like a position ramp and trains the window's
  // velocity and bias states, which then overshoot when the burst ends.
  int reg_attach_stride = 1;
  // Skip attempts while turning: feature churn and occlusion make the cloud
  // unreliable exactly when the heading sweeps, and a straight-street run
  // never comes close to a corner's yaw rate.
  double reg_max_yaw_rate_dps = 15.0;
  bool fixed_isotropic_weight = false;  // ablation: trace-matched isotropic W_m
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  Mode mode = Mode::kVioTwin;
  SceneConfig scene;
  std::vector<Waypoint> waypoints;
  SensorConfig sensors;
  GnssSimConfig gnss;
  RunConfig run;
};

// JSON round trip; load throws with the offending field path on bad input.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& config);

// Learned GNSS degradation models plus their training data.
struct GnssModels {
  gnss::Constellation constellation;
  gnss::SatCountGp sat_count_gp;
  gnss::MultipathModel multipath;
  gnss::TrainingSets training;
};
GnssModels fit_gnss_models(const TwinMesh& mesh, const GnssSimConfig& config, std::uint64_t seed);
void write_gnss_models(const std::string& path, const GnssModels& models);

// Fully materialized scenario.
struct Bundle {
  TwinMesh mesh;
  std::vector<std::pair<double, Pose>> ground_truth;  // T_WB at camera times
  std::vector<ImuSample> imu;
  std::vector<FrameObservations> observations;
  std::vector<LandmarkPoint> landmarks;
  std::vector<gnss::GpsFix> fixes;
  GnssModels models;
  CameraConfig camera;
  double imu_rate = 200.0;
  ImuNoise imu_noise;
  Vec3 p0 = Vec3::Zero();  // ground-truth T_WL and initial velocity
  double yaw0 = 0.0;
  Vec3 v0_w = Vec3::Zero();
  double path_length = 0.0;
};

Bundle simulate(const ExperimentConfig& config);
void write_bundle(const std::string& dir, const Bundle& bundle, const ExperimentConfig& config);
Bundle load_bundle(const std::string& dir);
ExperimentConfig load_bundle_config(const std::string& dir);

struct RunResult {
  evaluation::TrajectoryRecord estimate_l;                   // frame L
  std::optional<evaluation::TrajectoryRecord> estimate_w;    // via final alignment
  std::vector<KeyframeDiagnostics> diagnostics;
  std::vector<registration::RegistrationLogEntry> registration_log;
  std::vector<alignment::AlignmentLogEntry> alignment_log;
  alignment::AlignmentEstimate final_alignment;
  bool aligned = false;
  int registration_attempts = 0;
  int registration_converged = 0;
};

struct RunOptions {
  Mode mode = Mode::kVioTwin;
  bool deterministic = true;  // registration inline instead of one keyframe late
  bool trace = false;         // log fusion events to stderr
};

RunResult run_pipeline(const Bundle& bundle, const ExperimentConfig& config,
                       const RunOptions& options);
void write_run_outputs(const std::string& dir, const RunResult& result);

// Ground-truth record in W at keyframe cadence, for evaluation.
evaluation::TrajectoryRecord ground_truth_record(const Bundle& bundle);

// Benchmark scenarios shared by the bench command and the acceptance suite.
ExperimentConfig canyon_benchmark_config(std::uint64_t seed);
ExperimentConfig facade_benchmark_config(std::uint64_t seed);

struct BenchCell {
  std::string scenario;
  std::string mode;  // includes the ablation tag
  std::uint64_t seed = 0;
  evaluation::Metrics metrics;
  int registration_attempts = 0;
  int registration_converged = 0;
};

// Runs the benchmark grid (canyon: vio-twin vs vio-gps; facade: adaptive vs
// isotropic weighting) over the given seeds and writes metrics JSON files
// under out_dir. Deterministic per (config, seed).
std::vector<BenchCell> run_bench(const std::string& out_dir, const std::vector<std::uint64_t>& seeds);
std::string bench_summary(const std::vector<BenchCell>& cells);

}  // namespace pipeline
}  // namespace twinvio
