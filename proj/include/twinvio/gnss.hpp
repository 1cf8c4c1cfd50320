#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "twinvio/spatial_index.hpp"
#include "twinvio/trajectory.hpp"

namespace twinvio {
namespace gnss {

// GPS orbital radius; satellites are static over a run.
constexpr double kSatelliteRange = 26560e3;

struct Constellation {
  std::vector<Vec3> satellites;  // ENU positions, meters
};

// Fixed azimuth/elevation lattice (golden-angle azimuths, elevations with
// uniform sine spacing between 15 and 80 deg).
Constellation make_constellation(int n_sats = 12);

// Satellite visible iff above the mask angle and the ray toward it is
// unobstructed by the twin.
std::vector<int> visible_satellites(const Vec3& pos, const Constellation& constellation,
                                    const SpatialIndex& twin, double mask_deg = 10.0);

struct TrainingSets {
  std::vector<std::pair<double, double>> count_by_height;      // (height, visible count)
  std::vector<std::pair<double, double>> multipath_by_height;  // (height, excess path m)
};

// Random free-space positions in the scene; per sample, the visible count
// and the one-bounce specular excess path for each blocked satellite.
TrainingSets build_training_sets(const TwinMesh& mesh, const SpatialIndex& twin,
                                 const Constellation& constellation, int n_samples,
                                 std::uint64_t seed, double mask_deg = 10.0);

// Single specular reflection excess path length for a blocked satellite,
// using mirror images across near-vertical faces. Returns 0 when no valid
// reflection exists.
double specular_excess_path(const Vec3& receiver, const Vec3& satellite, const TwinMesh& mesh,
                            const SpatialIndex& twin, double max_wall_distance = 120.0);

struct GpHyper {
  double length_scale = 15.0;  // meters
  double signal_var = 9.0;
  double noise_var = 1.0;
};

// Exact Gaussian-process posterior with a squared-exponential kernel and
// fixed hyperparameters.
class SatCountGp {
 public:
  SatCountGp() = default;
  SatCountGp(std::vector<double> heights, std::vector<double> counts, GpHyper hyper);

  // (posterior mean, posterior variance)
  std::pair<double, double> predict(double height) const;

  const std::vector<double>& heights() const { return heights_; }
  const std::vector<double>& counts() const { return counts_; }
  const GpHyper& hyper() const { return hyper_; }
  double prior_mean() const { return prior_mean_; }

 private:
  std::vector<double> heights_;
  std::vector<double> counts_;
  GpHyper hyper_;
  double prior_mean_ = 0.0;
  Eigen::LLT<MatX> chol_;
  VecX alpha_;
};

struct GmmComponent {
  double weight = 1.0;
  double mean = 0.0;
  double var = 1.0;
};

struct Gmm1d {
  std::vector<GmmComponent> components;
  double log_likelihood = 0.0;
  int iterations = 0;
};

// EM with k-means++ initialization, at most 200 iterations. Throws if a
// component variance collapses below 1e-6.
Gmm1d fit_gmm(const std::vector<double>& samples, int k, std::uint64_t seed);

double sample_gmm(const Gmm1d& gmm, std::mt19937_64& rng);

// Height-binned multipath model. Bins with (near-)constant samples store a
// single floor-variance component; empty bins mean no multipath.
struct MultipathModel {
  std::vector<double> bin_edges;  // ascending, bins are [e_i, e_{i+1})
  std::vector<Gmm1d> bins;        // empty components => zero multipath

  const Gmm1d* bin_for_height(double height) const;
  double sample(double height, std::mt19937_64& rng) const;
};

MultipathModel fit_multipath_model(const std::vector<std::pair<double, double>>& pairs, int k,
                                   std::vector<double> bin_edges, std::uint64_t seed);

struct TrilaterationResult {
  Vec3 position = Vec3::Zero();
  Mat3 covariance = Mat3::Identity();
  double clock_bias = 0.0;
  int iterations = 0;
};

// Gauss-Newton on range residuals rho_i = |s_i - p| + b; position block of
// sigma^2 (J^T J)^-1 as covariance. Throws on rank-deficient geometry or
// non-convergence.
TrilaterationResult trilaterate(const std::vector<Vec3>& satellites,
                                const std::vector<double>& pseudoranges, double sigma_rho,
                                const Vec3& init = Vec3::Zero());

struct GpsFix {
  double t = 0.0;
  Vec3 position = Vec3::Zero();
  Mat3 covariance = Mat3::Identity();
  int n_sats = 0;
};

struct FixStreamConfig {
  double rate = 5.0;  // Hz
  double mask_deg = 10.0;
  double sigma_rho = 1.5;  // pseudorange thermal noise, meters
  bool enable_multipath = true;
  bool enable_noise = true;
};

// 5 Hz fix stream: per epoch, ray-cast visibility, per-satellite
// pseudoranges with GMM multipath and thermal noise, then trilateration.
// Epochs with fewer than 4 visible satellites emit no fix.
std::vector<GpsFix> generate_fix_stream(const Trajectory& traj,
                                        const Constellation& constellation,
                                        const SpatialIndex& twin,
                                        const MultipathModel* multipath,
                                        const FixStreamConfig& config, std::uint64_t seed);

}  // namespace gnss
}  // namespace twinvio
