#include "twinvio/gnss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include "twinvio/random_util.hpp"

namespace twinvio {
namespace gnss {

namespace {

constexpr double kGoldenAngle = 2.399963229728653;

double sq(double x) { return x * x; }

bool position_inside_building(const SpatialIndex& twin, const Vec3& pos) {
  // Buildings are watertight boxes with outward normals: an upward ray that
  // hits a back face means the position is inside a volume.
  const auto hit = twin.ray_cast(pos, Vec3::UnitZ());
  return hit && hit->normal.z() > 0.5;
}

}  // namespace

Constellation make_constellation(int n_sats) {
  if (n_sats < 4) throw std::runtime_error("make_constellation: need >= 4 satellites");
  Constellation c;
  const double s_lo = std::sin(deg2rad(15.0));
  const double s_hi = std::sin(deg2rad(80.0));
  for (int i = 0; i < n_sats; ++i) {
    const double s = s_lo + (s_hi - s_lo) * (i + 0.5) / n_sats;
    const double el = std::asin(s);
    const double az = i * kGoldenAngle;
    const Vec3 dir(std::cos(el) * std::sin(az), std::cos(el) * std::cos(az), std::sin(el));
    c.satellites.push_back(kSatelliteRange * dir);
  }
  return c;
}

std::vector<int> visible_satellites(const Vec3& pos, const Constellation& constellation,
                                    const SpatialIndex& twin, double mask_deg) {
  std::vector<int> visible;
  for (size_t i = 0; i < constellation.satellites.size(); ++i) {
    const Vec3 to_sat = constellation.satellites[i] - pos;
    const Vec3 dir = to_sat.normalized();
    const double elevation = std::asin(std::clamp(dir.z(), -1.0, 1.0));
    if (elevation <= deg2rad(mask_deg)) continue;
    const auto hit = twin.ray_cast(pos, dir);
    if (!hit) visible.push_back(static_cast<int>(i));
  }
  return visible;
}

double specular_excess_path(const Vec3& receiver, const Vec3& satellite, const TwinMesh& mesh,
                            const SpatialIndex& twin, double max_wall_distance) {
  double best_excess = 0.0;
  double best_wall_dist = std::numeric_limits<double>::infinity();
  const double direct = (satellite - receiver).norm();

  for (size_t i = 0; i < mesh.triangles.size(); ++i) {
    const Vec3& n = mesh.face_normals[i];
    if (std::abs(n.z()) > 0.3) continue;  // facades only
    const auto& t = mesh.triangles[i];
    const Vec3& v0 = mesh.vertices[t[0]];
    const Vec3 centroid = (v0 + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0;
    if ((centroid - receiver).head<2>().norm() > max_wall_distance) continue;

    // Receiver and satellite must face the wall's front side.
    const double d_recv = n.dot(receiver - v0);
    if (d_recv <= 0.0) continue;
    if (n.dot(satellite - v0) <= 0.0) continue;

    // Mirror the receiver across the wall plane; the specular point is
    // where the image-to-satellite segment crosses the face.
    const Vec3 image = receiver - 2.0 * d_recv * n;
    const Vec3 seg = satellite - image;
    const double denom = n.dot(seg);
    if (std::abs(denom) < 1e-12) continue;
    const double u = n.dot(v0 - image) / denom;
    if (u <= 0.0 || u >= 1.0) continue;
    const Vec3 w = image + u * seg;

    // Barycentric containment test in the wall plane.
    const Vec3 e0 = mesh.vertices[t[1]] - v0;
    const Vec3 e1 = mesh.vertices[t[2]] - v0;
    const Vec3 e2 = w - v0;
    const double d00 = e0.dot(e0), d01 = e0.dot(e1), d11 = e1.dot(e1);
    const double d20 = e2.dot(e0), d21 = e2.dot(e1);
    const double det = d00 * d11 - d01 * d01;
    if (std::abs(det) < 1e-12) continue;
    const double bv = (d11 * d20 - d01 * d21) / det;
    const double bw = (d00 * d21 - d01 * d20) / det;
    if (bv < 0.0 || bw < 0.0 || bv + bw > 1.0) continue;

    const double wall_dist = (w - receiver).norm();
    if (wall_dist >= best_wall_dist) continue;

    // Both legs of the bounce must be unobstructed.
    const Vec3 to_w = (w - receiver) / wall_dist;
    const auto leg1 = twin.ray_cast(receiver, to_w);
    if (leg1 && leg1->t < wall_dist - 1e-4) continue;
    const Vec3 w_off = w + 1e-4 * n;
    const auto leg2 = twin.ray_cast(w_off, (satellite - w_off).normalized());
    if (leg2) continue;

    best_wall_dist = wall_dist;
    best_excess = (satellite - w).norm() + wall_dist - direct;
  }
  return std::max(best_excess, 0.0);
}

TrainingSets build_training_sets(const TwinMesh& mesh, const SpatialIndex& twin,
                                 const Constellation& constellation, int n_samples,
                                 std::uint64_t seed, double mask_deg) {
  if (n_samples < 100) throw std::runtime_error("build_training_sets: need >= 100 samples");
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(lo.x(), hi.x());
  std::uniform_real_distribution<double> uy(lo.y(), hi.y());
  std::uniform_real_distribution<double> uz(0.5, hi.z() + 40.0);

  TrainingSets sets;
  int accepted = 0;
  int guard = 0;
  while (accepted < n_samples && guard < 100 * n_samples) {
    ++guard;
    const Vec3 pos(ux(rng), uy(rng), uz(rng));
    if (position_inside_building(twin, pos)) continue;
    ++accepted;
    int count = 0;
    for (size_t i = 0; i < constellation.satellites.size(); ++i) {
      const Vec3 dir = (constellation.satellites[i] - pos).normalized();
      const double elevation = std::asin(std::clamp(dir.z(), -1.0, 1.0));
      if (elevation <= deg2rad(mask_deg)) continue;
      const auto hit = twin.ray_cast(pos, dir);
      if (!hit) {
        ++count;
      } else {
        // blocked satellites train the multipath model; only geometries with
        // an actual reflection contribute (no reflection means no signal)
        const double excess = specular_excess_path(pos, constellation.satellites[i], mesh, twin);
        if (excess > 0.0) sets.multipath_by_height.emplace_back(pos.z(), excess);
      }
    }
    sets.count_by_height.emplace_back(pos.z(), static_cast<double>(count));
  }
  if (accepted < n_samples) {
    throw std::runtime_error("build_training_sets: free-space sampling failed");
  }
  return sets;
}

SatCountGp::SatCountGp(std::vector<double> heights, std::vector<double> counts, GpHyper hyper)
    : heights_(std::move(heights)), counts_(std::move(counts)), hyper_(hyper) {
  const int n = static_cast<int>(heights_.size());
  if (n < 2 || counts_.size() != heights_.size()) {
    throw std::runtime_error("SatCountGp: need >= 2 training pairs");
  }
  if (hyper_.noise_var < 1e-12) {
    std::vector<double> sorted = heights_;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 1; i < n; ++i) {
      if (sorted[i] - sorted[i - 1] < 1e-12) {
        throw std::runtime_error("SatCountGp: duplicate heights with zero noise variance");
      }
    }
  }
  prior_mean_ = std::accumulate(counts_.begin(), counts_.end(), 0.0) / n;

  MatX k(n, n);
  const double inv2l2 = 1.0 / (2.0 * sq(hyper_.length_scale));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const double v = hyper_.signal_var * std::exp(-sq(heights_[i] - heights_[j]) * inv2l2);
      k(i, j) = v;
      k(j, i) = v;
    }
    k(i, i) += hyper_.noise_var + 1e-8;  // jitter
  }
  chol_ = k.llt();
  if (chol_.info() != Eigen::Success) {
    throw std::runtime_error("SatCountGp: kernel matrix is singular");
  }
  VecX y(n);
  for (int i = 0; i < n; ++i) y[i] = counts_[i] - prior_mean_;
  alpha_ = chol_.solve(y);
}

std::pair<double, double> SatCountGp::predict(double height) const {
  const int n = static_cast<int>(heights_.size());
  if (n == 0) throw std::runtime_error("SatCountGp: not fitted");
  VecX ks(n);
  const double inv2l2 = 1.0 / (2.0 * sq(hyper_.length_scale));
  for (int i = 0; i < n; ++i) {
    ks[i] = hyper_.signal_var * std::exp(-sq(height - heights_[i]) * inv2l2);
  }
  const double mean = prior_mean_ + ks.dot(alpha_);
  const VecX v = chol_.solve(ks);
  const double var = std::max(hyper_.signal_var - ks.dot(v), 0.0);
  return {mean, var};
}

namespace {

double gmm_log_likelihood(const std::vector<double>& xs, const std::vector<GmmComponent>& comps) {
  double ll = 0.0;
  for (double x : xs) {
    double p = 0.0;
    for (const auto& c : comps) {
      p += c.weight * std::exp(-0.5 * sq(x - c.mean) / c.var) / std::sqrt(2.0 * M_PI * c.var);
    }
    ll += std::log(std::max(p, 1e-300));
  }
  return ll;
}

}  // namespace

Gmm1d fit_gmm(const std::vector<double>& samples, int k, std::uint64_t seed) {
  if (k < 1) throw std::runtime_error("fit_gmm: k must be >= 1");
  const int n = static_cast<int>(samples.size());
  if (n < 10 * k) throw std::runtime_error("fit_gmm: need >= 10k samples");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // k-means++ seeding on the scalar samples.
  std::vector<double> centers;
  centers.push_back(samples[static_cast<size_t>(unit(rng) * n) % n]);
  while (static_cast<int>(centers.size()) < k) {
    std::vector<double> d2(n);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (double c : centers) best = std::min(best, sq(samples[i] - c));
      d2[i] = best;
      total += best;
    }
    if (total < 1e-30) {
      centers.push_back(centers.front());
      continue;
    }
    double pick = unit(rng) * total;
    int chosen = n - 1;
    for (int i = 0; i < n; ++i) {
      pick -= d2[i];
      if (pick <= 0.0) {
        chosen = i;
        break;
      }
    }
    centers.push_back(samples[chosen]);
  }

  // Initial parameters from the hard k-means assignment.
  Gmm1d gmm;
  gmm.components.resize(k);
  {
    std::vector<int> assign(n);
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = sq(samples[i] - centers[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      assign[i] = best;
    }
    const double global_mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
    double global_var = 0.0;
    for (double x : samples) global_var += sq(x - global_mean);
    global_var = std::max(global_var / n, 1e-4);
    for (int c = 0; c < k; ++c) {
      double wsum = 0.0, msum = 0.0;
      for (int i = 0; i < n; ++i) {
        if (assign[i] == c) {
          wsum += 1.0;
          msum += samples[i];
        }
      }
      auto& comp = gmm.components[c];
      comp.weight = std::max(wsum / n, 1e-3);
      comp.mean = wsum > 0.0 ? msum / wsum : centers[c];
      double vsum = 0.0;
      for (int i = 0; i < n; ++i) {
        if (assign[i] == c) vsum += sq(samples[i] - comp.mean);
      }
      comp.var = wsum > 1.0 ? std::max(vsum / wsum, 1e-4) : global_var;
    }
    double wtotal = 0.0;
    for (const auto& c : gmm.components) wtotal += c.weight;
    for (auto& c : gmm.components) c.weight /= wtotal;
  }

  double prev_ll = -std::numeric_limits<double>::infinity();
  MatX resp(n, k);
  for (int iter = 0; iter < 200; ++iter) {
    // E step
    for (int i = 0; i < n; ++i) {
      double norm = 0.0;
      for (int c = 0; c < k; ++c) {
        const auto& comp = gmm.components[c];
        const double p = comp.weight * std::exp(-0.5 * sq(samples[i] - comp.mean) / comp.var) /
                         std::sqrt(2.0 * M_PI * comp.var);
        resp(i, c) = p;
        norm += p;
      }
      norm = std::max(norm, 1e-300);
      for (int c = 0; c < k; ++c) resp(i, c) /= norm;
    }
    // M step
    for (int c = 0; c < k; ++c) {
      const double nk = resp.col(c).sum();
      auto& comp = gmm.components[c];
      comp.weight = nk / n;
      double msum = 0.0;
      for (int i = 0; i < n; ++i) msum += resp(i, c) * samples[i];
      comp.mean = msum / std::max(nk, 1e-12);
      double vsum = 0.0;
      for (int i = 0; i < n; ++i) vsum += resp(i, c) * sq(samples[i] - comp.mean);
      comp.var = vsum / std::max(nk, 1e-12);
      if (comp.var < 1e-6) {
        throw std::runtime_error("fit_gmm: component variance collapsed");
      }
    }
    const double ll = gmm_log_likelihood(samples, gmm.components);
    gmm.iterations = iter + 1;
    gmm.log_likelihood = ll;
    if (std::abs(ll - prev_ll) < 1e-9 * (1.0 + std::abs(ll))) break;
    prev_ll = ll;
  }
  return gmm;
}

double sample_gmm(const Gmm1d& gmm, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> randn(0.0, 1.0);
  double pick = unit(rng);
  const GmmComponent* chosen = &gmm.components.back();
  for (const auto& c : gmm.components) {
    pick -= c.weight;
    if (pick <= 0.0) {
      chosen = &c;
      break;
    }
  }
  return chosen->mean + std::sqrt(chosen->var) * randn(rng);
}

const Gmm1d* MultipathModel::bin_for_height(double height) const {
  if (bins.empty()) return nullptr;
  for (size_t i = 0; i + 1 < bin_edges.size(); ++i) {
    if (height >= bin_edges[i] && height < bin_edges[i + 1]) {
      return bins[i].components.empty() ? nullptr : &bins[i];
    }
  }
  return bins.back().components.empty() ? nullptr : &bins.back();
}

double MultipathModel::sample(double height, std::mt19937_64& rng) const {
  const Gmm1d* bin = bin_for_height(height);
  if (bin == nullptr) return 0.0;
  return sample_gmm(*bin, rng);
}

MultipathModel fit_multipath_model(const std::vector<std::pair<double, double>>& pairs, int k,
                                   std::vector<double> bin_edges, std::uint64_t seed) {
  if (bin_edges.size() < 2) throw std::runtime_error("fit_multipath_model: need >= 2 bin edges");
  MultipathModel model;
  model.bin_edges = std::move(bin_edges);
  const size_t n_bins = model.bin_edges.size() - 1;
  model.bins.resize(n_bins);
  for (size_t b = 0; b < n_bins; ++b) {
    std::vector<double> xs;
    for (const auto& [h, e] : pairs) {
      const bool last = b + 1 == n_bins;
      if (h >= model.bin_edges[b] && (h < model.bin_edges[b + 1] || last)) xs.push_back(e);
    }
    if (xs.empty()) continue;  // no blocked satellites at this height: no multipath
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    double var = 0.0;
    for (double x : xs) var += sq(x - mean);
    var /= xs.size();
    int kb = k;
    while (kb > 1 && static_cast<int>(xs.size()) < 10 * kb) --kb;
    if (var < 1e-6 || static_cast<int>(xs.size()) < 10 * kb) {
      // (near-)constant bin: a single floor-variance component
      model.bins[b].components = {{1.0, mean, 1e-6}};
      continue;
    }
    model.bins[b] = fit_gmm(xs, kb, splitmix64(seed + b));
  }
  return model;
}

TrilaterationResult trilaterate(const std::vector<Vec3>& satellites,
                                const std::vector<double>& pseudoranges, double sigma_rho,
                                const Vec3& init) {
  const int n = static_cast<int>(satellites.size());
  if (n < 4 || pseudoranges.size() != satellites.size()) {
    throw std::runtime_error("trilaterate: need >= 4 satellites");
  }
  Eigen::Vector4d state;  // position, clock bias (meters)
  state << init, 0.0;

  MatX jac(n, 4);
  VecX residual(n);
  TrilaterationResult result;
  bool converged = false;
  for (int iter = 0; iter < 50; ++iter) {
    for (int i = 0; i < n; ++i) {
      const Vec3 diff = state.head<3>() - satellites[i];
      const double range = diff.norm();
      residual[i] = pseudoranges[i] - (range + state[3]);
      jac.block<1, 3>(i, 0) = diff.transpose() / range;
      jac(i, 3) = 1.0;
    }
    const Eigen::Matrix4d jtj = jac.transpose() * jac;
    Eigen::JacobiSVD<Eigen::Matrix4d> svd(jtj, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const double cond = svd.singularValues()(0) / std::max(svd.singularValues()(3), 1e-300);
    if (cond > 1e12) {
      throw std::runtime_error("trilaterate: degenerate satellite geometry");
    }
    const Eigen::Vector4d delta = jtj.ldlt().solve(jac.transpose() * residual);
    state += delta;
    result.iterations = iter + 1;
    // ranges are ~2.7e7 m, so the residual carries ~1e-8 m of rounding noise;
    // the tolerance must sit above that floor
    if (delta.norm() < 1e-7) {
      converged = true;
      break;
    }
  }
  if (!converged) throw std::runtime_error("trilaterate: no convergence after 50 iterations");

  for (int i = 0; i < n; ++i) {
    const Vec3 diff = state.head<3>() - satellites[i];
    jac.block<1, 3>(i, 0) = diff.transpose() / diff.norm();
    jac(i, 3) = 1.0;
  }
  const Eigen::Matrix4d info = jac.transpose() * jac;
  const Eigen::Matrix4d cov = sq(sigma_rho) * info.inverse();
  result.position = state.head<3>();
  result.clock_bias = state[3];
  result.covariance = cov.topLeftCorner<3, 3>();
  return result;
}

std::vector<GpsFix> generate_fix_stream(const Trajectory& traj,
                                        const Constellation& constellation,
                                        const SpatialIndex& twin,
                                        const MultipathModel* multipath,
                                        const FixStreamConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> randn(0.0, 1.0);
  std::vector<GpsFix> fixes;
  const double dt = 1.0 / config.rate;
  const int n = static_cast<int>(traj.duration() * config.rate) + 1;
  for (int k = 0; k < n; ++k) {
    const double t = std::min(k * dt, traj.duration());
    const Vec3 pos = traj.position(t);
    const auto visible = visible_satellites(pos, constellation, twin, config.mask_deg);
    if (static_cast<int>(visible.size()) < 4) continue;

    std::vector<Vec3> sats;
    std::vector<double> rho;
    sats.reserve(visible.size());
    for (int idx : visible) {
      const Vec3& s = constellation.satellites[idx];
      double r = (s - pos).norm();
      if (config.enable_multipath && multipath != nullptr) {
        r += multipath->sample(pos.z(), rng);
      }
      if (config.enable_noise) r += config.sigma_rho * randn(rng);
      sats.push_back(s);
      rho.push_back(r);
    }
    try {
      const auto sol = trilaterate(sats, rho, config.sigma_rho);
      fixes.push_back({t, sol.position, sol.covariance, static_cast<int>(visible.size())});
    } catch (const std::runtime_error&) {
      // degenerate epoch: no fix
    }
  }
  return fixes;
}

}  // namespace gnss
}  // namespace twinvio
