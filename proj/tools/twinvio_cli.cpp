#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "twinvio/pipeline.hpp"
#include "twinvio/random_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace twinvio;

namespace {

std::string hash_hex(const std::string& text) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << text;
}

json metrics_json(const evaluation::Metrics& m, const std::string& config_hash,
                  std::uint64_t seed) {
  return {{"config_hash", config_hash},
          {"seed", seed},
          {"ate_p_m", m.ate_p_m},
          {"ate_r_deg", m.ate_r_deg},
          {"n_pairs", m.n_pairs},
          {"alignment_mode", evaluation::align_mode_name(m.alignment)}};
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(csv);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (cell.empty()) continue;
    seeds.push_back(std::stoull(cell));
  }
  if (seeds.empty()) throw std::runtime_error("empty seed list");
  return seeds;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir, bool seed_set,
                 std::uint64_t seed) {
  pipeline::ExperimentConfig config = pipeline::load_config(config_path);
  if (seed_set) config.seed = seed;
  const pipeline::Bundle bundle = pipeline::simulate(config);
  pipeline::write_bundle(out_dir, bundle, config);
  json j;
  j["out"] = out_dir;
  j["seed"] = config.seed;
  j["path_length_m"] = bundle.path_length;
  j["n_frames"] = bundle.observations.size();
  j["n_imu"] = bundle.imu.size();
  j["n_landmarks"] = bundle.landmarks.size();
  j["n_fixes"] = bundle.fixes.size();
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_gps_model(const std::string& config_path, const std::string& out_dir, bool seed_set,
                  std::uint64_t seed) {
  pipeline::ExperimentConfig config = pipeline::load_config(config_path);
  if (seed_set) config.seed = seed;
  TwinMesh mesh;
  if (!config.scene.mesh_path.empty()) {
    mesh = load_mesh(config.scene.mesh_path);
  } else {
    mesh = generate_city(config.scene.city, substream_seed(config.seed, "city"));
  }
  const pipeline::GnssModels models = pipeline::fit_gnss_models(mesh, config.gnss, config.seed);
  fs::create_directories(out_dir);
  pipeline::write_gnss_models((fs::path(out_dir) / "gnss_models.json").string(), models);

  json j;
  j["out"] = (fs::path(out_dir) / "gnss_models.json").string();
  j["n_count_samples"] = models.training.count_by_height.size();
  j["n_multipath_samples"] = models.training.multipath_by_height.size();
  j["gp_prior_mean"] = models.sat_count_gp.prior_mean();
  json bins = json::array();
  for (const auto& b : models.multipath.bins) {
    bins.push_back({{"components", b.components.size()},
                    {"log_likelihood", b.log_likelihood},
                    {"iterations", b.iterations}});
  }
  j["multipath_bins"] = bins;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_run(const std::string& bundle_dir, const std::string& out_dir, const std::string& mode_str,
            bool mode_set, bool deterministic, bool trace) {
  pipeline::ExperimentConfig config = pipeline::load_bundle_config(bundle_dir);
  if (mode_set) config.mode = pipeline::parse_mode(mode_str);
  const pipeline::Bundle bundle = pipeline::load_bundle(bundle_dir);

  pipeline::RunOptions opts;
  opts.mode = config.mode;
  opts.deterministic = deterministic;
  opts.trace = trace;
  const pipeline::RunResult result = pipeline::run_pipeline(bundle, config, opts);
  pipeline::write_run_outputs(out_dir, result);

  const auto gt = pipeline::ground_truth_record(bundle);
  evaluation::Metrics metrics;
  if (result.estimate_w) {
    metrics = evaluation::evaluate(*result.estimate_w, gt, evaluation::AlignMode::kNone);
  } else {
    metrics = evaluation::evaluate(result.estimate_l, gt, evaluation::AlignMode::kYaw4Dof);
  }
  json j = metrics_json(metrics, hash_hex(pipeline::config_to_json(config)), config.seed);
  j["mode"] = pipeline::mode_name(config.mode);
  j["registration_attempts"] = result.registration_attempts;
  j["registration_converged"] = result.registration_converged;
  write_text((fs::path(out_dir) / "metrics.json").string(), j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const std::string& est_path, const std::string& gt_path,
                 const std::string& align, const std::string& out_path) {
  const auto est = evaluation::load_trajectory_csv(est_path);
  const auto gt = evaluation::load_trajectory_csv(gt_path);
  const auto metrics = evaluation::evaluate(est, gt, evaluation::parse_align_mode(align));
  const json j = metrics_json(metrics, "", 0);
  if (!out_path.empty()) write_text(out_path, j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_bench(const std::string& out_dir, const std::string& seeds_csv) {
  const auto seeds = parse_seed_list(seeds_csv);
  const auto cells = pipeline::run_bench(out_dir, seeds);
  std::cout << pipeline::bench_summary(cells);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"digital-twin-aided visual-inertial pose estimation toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string bundle_dir;
  std::string out_dir;
  std::string mode = "vio-twin";
  std::string est_path;
  std::string gt_path;
  std::string align = "none";
  std::string metrics_out;
  std::string seeds_csv = "1,2,3,4,5";
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool trace = false;

  auto* sim = app.add_subcommand("simulate", "Generate a seeded scenario bundle");
  sim->add_option("--config", config_path, "experiment config JSON")->required();
  sim->add_option("--out", out_dir, "output bundle directory")->required();
  sim->add_option("--seed", seed, "override the config seed");

  auto* gps = app.add_subcommand("gps-model", "Fit the GNSS degradation models for a scene");
  gps->add_option("--config", config_path, "experiment config JSON")->required();
  gps->add_option("--out", out_dir, "output directory")->required();
  gps->add_option("--seed", seed, "override the config seed");

  auto* run = app.add_subcommand("run", "Run the estimator on a bundle");
  run->add_option("--bundle", bundle_dir, "bundle directory from simulate")->required();
  run->add_option("--out", out_dir, "output directory")->required();
  run->add_option("--mode", mode, "vio-only, vio-gps, or vio-twin");
  run->add_flag("--deterministic", deterministic,
                "apply registration factors synchronously (exact reproducibility)");
  run->add_flag("--trace", trace, "log fusion events to stderr");

  auto* ev = app.add_subcommand("evaluate", "ATE metrics for an estimate against ground truth");
  ev->add_option("--est", est_path, "estimate trajectory CSV")->required();
  ev->add_option("--gt", gt_path, "ground-truth trajectory CSV")->required();
  ev->add_option("--align", align, "none, yaw4dof, or se3");
  ev->add_option("--out", metrics_out, "metrics JSON path");

  auto* bench = app.add_subcommand("bench", "Seeded benchmark grid (canyon + facade scenarios)");
  bench->add_option("--out", out_dir, "output directory")->required();
  bench->add_option("--seeds", seeds_csv, "comma-separated seed list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (sim->parsed()) return cmd_simulate(config_path, out_dir, sim->count("--seed") > 0, seed);
    if (gps->parsed()) return cmd_gps_model(config_path, out_dir, gps->count("--seed") > 0, seed);
    if (run->parsed()) return cmd_run(bundle_dir, out_dir, mode, run->count("--mode") > 0,
                                      deterministic, trace);
    if (ev->parsed()) return cmd_evaluate(est_path, gt_path, align, metrics_out);
    if (bench->parsed()) return cmd_bench(out_dir, seeds_csv);
  } catch (const std::exception& e) {
    json err;
    err["error"] = e.what();
    std::cout << err.dump() << "\n";
    return 1;
  }
  return 0;
}
