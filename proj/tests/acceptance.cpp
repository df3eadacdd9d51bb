// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "test_util.hpp"
#include "uwbcal/apc.hpp"
#include "uwbcal/cli.hpp"
#include "uwbcal/dataio.hpp"
#include "uwbcal/factors.hpp"
#include "uwbcal/lcrsf.hpp"
#include "uwbcal/simgen.hpp"

#ifndef UWBCAL_SCENARIO_DIR
#define UWBCAL_SCENARIO_DIR "scenarios"
#endif

namespace uwbcal {
namespace {

using testing::random_pose;
using testing::random_rotation;
using testing::random_rotation_angle;
using testing::random_vec;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::vector<double> block(const Pose& p) {
  const auto b = pose_to_block(p);
  return {b.begin(), b.end()};
}
std::vector<double> block(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------------------

Outcome jacobian_suite() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> yaw(-kPi, kPi);
  const Rotation level = Rotation::about_x(kPi);
  std::vector<std::pair<std::string, std::function<double()>>> factors{
      {"range",
       [&] {
         const RangeCost c(random_vec(rng, 0.5), 5.0);
         return check_jacobians(c, {block(random_pose(rng)), block(Vec3(random_vec(rng, 20) + Vec3(0, 0, 30))), {0.1}});
       }},
      {"fixed-pose-range",
       [&] {
         const FixedPoseRangeCost c(random_pose(rng), random_vec(rng, 0.5), 5.0);
         return check_jacobians(c, {block(Vec3(random_vec(rng, 20) + Vec3(0, 0, 30))), {0.05}});
       }},
      {"interpolated-range",
       [&] {
         const Pose a = random_pose(rng);
         const Pose b = compose(a, Pose{0.0, random_vec(rng), random_rotation_angle(rng, 0.0, 2.0)});
         const InterpolatedRangeCost c(unit(rng), random_vec(rng, 0.5), random_vec(rng, 20) + Vec3(0, 0, 30), 0.1,
                                       5.0);
         return check_jacobians(c, {block(a), block(b)});
       }},
      {"anchor-anchor",
       [&] {
         const AnchorAnchorCost c(3.0);
         return check_jacobians(c, {block(random_vec(rng, 10)), block(random_vec(rng, 10))});
       }},
      {"height",
       [&] {
         const AnchorHeightCost c(1.5, 0.1);
         return check_jacobians(c, {block(random_vec(rng, 10))});
       }},
      {"relative-pose",
       [&] {
         const RelativePoseCost c(random_pose(rng), 1.0);
         const Pose a = random_pose(rng);
         return check_jacobians(c, {block(a), block(compose(a, random_pose(rng)))});
       }},
      {"pose-prior",
       [&] {
         const Pose prior = random_pose(rng);
         const PosePriorCost c(prior);
         return check_jacobians(c,
                                {block(compose(prior, Pose{0.0, random_vec(rng), random_rotation_angle(rng, 0, 2.5)}))});
       }},
      {"init",
       [&] {
         const InitRangeCost c(random_vec(rng, 0.5), random_vec(rng, 10) + Vec3(0, 0, 20), 4.0, level);
         return check_jacobians(c, {block(random_vec(rng, 5)), {yaw(rng)}});
       }},
  };
  double worst = 0.0;
  std::string worst_name;
  for (auto& [name, check] : factors)
    for (int i = 0; i < 100; ++i) {
      const double e = check();
      if (e > worst) {
        worst = e;
        worst_name = name;
      }
    }
  const double secs = seconds_since(start);
  return {worst < 1e-5 && secs < 10.0,
          std::to_string(factors.size()) + " factors x 100 points, max rel err " + fmt("%.2e", worst) + " (" +
              worst_name + "), " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------

double anchor_rmse(const std::map<AnchorId, Vec3>& est, const std::map<AnchorId, Vec3>& truth) {
  double sq = 0.0;
  for (const auto& [id, p] : truth) sq += (est.at(id) - p).squaredNorm();
  return std::sqrt(sq / static_cast<double>(truth.size()));
}

double max_anchor_error(const std::map<AnchorId, Vec3>& est, const std::map<AnchorId, Vec3>& truth) {
  double worst = 0.0;
  for (const auto& [id, p] : truth) worst = std::max(worst, (est.at(id) - p).norm());
  return worst;
}

double max_bias_error(const LinkBias& est, const LinkBias& truth) {
  double worst = 0.0;
  for (const auto& [link, b] : truth) worst = std::max(worst, std::abs(bias_for(est, link.first, link.second) - b));
  return worst;
}

CalibrationResult calibrate_sequence(const ScenarioTruth& truth, const SequenceTruth& seq) {
  return calibrate(seq.odometry, seq.ranges, truth.tags, truth.pair_priors, ApcConfig{});
}

Outcome noiseless_closure() {
  double worst_anchor = 0.0, worst_bias = 0.0, worst_fused = 0.0, worst_secs = 0.0;
  for (TrajectoryKind kind : {TrajectoryKind::Figure8, TrajectoryKind::Lawnmower, TrajectoryKind::RandomWaypoint}) {
    const auto start = std::chrono::steady_clock::now();
    ScenarioConfig cfg;
    cfg.seed = 2001 + static_cast<std::uint64_t>(kind);
    cfg.kind = kind;
    cfg.sequences = 2;
    cfg.range_sigma = 0.0;
    cfg.spike_probability = 0.0;
    cfg.fusion_drift = {};
    const ScenarioTruth truth = generate(cfg);
    const CalibrationResult calib = calibrate_sequence(truth, truth.sequences[0]);
    worst_anchor = std::max(worst_anchor, max_anchor_error(calib.anchors, truth.anchors));
    worst_bias = std::max(worst_bias, max_bias_error(calib.biases, truth.biases));
    const auto& seq = truth.sequences[1];
    const FusionResult fused = run_fusion(seq.odometry, seq.ranges, calib, truth.tags, FusionConfig{});
    for (std::size_t i = 0; i < seq.truth.size(); ++i)
      worst_fused = std::max(worst_fused, (fused.trajectory[i].p - seq.truth[i].p).norm());
    worst_secs = std::max(worst_secs, seconds_since(start));
  }
  return {worst_anchor < 1e-4 && worst_bias < 1e-4 && worst_fused < 1e-6 && worst_secs < 60.0,
          "3 scenes: anchor err " + fmt("%.2e", worst_anchor) + " m, bias err " + fmt("%.2e", worst_bias) +
              " m, fused err " + fmt("%.2e", worst_fused) + " m, slowest " + fmt("%.1f", worst_secs) + " s"};
}

// ---------------------------------------------------------------------------

Outcome noisy_calibration() {
  double worst_rmse = 0.0, worst_bias = 0.0, worst_recall = 1.0, worst_retention = 1.0;
  Confusion total;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ScenarioConfig cfg;
    cfg.seed = 3000 + seed;
    cfg.sequences = 1;
    const ScenarioTruth truth = generate(cfg);
    const auto& seq = truth.sequences[0];
    const CalibrationResult calib = calibrate_sequence(truth, seq);
    worst_rmse = std::max(worst_rmse, anchor_rmse(calib.anchors, truth.anchors));
    worst_bias = std::max(worst_bias, max_bias_error(calib.biases, truth.biases));
    const Confusion c = label_report(seq.labels, calib.kept, 1.0);
    worst_recall = std::min(worst_recall, c.spike_recall());
    worst_retention = std::min(worst_retention, c.clean_retention());
    total += c;
  }
  const bool pass = worst_rmse < 0.05 && worst_bias < 0.03 && worst_recall == 1.0 && worst_retention >= 0.999;
  return {pass, "10 seeds: worst anchor RMSE " + fmt("%.4f", worst_rmse) + " m, worst bias err " +
                    fmt("%.4f", worst_bias) + " m, spike recall " + fmt("%.4f", worst_recall) +
                    ", clean retention " + fmt("%.5f", worst_retention) + " [tp " + std::to_string(total.true_positive) +
                    " fn " + std::to_string(total.false_negative) + " tn " + std::to_string(total.true_negative) + " fp " +
                    std::to_string(total.false_positive) + "]"};
}

// ---------------------------------------------------------------------------

std::vector<WindowReport> g_windows;

Outcome fusion_accuracy() {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(UWBCAL_SCENARIO_DIR))
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  int runs = 0, under_015 = 0;
  bool all_under_030 = true, odom_worse = true;
  double worst = 0.0;
  std::ostringstream table;
  for (const auto& file : files) {
    const ScenarioConfig cfg = scenario_from_json(json::parse(detail::read_file(file)));
    const ScenarioTruth truth = generate(cfg);
    const CalibrationResult calib = calibrate_sequence(truth, truth.sequences[0]);
    for (std::size_t s = 1; s < truth.sequences.size() && s <= 2; ++s) {
      const auto& seq = truth.sequences[s];
      const FusionResult fused = run_fusion(seq.odometry, seq.ranges, calib, truth.tags, FusionConfig{});
      const double fused_ate = ate(fused.trajectory, seq.truth, AteAlignment::None).rmse;
      const double odom_ate = ate(seq.odometry, seq.truth, AteAlignment::Rigid).rmse;
      g_windows.insert(g_windows.end(), fused.windows.begin(), fused.windows.end());
      ++runs;
      under_015 += fused_ate < 0.15;
      all_under_030 &= fused_ate < 0.30;
      odom_worse &= odom_ate > fused_ate;
      worst = std::max(worst, fused_ate);
      table << "    " << file.stem().string() << "/" << seq.name << ": fused " << fmt("%.4f", fused_ate)
            << " m, odometry (rigid-aligned) " << fmt("%.4f", odom_ate) << " m\n";
    }
  }
  const bool pass = runs == 12 && under_015 >= 11 && all_under_030 && odom_worse;
  std::cout << table.str();
  return {pass, std::to_string(runs) + " runs: " + std::to_string(under_015) + " below 0.15 m, worst " +
                    fmt("%.4f", worst) + " m, odometry worse in every run: " + (odom_worse ? "yes" : "no")};
}

Outcome runtime_budget() {
  if (g_windows.empty()) return {false, "no windows recorded"};
  double sum = 0.0, ranges = 0.0, poses = 0.0;
  std::size_t under = 0;
  std::vector<double> ms;
  for (const auto& w : g_windows) {
    sum += w.wall_ms;
    under += w.wall_ms < 100.0;
    ranges += static_cast<double>(w.ranges);
    poses += static_cast<double>(w.poses);
    ms.push_back(w.wall_ms);
  }
  const double n = static_cast<double>(g_windows.size());
  std::sort(ms.begin(), ms.end());
  const double frac = static_cast<double>(under) / n;
  const double mean = sum / n;
  return {frac >= 0.95 && mean <= 65.0,
          std::to_string(g_windows.size()) + " windows (~" + fmt("%.0f", poses / n) + " poses, ~" +
              fmt("%.0f", ranges / n) + " ranges): mean " + fmt("%.1f", mean) + " ms, max " + fmt("%.1f", ms.back()) +
              " ms, " + fmt("%.2f", 100.0 * frac) + "% under 100 ms"};
}

// ---------------------------------------------------------------------------

Outcome invariance_suite() {
  std::mt19937_64 rng(6001);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = 1000;
  double rel = 0.0, range = 0.0, roundtrip = 0.0, slerp_err = 0.0, ate_err = 0.0, log_norm = 0.0;
  for (int i = 0; i < n; ++i) {
    const Pose g = random_pose(rng, 50.0);
    const Pose a = random_pose(rng), b = random_pose(rng), delta = random_pose(rng);
    rel = std::max(rel, (relative_pose_residual(a, b, delta) -
                         relative_pose_residual(compose(g, a), compose(g, b), delta))
                            .norm());

    const Vec3 off = random_vec(rng, 0.5), anchor = random_vec(rng, 20.0);
    range = std::max(range, std::abs(range_residual(a, off, anchor, 0.07, 8.0) -
                                     range_residual(compose(g, a), off, g.transform(anchor), 0.07, 8.0)));

    // Angles cover the near-zero and near-pi regimes as well as the bulk.
    const double angle = i % 10 == 0 ? 1e-9 * unit(rng) : (i % 10 == 1 ? kPi - 1e-7 * unit(rng) : kPi * unit(rng));
    Vec3 axis = random_vec(rng);
    axis.normalize();
    const Rotation r = Rotation::exp(angle * axis);
    const Vec3 phi = so3_log_vee(r);
    log_norm = std::max(log_norm, phi.norm() - kPi);
    roundtrip = std::max(roundtrip, angular_distance(so3_exp(phi), r));

    const Rotation r0 = random_rotation(rng);
    const Rotation r1 = r0 * random_rotation_angle(rng, 0.0, kPi - 1e-3);
    const double u = unit(rng);
    const Rotation s = slerp(r0, r1, u);
    const double total = angular_distance(r0, r1);
    slerp_err = std::max({slerp_err, std::abs(angular_distance(r0, s) - u * total),
                          std::abs(angular_distance(s, r1) - (1.0 - u) * total)});

    std::vector<Pose> gt, est, moved;
    Vec3 p = Vec3::Zero();
    for (int k = 0; k < 20; ++k) {
      p += random_vec(rng, 0.3);
      gt.push_back({0.1 * k, p, random_rotation(rng)});
      est.push_back({0.1 * k, p + random_vec(rng, 0.05), gt.back().r});
      moved.push_back(compose(g, est.back()));
    }
    const Trajectory tg(gt);
    ate_err = std::max(ate_err, std::abs(ate(Trajectory(est), tg, AteAlignment::Rigid).rmse -
                                         ate(Trajectory(moved), tg, AteAlignment::Rigid).rmse));
  }
  const bool pass = rel < 1e-9 && range < 1e-10 && roundtrip < 1e-12 && log_norm <= 1e-12 && slerp_err < 1e-9 &&
                    ate_err < 1e-9;
  return {pass, "1000 cases each: relative-pose " + fmt("%.1e", rel) + ", range " + fmt("%.1e", range) +
                    ", exp(log) " + fmt("%.1e", roundtrip) + ", |log| - pi " + fmt("%.1e", log_norm) + ", slerp " +
                    fmt("%.1e", slerp_err) + ", ATE rigid " + fmt("%.1e", ate_err)};
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) files[fs::relative(entry.path(), dir).string()] = detail::read_file(entry.path());
  return files;
}

int cli(const std::vector<std::string>& args, std::ostream& err) {
  std::vector<const char*> argv{"uwbcal"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "uwbcal_acceptance_determinism";
  const fs::path scenario = fs::path(UWBCAL_SCENARIO_DIR) / "figure8_nominal.json";
  std::vector<std::map<std::string, std::string>> runs;
  std::ostringstream err;
  for (int rep = 0; rep < 2; ++rep) {
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string sim = (root / "sim").string();
    const std::string calib = (root / "calib.json").string();
    int code = cli({"simulate", scenario.string(), sim}, err);
    if (code == 0) code = cli({"calibrate", sim + "/seq01", "--out", calib}, err);
    for (const char* seq : {"seq02", "seq03"})
      if (code == 0)
        code = cli({"fuse", sim + "/" + seq, "--calib", calib, "--out", (root / (std::string(seq) + "_U.txt")).string()},
                   err);
    if (code != 0) return {false, "pipeline failed: " + err.str()};
    runs.push_back(snapshot(root));
  }
  fs::remove_all(root);
  std::size_t bytes = 0;
  for (const auto& [name, content] : runs[0]) bytes += content.size();
  return {runs[0] == runs[1], std::to_string(runs[0].size()) + " output files (" + std::to_string(bytes) +
                                  " bytes) compared across two runs: " + (runs[0] == runs[1] ? "identical" : "DIFFER")};
}

// ---------------------------------------------------------------------------

Outcome initialization() {
  const std::map<AnchorId, Vec3> anchors{
      {"100", Vec3(-8, -8, 0.5)}, {"101", Vec3(8, -8, 3.5)}, {"102", Vec3(8, 8, 1.0)}, {"103", Vec3(-8, 8, 3.0)}};
  const TagExtrinsics tags{{"200A", Vec3(0.4, 0, 0)}, {"201A", Vec3(-0.4, 0, 0)}};
  const Rotation level = Rotation::about_x(kPi);
  auto stationary = [&](const Pose& pose, const TagExtrinsics& t) {
    std::vector<RangeMeasurement> ms;
    double time = 0.0;
    for (int r = 0; r < 5; ++r)
      for (const auto& [tag, off] : t)
        for (const auto& [id, a] : anchors) ms.push_back({time += 0.01, tag, id, (pose.transform(off) - a).norm()});
    return ms;
  };

  std::mt19937_64 rng(8001);
  std::uniform_real_distribution<double> yaw(-kPi, kPi), xy(-6.0, 6.0), z(0.0, 2.0);
  double worst = 0.0;
  bool any_ambiguous = false;
  for (int i = 0; i < 10; ++i) {
    const double psi = yaw(rng);
    const Pose truth{0.0, Vec3(xy(rng), xy(rng), z(rng)), Rotation::about_z(psi) * level};
    const auto ms = stationary(truth, tags);
    const InitResult init = initialize(ms, anchors, {}, tags, FusionConfig{});
    const oracle::YawFit grid = oracle::grid_search_yaw(ms, anchors, tags, level, 0.01);
    worst = std::max(worst, std::abs(rad2deg(wrap_angle(init.yaw - grid.yaw))));
    any_ambiguous |= init.ambiguous;
  }
  const TagExtrinsics single{{"200A", Vec3::Zero()}};
  const Pose truth{0.0, Vec3(1, 2, 0), Rotation::about_z(0.7) * level};
  const bool flagged = initialize(stationary(truth, single), anchors, {}, single, FusionConfig{}).ambiguous;
  return {worst < 0.1 && !any_ambiguous && flagged,
          "10 poses: max |yaw - grid oracle| " + fmt("%.4f", worst) + " deg, two-tag flagged ambiguous: " +
              (any_ambiguous ? "yes" : "no") + ", zero lever arm flagged: " + (flagged ? "yes" : "no")};
}

}  // namespace
}  // namespace uwbcal

int main() {
  using namespace uwbcal;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"jacobian suite", jacobian_suite},
      {"noiseless closure", noiseless_closure},
      {"noisy calibration", noisy_calibration},
      {"fusion accuracy", fusion_accuracy},
      {"runtime budget", runtime_budget},
      {"invariance suite", invariance_suite},
      {"determinism", determinism},
      {"initialization", initialization},
  };
  int failures = 0;
  int index = 0;
  for (const auto& [name, run] : criteria) {
    ++index;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << index << " " << name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
