#pragma once

// Command-line front end: simulate, calibrate, fuse, eval-ate, filter-report.
//
// Exit codes: 0 success, 1 runtime error (message on stderr), 2 usage error.

#include <algorithm>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "uwbcal/apc.hpp"
#include "uwbcal/dataio.hpp"
#include "uwbcal/lcrsf.hpp"
#include "uwbcal/simgen.hpp"

namespace uwbcal {

namespace detail {

/// Echo of the effective configuration, written as `<output>.config.json`.
inline void write_config_echo(const fs::path& output, const std::string& command, const json& config) {
  fs::path echo = output;
  echo += ".config.json";
  write_file_atomic(echo, json{{"command", command}, {"config", config}}.dump(2) + "\n");
}

inline json solver_json(const SolverOptions& o) {
  return {{"max_iters", o.max_iters}, {"rel_tol", o.rel_tol}, {"grad_tol", o.grad_tol},
          {"initial_damping", o.initial_damping}};
}

struct CliOptions {
  // simulate
  std::string scenario_path;
  std::string out_dir;
  // shared
  std::string bundle;
  std::string calib_path;
  std::string out_path;
  bool verbose = false;
  // calibrate
  double tau = 0.5;
  double cauchy_scale = 1.0;
  std::string init = "trilaterate";
  bool height_priors = false;
  int refilter_rounds = 0;
  // fuse
  std::size_t window = 50;
  std::size_t stride = 10;
  double fuse_tau = 0.5;
  double fuse_cauchy = 0.5;
  double odom_sigma_rot = 0.01;
  double odom_sigma_trans = 0.01;
  double stationary = 5.0;
  double roll = kPi;
  std::string timing_path;
  // eval-ate
  std::string est_path;
  std::string gt_path;
  std::string align = "none";
  double max_dt = 0.02;
  std::string series_path;
  // filter-report
  std::string trajectory_override;
};

inline int cmd_simulate(const CliOptions& o, std::ostream& out) {
  json j;
  try {
    j = json::parse(read_file(o.scenario_path));
  } catch (const json::exception& e) {
    throw ParseError(o.scenario_path + ": " + e.what());
  }
  const ScenarioConfig cfg = scenario_from_json(j);
  const ScenarioTruth truth = generate(cfg);
  const fs::path dir(o.out_dir);
  write_scenario(dir, truth);
  write_file_atomic(dir / "scenario.json", scenario_to_json(cfg).dump(2) + "\n");
  write_config_echo(dir / "truth.json", "simulate", scenario_to_json(cfg));
  for (const auto& seq : truth.sequences)
    out << seq.name << (seq.calibration ? " (calibration)" : "") << ": " << seq.odometry.size() << " poses, "
        << seq.ranges.size() << " ranges\n";
  return 0;
}

inline int cmd_calibrate(const CliOptions& o, std::ostream& out, std::ostream& err) {
  const LoadedRun run = load_bundle(o.bundle);
  for (const auto& w : run.ranges.warnings) err << "warning: " << w << "\n";
  ApcConfig cfg;
  cfg.tau = o.tau;
  cfg.cauchy_scale = o.cauchy_scale;
  cfg.init = anchor_init_from_string(o.init);
  if (cfg.init == AnchorInit::File) throw ConfigError("init 'file' is not available from the command line");
  cfg.use_height_priors = o.height_priors;
  cfg.refilter_rounds = o.refilter_rounds;
  if (o.verbose) cfg.solver.log = &err;
  const CalibrationResult r =
      calibrate(run.trajectory, run.ranges.ranges, run.extrinsics, run.pairs, cfg, run.heights);
  for (const auto& w : r.warnings) err << "warning: " << w << "\n";

  const json echo{{"bundle", o.bundle},
                  {"tau", cfg.tau},
                  {"cauchy_scale", cfg.cauchy_scale},
                  {"init", to_string(cfg.init)},
                  {"height_priors", cfg.use_height_priors},
                  {"refilter_rounds", cfg.refilter_rounds},
                  {"min_bias_inliers", cfg.min_bias_inliers},
                  {"solver", solver_json(cfg.solver)}};
  write_calibration(o.out_path, r, echo);
  write_config_echo(o.out_path, "calibrate", echo);

  out << std::fixed << std::setprecision(4);
  for (const auto& [id, p] : r.anchors) out << "anchor " << id << " " << p.x() << " " << p.y() << " " << p.z() << "\n";
  std::size_t kept = 0;
  for (bool k : r.kept) kept += k;
  out << "kept " << kept << " of " << r.kept.size() << " ranges\n";
  out << "stage1 cost " << r.stage1.final_cost << ", stage2 cost " << r.stage2.final_cost << "\n";
  return 0;
}

inline int cmd_fuse(const CliOptions& o, std::ostream& out, std::ostream& err) {
  const LoadedRun run = load_bundle(o.bundle);
  for (const auto& w : run.ranges.warnings) err << "warning: " << w << "\n";
  const CalibrationResult calib = parse_calibration(o.calib_path);
  for (const auto& w : calib.warnings) err << "warning: " << w << "\n";
  FusionConfig cfg;
  cfg.window_size = o.window;
  cfg.stride = o.stride;
  cfg.tau = o.fuse_tau;
  cfg.cauchy_scale = o.fuse_cauchy;
  cfg.odom_sigma_rot = o.odom_sigma_rot;
  cfg.odom_sigma_trans = o.odom_sigma_trans;
  cfg.stationary_duration = o.stationary;
  cfg.roll = o.roll;
  if (o.verbose) cfg.solver.log = &err;
  const FusionResult r = run_fusion(run.trajectory, run.ranges.ranges, calib, run.extrinsics, cfg);
  if (r.init.ambiguous) err << "warning: AmbiguousInit: initial yaw is poorly constrained\n";

  const json echo{{"bundle", o.bundle},
                  {"calib", o.calib_path},
                  {"window", cfg.window_size},
                  {"stride", cfg.stride},
                  {"tau", cfg.tau},
                  {"cauchy_scale", cfg.cauchy_scale},
                  {"odom_sigma_rot", cfg.odom_sigma_rot},
                  {"odom_sigma_trans", cfg.odom_sigma_trans},
                  {"stationary_duration", cfg.stationary_duration},
                  {"roll", cfg.roll},
                  {"solver", solver_json(cfg.solver)}};
  write_trajectory(o.out_path, r.trajectory);
  write_config_echo(o.out_path, "fuse", echo);
  if (!o.timing_path.empty()) {
    write_file_atomic(o.timing_path, format_timing(r.windows));
    write_config_echo(o.timing_path, "fuse", echo);
  }

  std::vector<double> ms;
  for (const auto& w : r.windows) ms.push_back(w.wall_ms);
  double mean = 0.0;
  std::size_t under = 0;
  for (double m : ms) {
    mean += m;
    under += m < 100.0;
  }
  if (!ms.empty()) mean /= static_cast<double>(ms.size());
  out << std::fixed << std::setprecision(3);
  out << "poses " << r.trajectory.size() << "\n";
  out << "windows " << ms.size() << ", mean " << mean << " ms, under 100 ms "
      << (ms.empty() ? 100.0 : 100.0 * static_cast<double>(under) / static_cast<double>(ms.size())) << "%\n";
  return 0;
}

inline int cmd_eval_ate(const CliOptions& o, std::ostream& out) {
  const Trajectory est = parse_trajectory(o.est_path);
  const Trajectory gt = parse_trajectory(o.gt_path);
  AteAlignment mode;
  if (o.align == "none")
    mode = AteAlignment::None;
  else if (o.align == "rigid")
    mode = AteAlignment::Rigid;
  else
    throw ConfigError("unknown alignment '" + o.align + "'");
  const AteReport rep = ate(est, gt, mode, o.max_dt);
  out << std::fixed << std::setprecision(3);
  out << "RMSE " << rep.rmse << "\n";
  out << "mean " << rep.mean << "\n";
  out << "median " << rep.median << "\n";
  out << "max " << rep.max << "\n";
  out << "pairs " << rep.errors.size() << "\n";
  out << "alignment " << to_string(rep.alignment) << "\n";
  if (!o.series_path.empty()) {
    write_file_atomic(o.series_path, format_ate_series(rep));
    write_config_echo(o.series_path, "eval-ate",
                      {{"est", o.est_path}, {"gt", o.gt_path}, {"align", o.align}, {"max_dt", o.max_dt}});
  }
  return 0;
}

inline int cmd_filter_report(const CliOptions& o, std::ostream& out, std::ostream& err) {
  const LoadedRun run = load_bundle(o.bundle);
  for (const auto& w : run.ranges.warnings) err << "warning: " << w << "\n";
  const CalibrationResult calib = parse_calibration(o.calib_path);
  const Trajectory traj =
      o.trajectory_override.empty() ? run.trajectory : parse_trajectory(o.trajectory_override);
  const auto& ranges = run.ranges.ranges;
  const FilterResult f = filter_outliers(ranges, calib.anchors, calib.biases, traj, run.extrinsics, o.tau);
  const std::vector<bool> kept = f.kept(ranges.size());

  std::string csv = "t,tag_id,anchor_id,range_m,corrected_m,predicted_m,kept\n";
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const RangeMeasurement& m = ranges[i];
    std::string predicted;
    auto a = calib.anchors.find(m.anchor);
    auto tag = run.extrinsics.find(m.tag);
    if (a != calib.anchors.end() && tag != run.extrinsics.end() && traj.covers(m.t))
      predicted = format_double(predicted_range(traj, m, tag->second, a->second));
    csv += format_double(m.t) + "," + m.tag + "," + m.anchor + "," + format_double(m.d) + "," +
           format_double(m.d + bias_for(calib.biases, m.tag, m.anchor)) + "," + predicted + "," +
           (kept[i] ? "1" : "0") + "\n";
  }
  write_file_atomic(o.out_path, csv);
  write_config_echo(o.out_path, "filter-report",
                    {{"bundle", o.bundle}, {"calib", o.calib_path}, {"tau", o.tau},
                     {"trajectory", o.trajectory_override.empty() ? "bundle" : o.trajectory_override}});
  out << "kept " << f.inliers.size() << " of " << ranges.size() << " ranges\n";
  return 0;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"UWB anchor calibration and range/odometry fusion"};
  app.require_subcommand(1);
  detail::CliOptions o;

  auto* sim = app.add_subcommand("simulate", "Generate a synthetic scenario");
  sim->add_option("scenario", o.scenario_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("outdir", o.out_dir, "Output directory")->required();

  auto* cal = app.add_subcommand("calibrate", "Calibrate anchors and link biases from one run");
  cal->add_option("bundle", o.bundle, "Run bundle (directory or manifest)")->required();
  cal->add_option("--tau", o.tau, "Gate threshold (m)")->capture_default_str();
  cal->add_option("--cauchy-scale", o.cauchy_scale, "Cauchy loss scale (m)")->capture_default_str();
  cal->add_option("--init", o.init, "Anchor init: centroid | trilaterate")->capture_default_str();
  cal->add_flag("--height-priors", o.height_priors, "Use the bundle's height priors");
  cal->add_option("--refilter", o.refilter_rounds, "Extra gate + solve rounds")->capture_default_str();
  cal->add_option("--out", o.out_path, "Calibration JSON output")->required();
  cal->add_flag("--verbose", o.verbose, "Print solver traces");

  auto* fuse = app.add_subcommand("fuse", "Fuse a run's odometry and ranges in the anchor frame");
  fuse->add_option("bundle", o.bundle, "Run bundle (directory or manifest)")->required();
  fuse->add_option("--calib", o.calib_path, "Calibration JSON")->required();
  fuse->add_option("--window", o.window, "Window size (poses)")->capture_default_str();
  fuse->add_option("--stride", o.stride, "Poses per solve")->capture_default_str();
  fuse->add_option("--tau", o.fuse_tau, "Gate threshold (m)")->capture_default_str();
  fuse->add_option("--cauchy-scale", o.fuse_cauchy, "Cauchy loss scale (m)")->capture_default_str();
  fuse->add_option("--odom-sigma-rot", o.odom_sigma_rot, "Odometry rotation sigma (rad)")->capture_default_str();
  fuse->add_option("--odom-sigma-trans", o.odom_sigma_trans, "Odometry translation sigma (m)")->capture_default_str();
  fuse->add_option("--stationary", o.stationary, "Stationary prefix (s)")->capture_default_str();
  fuse->add_option("--roll", o.roll, "Initial roll convention (rad)")->capture_default_str();
  fuse->add_option("--out", o.out_path, "Fused trajectory output")->required();
  fuse->add_option("--timing", o.timing_path, "Per-window timing CSV");
  fuse->add_flag("--verbose", o.verbose, "Print solver traces");

  auto* eval = app.add_subcommand("eval-ate", "Absolute trajectory error");
  eval->add_option("est", o.est_path, "Estimated trajectory")->required();
  eval->add_option("gt", o.gt_path, "Ground-truth trajectory")->required();
  eval->add_option("--align", o.align, "none | rigid")->capture_default_str();
  eval->add_option("--max-dt", o.max_dt, "Association window (s)")->capture_default_str();
  eval->add_option("--series", o.series_path, "Per-pose error CSV");

  auto* rep = app.add_subcommand("filter-report", "Raw vs gated range series per link");
  rep->add_option("bundle", o.bundle, "Run bundle (directory or manifest)")->required();
  rep->add_option("--calib", o.calib_path, "Calibration JSON")->required();
  rep->add_option("--tau", o.tau, "Gate threshold (m)")->capture_default_str();
  rep->add_option("--trajectory", o.trajectory_override, "Trajectory in the anchor frame (default: bundle's)");
  rep->add_option("--out", o.out_path, "Report CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sim) return detail::cmd_simulate(o, out);
    if (*cal) return detail::cmd_calibrate(o, out, err);
    if (*fuse) return detail::cmd_fuse(o, out, err);
    if (*eval) return detail::cmd_eval_ate(o, out);
    if (*rep) return detail::cmd_filter_report(o, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace uwbcal
