#pragma once

// Sliding-window fusion of SLAM odometry with UWB ranges against calibrated
// anchors, producing the trajectory in the anchor frame U.

#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uwbcal/apc.hpp"
#include "uwbcal/error.hpp"
#include "uwbcal/factors.hpp"
#include "uwbcal/geometry.hpp"
#include "uwbcal/solver.hpp"

namespace uwbcal {

inline SolverOptions default_fusion_solver_options() {
  SolverOptions o;
  o.max_iters = 20;
  o.rel_tol = 1e-10;
  o.grad_tol = 1e-12;
  return o;
}

struct FusionConfig {
  std::size_t window_size = 50;  // poses
  std::size_t stride = 10;       // poses shifted per solve
  double tau = 0.5;              // m, range gate
  double cauchy_scale = 0.5;     // m
  double odom_sigma_rot = 0.01;    // rad, per increment
  double odom_sigma_trans = 0.01;  // m, per increment
  double stationary_duration = 5.0;  // s
  double roll = kPi;                 // fixed initial roll (rad)
  double prior_sigma_pos = 0.1;            // m, first-window prior
  double prior_sigma_rot = 2.0 * kPi / 180.0;  // rad
  int yaw_seeds = 8;
  SolverOptions solver = default_fusion_solver_options();

  void validate() const {
    if (window_size < 2) throw ConfigError("window size must be at least 2");
    if (stride < 1 || stride > window_size) throw ConfigError("stride must be in [1, window size]");
    if (!(stationary_duration > 0.0)) throw ConfigError("stationary duration must be positive");
    if (!(tau > 0.0) || !(cauchy_scale > 0.0)) throw ConfigError("tau and cauchy scale must be positive");
    if (!(odom_sigma_rot > 0.0) || !(odom_sigma_trans > 0.0)) throw ConfigError("odometry sigmas must be positive");
    if (!(prior_sigma_pos > 0.0) || !(prior_sigma_rot > 0.0)) throw ConfigError("prior sigmas must be positive");
    if (yaw_seeds < 1) throw ConfigError("need at least one yaw seed");
  }
};

// ---------------------------------------------------------------------------
// Initialization

struct InitResult {
  Pose pose;  // U-frame pose, t left to the caller
  double yaw = 0.0;
  double cost = 0.0;
  bool ambiguous = false;
  std::size_t used = 0;  // measurements in the final solve
};

/// Position and yaw from stationary ranges; attitude Rz(yaw) Ry(0) Rx(roll).
///
/// Every yaw seed runs a robust solve; the best is gated at tau and re-solved
/// on the survivors. Flags `ambiguous` when another seed ends within 1% of
/// the best cost at a yaw more than 5 degrees away.
inline InitResult initialize(const std::vector<RangeMeasurement>& stationary,
                             const std::map<AnchorId, Vec3>& anchors, const LinkBias& biases,
                             const TagExtrinsics& extrinsics, const FusionConfig& cfg) {
  cfg.validate();
  std::vector<const RangeMeasurement*> usable;
  std::map<AnchorId, int> seen;
  for (const auto& m : stationary) {
    if (!m.valid() || !anchors.contains(m.anchor) || !extrinsics.contains(m.tag)) continue;
    usable.push_back(&m);
    seen[m.anchor]++;
  }
  if (usable.size() < 4) throw InsufficientInit(std::to_string(usable.size()) + " usable stationary measurements");
  if (seen.size() < 2) throw InsufficientInit("stationary measurements reach fewer than 2 anchors");

  const Rotation level = Rotation::about_y(0.0) * Rotation::about_x(cfg.roll);
  Vec3 seed_pos = Vec3::Zero();
  for (const auto& [id, n] : seen) seed_pos += anchors.at(id);
  seed_pos /= static_cast<double>(seen.size());

  struct Outcome {
    Vec3 p;
    double yaw;
    double cost;
  };
  auto run = [&](const std::vector<const RangeMeasurement*>& ms, const Vec3& p0, double yaw0, Loss loss) {
    Problem problem;
    problem.add_point3("p0", p0);
    problem.add_yaw("yaw", yaw0);
    for (const auto* m : ms) {
      const double d = m->d + bias_for(biases, m->tag, m->anchor);
      problem.add_residual_block(
          std::make_shared<InitRangeCost>(extrinsics.at(m->tag), anchors.at(m->anchor), d, level), loss,
          {"p0", "yaw"});
    }
    SolverOptions opts = default_apc_solver_options();
    opts.log = cfg.solver.log;
    const SolveReport rep = solve(problem, opts);
    return Outcome{problem.point3("p0"), wrap_angle(problem.scalar("yaw")), rep.final_cost};
  };

  const Loss robust = Loss::cauchy(cfg.cauchy_scale);
  std::vector<Outcome> outcomes;
  for (int s = 0; s < cfg.yaw_seeds; ++s) {
    const double yaw0 = wrap_angle(-kPi + 2.0 * kPi * s / cfg.yaw_seeds);
    outcomes.push_back(run(usable, seed_pos, yaw0, robust));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < outcomes.size(); ++i)
    if (outcomes[i].cost < outcomes[best].cost) best = i;

  InitResult out;
  for (const auto& o : outcomes) {
    const bool close_cost = o.cost <= outcomes[best].cost * 1.01 + 1e-12;
    if (close_cost && std::abs(wrap_angle(o.yaw - outcomes[best].yaw)) > deg2rad(5.0)) out.ambiguous = true;
  }

  // Gate against the best seed and refine.
  std::vector<const RangeMeasurement*> inliers;
  const Rotation r_best = Rotation::about_z(outcomes[best].yaw) * level;
  for (const auto* m : usable) {
    const Vec3 tag = outcomes[best].p + r_best * extrinsics.at(m->tag);
    const double e = (tag - anchors.at(m->anchor)).norm() - (m->d + bias_for(biases, m->tag, m->anchor));
    if (std::abs(e) <= cfg.tau) inliers.push_back(m);
  }
  Outcome final = outcomes[best];
  if (inliers.size() >= 4 && inliers.size() < usable.size())
    final = run(inliers, outcomes[best].p, outcomes[best].yaw, robust);

  out.yaw = final.yaw;
  out.cost = final.cost;
  out.used = inliers.size() >= 4 ? inliers.size() : usable.size();
  out.pose = Pose{0.0, final.p, Rotation::about_z(final.yaw) * level};
  return out;
}

// ---------------------------------------------------------------------------
// Prediction and gating

/// U_k = U_{k-1} * (S_{k-1}^-1 S_k). Carries the new SLAM timestamp.
inline Pose predict_pose(const Pose& prev_u, const Pose& prev_s, const Pose& new_s) {
  Pose out = compose(prev_u, between(prev_s, new_s));
  out.t = new_s.t;
  return out;
}

/// Keep iff |(d + b) - predicted| <= tau with the pose at the measurement time.
inline bool gate_measurement(const RangeMeasurement& m, const Pose& pose_at_tm,
                             const std::map<AnchorId, Vec3>& anchors, const LinkBias& biases,
                             const TagExtrinsics& extrinsics, double tau) {
  auto a = anchors.find(m.anchor);
  auto tag = extrinsics.find(m.tag);
  if (a == anchors.end() || tag == extrinsics.end() || !m.valid()) return false;
  const double predicted = (pose_at_tm.transform(tag->second) - a->second).norm();
  return std::abs(m.d + bias_for(biases, m.tag, m.anchor) - predicted) <= tau;
}

// ---------------------------------------------------------------------------
// Sliding window

struct WindowFrame {
  Pose s_pose;  // SLAM pose
  Pose u_pose;  // current U estimate
  bool confirmed = false;
  /// Gated ranges in the interval ending at this frame.
  std::vector<RangeMeasurement> ranges;
};

struct FusionState {
  std::map<AnchorId, Vec3> anchors;
  LinkBias biases;
  TagExtrinsics extrinsics;
  std::vector<WindowFrame> window;
  std::vector<Pose> confirmed;
  std::optional<Pose> front_prior;  // held until the first frame is confirmed
  std::size_t since_solve = 0;
};

struct WindowReport {
  std::size_t index = 0;
  double start_time = 0.0;
  double end_time = 0.0;
  std::size_t poses = 0;
  std::size_t ranges = 0;
  double wall_ms = 0.0;
  SolveReport solve;
};

/// Solves the current window, then commits frames that leave it.
///
/// The front frame is held constant once confirmed; before that it carries
/// the weak initialization prior. When the window is full, frames
/// [0, stride] are confirmed and [0, stride) leave the window.
inline WindowReport process_window(FusionState& state, const FusionConfig& cfg) {
  auto& w = state.window;
  if (w.size() < 2) throw WindowUnderflow("window holds " + std::to_string(w.size()) + " poses");
  const auto start = std::chrono::steady_clock::now();

  Problem problem;
  auto id = [](std::size_t i) { return "pose/" + std::to_string(i); };
  for (std::size_t i = 0; i < w.size(); ++i) problem.add_pose(id(i), w[i].u_pose);
  if (w.front().confirmed) {
    problem.set_constant(id(0));
  } else if (state.front_prior) {
    Eigen::MatrixXd sqrt_info = Eigen::MatrixXd::Zero(6, 6);
    sqrt_info.diagonal().head<3>().setConstant(1.0 / cfg.prior_sigma_rot);
    sqrt_info.diagonal().tail<3>().setConstant(1.0 / cfg.prior_sigma_pos);
    problem.add_residual_block(std::make_shared<PosePriorCost>(*state.front_prior), Loss::none(), {id(0)},
                               sqrt_info);
  }

  const Eigen::MatrixXd odo_info = odometry_sqrt_information(cfg.odom_sigma_rot, cfg.odom_sigma_trans);
  const Loss robust = Loss::cauchy(cfg.cauchy_scale);
  std::size_t n_ranges = 0;
  for (std::size_t i = 1; i < w.size(); ++i) {
    const Pose delta = between(w[i - 1].s_pose, w[i].s_pose);
    problem.add_residual_block(std::make_shared<RelativePoseCost>(delta), Loss::none(), {id(i - 1), id(i)},
                               odo_info);
    const double t0 = w[i - 1].s_pose.t;
    const double dt = w[i].s_pose.t - t0;
    for (const auto& m : w[i].ranges) {
      const double u = std::clamp((m.t - t0) / dt, 0.0, 1.0);
      problem.add_residual_block(
          std::make_shared<InterpolatedRangeCost>(u, state.extrinsics.at(m.tag), state.anchors.at(m.anchor),
                                                  bias_for(state.biases, m.tag, m.anchor), m.d),
          robust, {id(i - 1), id(i)});
      ++n_ranges;
    }
  }

  WindowReport rep;
  rep.start_time = w.front().s_pose.t;
  rep.end_time = w.back().s_pose.t;
  rep.poses = w.size();
  rep.ranges = n_ranges;
  rep.solve = solve(problem, cfg.solver);
  for (std::size_t i = 0; i < w.size(); ++i) w[i].u_pose = problem.pose(id(i), w[i].s_pose.t);

  if (w.size() >= cfg.window_size) {
    const std::size_t last = std::min(cfg.stride, w.size() - 1);
    for (std::size_t i = 0; i <= last; ++i) {
      if (w[i].confirmed) continue;
      w[i].confirmed = true;
      state.confirmed.push_back(w[i].u_pose);
    }
    w.erase(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(last));
    state.front_prior.reset();
  }
  state.since_solve = 0;
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

/// Streaming driver: feed SLAM poses in time order with the ranges that
/// arrived since the previous pose.
class FusionPipeline {
 public:
  FusionPipeline(std::map<AnchorId, Vec3> anchors, LinkBias biases, TagExtrinsics extrinsics, FusionConfig cfg)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    state_.anchors = std::move(anchors);
    state_.biases = std::move(biases);
    state_.extrinsics = std::move(extrinsics);
  }

  /// First SLAM pose and its U-frame initialization.
  void start(const Pose& s_pose, const Pose& u_pose) {
    Pose u = u_pose;
    u.t = s_pose.t;
    state_.window.clear();
    state_.confirmed.clear();
    state_.window.push_back({s_pose, u, false, {}});
    state_.front_prior = u;
    state_.since_solve = 0;
  }

  /// Predicts the new pose, gates `ranges` (times in [t_prev, t_new]) on the
  /// interpolated prediction, and solves when `stride` poses have arrived
  /// or the window is full. Returns per-measurement keep flags.
  std::vector<bool> push(const Pose& s_pose, const std::vector<RangeMeasurement>& ranges) {
    if (state_.window.empty()) throw WindowUnderflow("pipeline not started");
    const WindowFrame& prev = state_.window.back();
    if (!(s_pose.t > prev.s_pose.t)) throw OutOfRange("SLAM poses must have increasing timestamps");
    WindowFrame frame{s_pose, predict_pose(prev.u_pose, prev.s_pose, s_pose), false, {}};
    std::vector<bool> kept(ranges.size(), false);
    const double dt = s_pose.t - prev.s_pose.t;
    for (std::size_t i = 0; i < ranges.size(); ++i) {
      const RangeMeasurement& m = ranges[i];
      if (m.t < prev.s_pose.t || m.t > s_pose.t) {
        ++unbracketed_;
        continue;
      }
      const Pose at = interpolate(prev.u_pose, frame.u_pose, (m.t - prev.s_pose.t) / dt);
      if (gate_measurement(m, at, state_.anchors, state_.biases, state_.extrinsics, cfg_.tau)) {
        frame.ranges.push_back(m);
        kept[i] = true;
      }
    }
    state_.window.push_back(std::move(frame));
    ++state_.since_solve;
    if (state_.since_solve >= cfg_.stride || state_.window.size() >= cfg_.window_size)
      reports_.push_back(solve_now());
    return kept;
  }

  /// Solves any pending poses and commits the whole window.
  void finish() {
    if (state_.since_solve > 0 && state_.window.size() >= 2) reports_.push_back(solve_now());
    for (auto& f : state_.window) {
      if (f.confirmed) continue;
      f.confirmed = true;
      state_.confirmed.push_back(f.u_pose);
    }
    state_.window.clear();
  }

  const std::vector<Pose>& confirmed() const { return state_.confirmed; }
  const std::vector<WindowReport>& reports() const { return reports_; }
  const FusionState& state() const { return state_; }
  std::size_t unbracketed() const { return unbracketed_; }

 private:
  WindowReport solve_now() {
    WindowReport r = process_window(state_, cfg_);
    r.index = reports_.size();
    return r;
  }

  FusionConfig cfg_;
  FusionState state_;
  std::vector<WindowReport> reports_;
  std::size_t unbracketed_ = 0;
};

struct FusionResult {
  Trajectory trajectory;  // in U
  InitResult init;
  std::vector<WindowReport> windows;
  std::vector<bool> kept;  // gate decision per input range
  std::size_t unbracketed = 0;
};

/// Batch driver over a recorded run. Ranges must be sorted by time.
inline FusionResult run_fusion(const Trajectory& odom_s, const std::vector<RangeMeasurement>& ranges,
                               const std::map<AnchorId, Vec3>& anchors, const LinkBias& biases,
                               const TagExtrinsics& extrinsics, const FusionConfig& cfg) {
  cfg.validate();
  if (odom_s.size() < 2) throw WindowUnderflow("need at least 2 SLAM poses");
  for (std::size_t i = 1; i < ranges.size(); ++i)
    if (ranges[i].t < ranges[i - 1].t) throw OutOfRange("range measurements must be sorted by time");

  FusionResult out;
  out.kept.assign(ranges.size(), false);
  const double t0 = odom_s.start_time();
  std::vector<RangeMeasurement> stationary;
  for (const auto& m : ranges)
    if (m.t >= t0 && m.t <= t0 + cfg.stationary_duration) stationary.push_back(m);
  out.init = initialize(stationary, anchors, biases, extrinsics, cfg);

  FusionPipeline pipe(anchors, biases, extrinsics, cfg);
  pipe.start(odom_s[0], out.init.pose);

  std::size_t next = 0;
  while (next < ranges.size() && ranges[next].t < t0) ++next;
  const std::size_t before = next;
  for (std::size_t k = 1; k < odom_s.size(); ++k) {
    const std::size_t begin = next;
    std::vector<RangeMeasurement> batch;
    while (next < ranges.size() && ranges[next].t <= odom_s[k].t) batch.push_back(ranges[next++]);
    const std::vector<bool> kept = pipe.push(odom_s[k], batch);
    for (std::size_t i = 0; i < kept.size(); ++i) out.kept[begin + i] = kept[i];
  }
  pipe.finish();
  out.windows = pipe.reports();
  out.unbracketed = pipe.unbracketed() + before + (ranges.size() - next);
  out.trajectory = Trajectory(pipe.confirmed(), Frame::U);
  return out;
}

inline FusionResult run_fusion(const Trajectory& odom_s, const std::vector<RangeMeasurement>& ranges,
                               const CalibrationResult& calib, const TagExtrinsics& extrinsics,
                               const FusionConfig& cfg) {
  return run_fusion(odom_s, ranges, calib.anchors, calib.biases, extrinsics, cfg);
}

}  // namespace uwbcal
