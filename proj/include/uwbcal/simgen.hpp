#pragma once

// Deterministic synthetic scenes for calibration and fusion, with ground
// truth and per-measurement spike labels.
//
// The truth trajectory is the sequence of odometry-rate poses; the
// continuous-time truth between them is the same linear/slerp interpolant
// the estimators use, so noiseless data is exactly consistent with the
// measurement model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "uwbcal/error.hpp"
#include "uwbcal/factors.hpp"
#include "uwbcal/geometry.hpp"

namespace uwbcal {

enum class TrajectoryKind { Figure8, Lawnmower, RandomWaypoint };

inline const char* to_string(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::Figure8: return "figure8";
    case TrajectoryKind::Lawnmower: return "lawnmower";
    case TrajectoryKind::RandomWaypoint: return "random_waypoint";
  }
  return "?";
}

inline TrajectoryKind trajectory_kind_from_string(const std::string& s) {
  if (s == "figure8" || s == "figure-8") return TrajectoryKind::Figure8;
  if (s == "lawnmower") return TrajectoryKind::Lawnmower;
  if (s == "random_waypoint" || s == "random-waypoint") return TrajectoryKind::RandomWaypoint;
  throw ConfigError("unknown trajectory kind '" + s + "'");
}

/// Per-step random-walk noise on odometry increments.
struct DriftModel {
  double sigma_trans = 0.0;  // m per step
  double sigma_rot = 0.0;    // rad per step
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  Vec3 volume_min{-10.0, -10.0, 0.0};
  Vec3 volume_max{10.0, 10.0, 4.0};

  /// Empty: `anchor_count` anchors placed near the volume corners at
  /// distinct heights, named "100", "101", ...
  std::map<AnchorId, Vec3> anchors;
  int anchor_count = 4;

  TagExtrinsics tags{{"200A", Vec3(0.4, 0.0, 0.0)}, {"201A", Vec3(-0.4, 0.0, 0.0)}};

  TrajectoryKind kind = TrajectoryKind::Figure8;
  double calibration_duration = 300.0;  // s
  double fusion_duration = 300.0;       // s
  int sequences = 3;                    // first is the calibration run
  double speed = 1.0;                   // m/s
  double height_mid = 1.5;              // m
  double height_amplitude = 0.5;        // m
  double stationary_duration = 5.0;     // s
  double start_time = 0.0;              // s, timestamp of the first pose

  double odom_rate = 10.0;   // Hz
  double range_rate = 65.0;  // Hz, all links round-robin

  double range_sigma = 0.05;  // m
  double spike_probability = 0.05;
  double spike_min = 1.0;   // m
  double spike_max = 10.0;  // m
  double bias_max = 0.1;    // m, per-link bias ~ U(-bias_max, bias_max)

  DriftModel calibration_drift{};
  DriftModel fusion_drift{0.001, 0.01 * kPi / 180.0};

  double body_roll = kPi;  // fixed roll of the body frame (initial-attitude convention)
  bool pair_priors = true;  // emit exact anchor-to-anchor distances
};

struct RangeLabel {
  bool spike = false;
  double magnitude = 0.0;  // added spike length, m
};

struct SequenceTruth {
  std::string name;
  bool calibration = false;
  Trajectory truth;     // body in U
  Trajectory odometry;  // body in S, drifted
  Pose u_from_s;        // T_US
  std::vector<RangeMeasurement> ranges;
  std::vector<RangeLabel> labels;  // parallel to ranges
};

struct ScenarioTruth {
  std::map<AnchorId, Vec3> anchors;
  /// In the estimator's convention: measured + bias = true distance.
  LinkBias biases;
  TagExtrinsics tags;
  std::vector<AnchorPairPrior> pair_priors;
  std::vector<SequenceTruth> sequences;
};

/// Spike-rejection confusion matrix. Positive = spike, "rejected" = flagged.
struct Confusion {
  std::size_t true_positive = 0;   // spike rejected
  std::size_t false_positive = 0;  // clean rejected
  std::size_t true_negative = 0;   // clean kept
  std::size_t false_negative = 0;  // spike kept

  std::size_t spikes() const { return true_positive + false_negative; }
  std::size_t clean() const { return true_negative + false_positive; }
  double spike_recall() const { return spikes() ? double(true_positive) / double(spikes()) : 1.0; }
  double clean_retention() const { return clean() ? double(true_negative) / double(clean()) : 1.0; }

  Confusion& operator+=(const Confusion& o) {
    true_positive += o.true_positive;
    false_positive += o.false_positive;
    true_negative += o.true_negative;
    false_negative += o.false_negative;
    return *this;
  }
};

/// `kept[i]` is the gate decision for measurement i. Spikes smaller than
/// `min_spike` are ignored (neither counted as spike nor clean).
inline Confusion label_report(const std::vector<RangeLabel>& labels, const std::vector<bool>& kept,
                              double min_spike = 0.0) {
  if (labels.size() != kept.size())
    throw LengthMismatch(std::to_string(labels.size()) + " labels vs " +
                         std::to_string(kept.size()) + " decisions");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].spike) {
      if (labels[i].magnitude < min_spike) continue;
      kept[i] ? ++c.false_negative : ++c.true_positive;
    } else {
      kept[i] ? ++c.true_negative : ++c.false_positive;
    }
  }
  return c;
}

namespace detail {

/// Constant-speed traversal of a polyline, bouncing back at the end.
class Polyline {
 public:
  explicit Polyline(std::vector<Eigen::Vector2d> pts) : pts_(std::move(pts)) {
    cum_.push_back(0.0);
    for (std::size_t i = 1; i < pts_.size(); ++i) cum_.push_back(cum_.back() + (pts_[i] - pts_[i - 1]).norm());
  }

  Eigen::Vector2d at(double s) const {
    const double len = cum_.back();
    if (len <= 0.0) return pts_.front();
    double m = std::fmod(s, 2.0 * len);
    if (m > len) m = 2.0 * len - m;
    auto it = std::upper_bound(cum_.begin(), cum_.end(), m);
    std::size_t k = static_cast<std::size_t>(it - cum_.begin());
    k = k == 0 ? 0 : k - 1;
    if (k + 1 >= pts_.size()) k = pts_.size() - 2;
    const double seg = cum_[k + 1] - cum_[k];
    const double u = seg > 0.0 ? (m - cum_[k]) / seg : 0.0;
    return (1.0 - u) * pts_[k] + u * pts_[k + 1];
  }

 private:
  std::vector<Eigen::Vector2d> pts_;
  std::vector<double> cum_;
};

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

inline void validate(const ScenarioConfig& cfg) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (!(cfg.odom_rate > 0.0) || !(cfg.range_rate > 0.0)) fail("rates must be positive");
  if (cfg.spike_probability < 0.0 || cfg.spike_probability > 1.0) fail("spike probability outside [0,1]");
  if (cfg.spike_min < 0.0 || cfg.spike_max < cfg.spike_min) fail("invalid spike magnitude range");
  if (cfg.range_sigma < 0.0 || cfg.bias_max < 0.0) fail("negative noise parameter");
  if (!(cfg.stationary_duration > 0.0)) fail("stationary duration must be positive");
  if (!(cfg.calibration_duration > cfg.stationary_duration) ||
      !(cfg.fusion_duration > cfg.stationary_duration))
    fail("duration must exceed the stationary duration");
  if (cfg.sequences < 1) fail("need at least one sequence");
  if (!(cfg.speed > 0.0)) fail("speed must be positive");
  if ((cfg.volume_max - cfg.volume_min).minCoeff() <= 0.0) fail("empty volume");
  if (cfg.tags.empty()) fail("no tags");
  if (cfg.anchors.empty() && cfg.anchor_count < 1) fail("no anchors");
  for (const auto& [id, p] : cfg.anchors)
    if ((p.array() < cfg.volume_min.array()).any() || (p.array() > cfg.volume_max.array()).any())
      fail("anchor " + id + " outside the volume");
  const double zlo = cfg.height_mid - cfg.height_amplitude;
  const double zhi = cfg.height_mid + cfg.height_amplitude;
  if (zlo < cfg.volume_min.z() || zhi > cfg.volume_max.z()) fail("trajectory heights leave the volume");
}

inline std::map<AnchorId, Vec3> place_anchors(const ScenarioConfig& cfg) {
  if (!cfg.anchors.empty()) return cfg.anchors;
  std::map<AnchorId, Vec3> out;
  const Vec3 lo = cfg.volume_min, hi = cfg.volume_max;
  const Vec3 span = hi - lo;
  const Vec3 margin = 0.05 * span;
  const int n = cfg.anchor_count;
  for (int i = 0; i < n; ++i) {
    // Walk the perimeter, starting at a corner; heights alternate low/high.
    const double a = 2.0 * kPi * (static_cast<double>(i) / n) + kPi / 4.0 + kPi;
    const double cx = std::clamp(std::cos(a) * std::sqrt(2.0), -1.0, 1.0);
    const double cy = std::clamp(std::sin(a) * std::sqrt(2.0), -1.0, 1.0);
    const Vec3 mid = 0.5 * (lo + hi);
    const double x = mid.x() + cx * (0.5 * span.x() - margin.x());
    const double y = mid.y() + cy * (0.5 * span.y() - margin.y());
    const double frac = (i % 2 == 0) ? 0.12 + 0.1 * (i / 2) : 0.88 - 0.1 * (i / 2);
    const double z = lo.z() + std::clamp(frac, 0.05, 0.95) * span.z();
    out.emplace(std::to_string(100 + i), Vec3(x, y, z));
  }
  return out;
}

/// Horizontal path generator for one sequence, parameterized by arc length.
struct PathShape {
  TrajectoryKind kind;
  Eigen::Vector2d center;
  Eigen::Vector2d half;  // usable half-extent
  double phase = 0.0;
  std::optional<Polyline> polyline;

  Eigen::Vector2d at(double s) const {
    if (kind == TrajectoryKind::Figure8) {
      // Gerono lemniscate; arc length per radian roughly half.x.
      const double w = s / std::max(half.x(), 1e-6) + phase;
      return center + Eigen::Vector2d(half.x() * std::sin(w), half.y() * std::sin(w) * std::cos(w));
    }
    return polyline->at(s);
  }
};

inline PathShape make_path(const ScenarioConfig& cfg, std::mt19937_64& rng) {
  const Vec3 mid = 0.5 * (cfg.volume_min + cfg.volume_max);
  const Vec3 half3 = 0.5 * (cfg.volume_max - cfg.volume_min);
  PathShape shape{cfg.kind, mid.head<2>(), 0.7 * half3.head<2>(), 0.0, std::nullopt};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  switch (cfg.kind) {
    case TrajectoryKind::Figure8:
      shape.phase = 2.0 * kPi * unit(rng);
      break;
    case TrajectoryKind::Lawnmower: {
      std::vector<Eigen::Vector2d> pts;
      const double spacing = std::max(1.0, shape.half.y() / 3.0);
      const double offset = spacing * unit(rng);
      bool forward = true;
      for (double y = -shape.half.y() + offset; y <= shape.half.y(); y += spacing) {
        const double xa = forward ? -shape.half.x() : shape.half.x();
        pts.emplace_back(shape.center + Eigen::Vector2d(xa, y));
        pts.emplace_back(shape.center + Eigen::Vector2d(-xa, y));
        forward = !forward;
      }
      shape.polyline.emplace(std::move(pts));
      break;
    }
    case TrajectoryKind::RandomWaypoint: {
      std::vector<Eigen::Vector2d> pts;
      std::uniform_real_distribution<double> ux(-shape.half.x(), shape.half.x());
      std::uniform_real_distribution<double> uy(-shape.half.y(), shape.half.y());
      for (int i = 0; i < 64; ++i) pts.emplace_back(shape.center + Eigen::Vector2d(ux(rng), uy(rng)));
      shape.polyline.emplace(std::move(pts));
      break;
    }
  }
  return shape;
}

/// Motion time with a linear speed ramp over the first `ramp` seconds.
inline double eased(double tau, double ramp) {
  if (tau <= 0.0) return 0.0;
  if (tau < ramp) return tau * tau / (2.0 * ramp);
  return tau - 0.5 * ramp;
}

}  // namespace detail

/// Builds the scene and every sequence. Deterministic in `cfg.seed`.
inline ScenarioTruth generate(const ScenarioConfig& cfg) {
  detail::validate(cfg);
  ScenarioTruth out;
  out.anchors = detail::place_anchors(cfg);
  out.tags = cfg.tags;
  for (const auto& [id, p] : out.anchors)
    if ((p.array() < cfg.volume_min.array()).any() || (p.array() > cfg.volume_max.array()).any())
      throw ConfigError("anchor " + id + " outside the volume");

  {
    auto rng = detail::make_rng(cfg.seed, 0, 1);
    std::uniform_real_distribution<double> bias(-cfg.bias_max, cfg.bias_max);
    for (const auto& [tag, off] : out.tags)
      for (const auto& [anchor, pos] : out.anchors) out.biases[{tag, anchor}] = bias(rng);
  }
  if (cfg.pair_priors) {
    for (auto a = out.anchors.begin(); a != out.anchors.end(); ++a)
      for (auto b = std::next(a); b != out.anchors.end(); ++b)
        out.pair_priors.push_back({a->first, b->first, (a->second - b->second).norm()});
  }

  std::vector<LinkKey> links;
  for (const auto& [tag, off] : out.tags)
    for (const auto& [anchor, pos] : out.anchors) links.emplace_back(tag, anchor);

  for (int s = 0; s < cfg.sequences; ++s) {
    SequenceTruth seq;
    seq.calibration = (s == 0);
    seq.name = (s + 1 < 10 ? "seq0" : "seq") + std::to_string(s + 1);
    const double duration = seq.calibration ? cfg.calibration_duration : cfg.fusion_duration;
    const DriftModel drift = seq.calibration ? cfg.calibration_drift : cfg.fusion_drift;

    auto path_rng = detail::make_rng(cfg.seed, s + 1, 2);
    const detail::PathShape path = detail::make_path(cfg, path_rng);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double yaw0 = wrap_angle(2.0 * kPi * unit(path_rng));
    const double yaw_amp = 0.6 * unit(path_rng) + 0.2;

    // Truth at odometry rate.
    const auto steps = static_cast<std::size_t>(std::floor(duration * cfg.odom_rate + 1e-9));
    std::vector<Pose> truth;
    truth.reserve(steps + 1);
    const double z_omega = 2.0 * kPi / 20.0;
    for (std::size_t k = 0; k <= steps; ++k) {
      const double t = cfg.start_time + static_cast<double>(k) / cfg.odom_rate;
      const double tau = detail::eased(t - cfg.start_time - cfg.stationary_duration, 2.0);
      const Eigen::Vector2d xy = path.at(cfg.speed * tau);
      const double z = cfg.height_mid + cfg.height_amplitude * std::sin(z_omega * tau);
      const double yaw = yaw0 + yaw_amp * std::sin(0.15 * tau);
      const double pitch = deg2rad(3.0) * std::sin(0.7 * tau);
      const double roll = deg2rad(3.0) * std::sin(0.5 * tau);
      const Rotation r = Rotation::about_z(yaw) * Rotation::about_y(pitch) *
                         Rotation::about_x(cfg.body_roll + roll);
      truth.push_back(Pose{t, Vec3(xy.x(), xy.y(), z), r});
    }
    seq.truth = Trajectory(truth, Frame::U);

    // S frame: identity for the calibration run (U is defined as its S).
    auto frame_rng = detail::make_rng(cfg.seed, s + 1, 3);
    if (seq.calibration) {
      seq.u_from_s = Pose::identity();
    } else {
      std::uniform_real_distribution<double> yaw(-kPi, kPi);
      std::uniform_real_distribution<double> xy(-5.0, 5.0);
      std::uniform_real_distribution<double> z(-1.0, 1.0);
      const double psi = yaw(frame_rng);
      const Vec3 trans(xy(frame_rng), xy(frame_rng), z(frame_rng));
      seq.u_from_s = Pose{0.0, trans, Rotation::about_z(psi)};
    }
    const Pose s_from_u = inverse(seq.u_from_s);

    // Drifted odometry: truth increments with per-step random-walk noise.
    auto odo_rng = detail::make_rng(cfg.seed, s + 1, 4);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<Pose> odo;
    odo.reserve(truth.size());
    Pose chain = truth.front();
    odo.push_back(compose(s_from_u, chain));
    for (std::size_t k = 1; k < truth.size(); ++k) {
      Pose inc = between(truth[k - 1], truth[k]);
      if (drift.sigma_trans > 0.0 || drift.sigma_rot > 0.0) {
        const Vec3 dp(n01(odo_rng), n01(odo_rng), n01(odo_rng));
        const Vec3 dr(n01(odo_rng), n01(odo_rng), n01(odo_rng));
        inc.p += drift.sigma_trans * dp;
        inc.r = inc.r * Rotation::exp(drift.sigma_rot * dr);
      }
      chain = compose(chain, inc);
      chain.t = truth[k].t;
      Pose s_pose = compose(s_from_u, chain);
      s_pose.t = truth[k].t;
      odo.push_back(s_pose);
    }
    seq.odometry = Trajectory(odo, Frame::S);

    // Ranges, round-robin across links.
    auto range_rng = detail::make_rng(cfg.seed, s + 1, 5);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_real_distribution<double> spike(cfg.spike_min, cfg.spike_max);
    const double t_end = seq.truth.end_time();
    for (std::size_t m = 0;; ++m) {
      const double t = cfg.start_time + (static_cast<double>(m) + 0.5) / cfg.range_rate;
      if (t > t_end) break;
      const LinkKey& link = links[m % links.size()];
      const Pose pose = seq.truth.interpolate(t);
      const Vec3 tag_pos = pose.transform(out.tags.at(link.first));
      double d = (tag_pos - out.anchors.at(link.second)).norm() - out.biases.at(link);
      d += cfg.range_sigma * noise(range_rng);
      RangeLabel label;
      if (coin(range_rng) < cfg.spike_probability) {
        label.spike = true;
        label.magnitude = spike(range_rng);
        d += label.magnitude;
      }
      if (!(d > 0.0)) continue;
      seq.ranges.push_back({t, link.first, link.second, d});
      seq.labels.push_back(label);
    }
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

}  // namespace uwbcal
