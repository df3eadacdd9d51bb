#pragma once

// Two-stage anchor position calibration from one SLAM trajectory and its
// range log: robust solve on everything, residual gate, robust re-solve on
// the survivors.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "uwbcal/error.hpp"
#include "uwbcal/factors.hpp"
#include "uwbcal/geometry.hpp"
#include "uwbcal/solver.hpp"

namespace uwbcal {

enum class AnchorInit { Centroid, Trilaterate, File };

inline const char* to_string(AnchorInit s) {
  switch (s) {
    case AnchorInit::Centroid: return "centroid";
    case AnchorInit::Trilaterate: return "trilaterate";
    case AnchorInit::File: return "file";
  }
  return "?";
}

inline AnchorInit anchor_init_from_string(const std::string& s) {
  if (s == "centroid") return AnchorInit::Centroid;
  if (s == "trilaterate") return AnchorInit::Trilaterate;
  if (s == "file") return AnchorInit::File;
  throw ConfigError("unknown anchor init strategy '" + s + "'");
}

inline SolverOptions default_apc_solver_options() {
  SolverOptions o;
  o.max_iters = 200;
  o.rel_tol = 1e-14;
  o.grad_tol = 1e-12;
  return o;
}

struct ApcConfig {
  double tau = 0.5;           // m, gate threshold
  double cauchy_scale = 1.0;  // m
  AnchorInit init = AnchorInit::Trilaterate;
  std::map<AnchorId, Vec3> initial_anchors;  // used by AnchorInit::File
  bool use_height_priors = false;
  int refilter_rounds = 0;  // extra gate + solve rounds after stage 2
  std::size_t min_bias_inliers = 50;
  SolverOptions solver = default_apc_solver_options();

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(cauchy_scale > 0.0)) throw ConfigError("cauchy scale must be positive");
    if (refilter_rounds < 0) throw ConfigError("refilter rounds must be non-negative");
  }
};

enum class RejectReason { Residual, OutOfSpan, UnknownLink };

inline const char* to_string(RejectReason r) {
  switch (r) {
    case RejectReason::Residual: return "residual";
    case RejectReason::OutOfSpan: return "out_of_span";
    case RejectReason::UnknownLink: return "unknown_link";
  }
  return "?";
}

struct Rejection {
  std::size_t index;  // into the input measurement list
  RejectReason reason;
};

struct FilterResult {
  std::vector<std::size_t> inliers;
  std::vector<Rejection> rejected;

  /// Per-measurement keep flags for a list of size `n`.
  std::vector<bool> kept(std::size_t n) const {
    std::vector<bool> k(n, false);
    for (std::size_t i : inliers) k[i] = true;
    return k;
  }
};

struct LinkStats {
  std::size_t raw = 0;
  std::size_t inliers = 0;
  std::size_t rejected = 0;
  double residual_rms = 0.0;  // over inliers, final estimate
  bool bias_estimated = false;
};

struct CalibrationResult {
  std::map<AnchorId, Vec3> anchors;
  LinkBias biases;
  std::map<LinkKey, LinkStats> links;
  SolveReport stage1;
  SolveReport stage2;
  double stage1_cost_on_inliers = 0.0;
  std::vector<bool> kept;  // final gate decision per input measurement
  std::vector<std::string> warnings;
};

/// Predicted tag-to-anchor distance at the measurement time.
inline double predicted_range(const Trajectory& traj, const RangeMeasurement& m, const Vec3& tag_offset,
                              const Vec3& anchor) {
  const Pose p = traj.interpolate(m.t);
  return (p.transform(tag_offset) - anchor).norm();
}

/// Keeps a measurement iff |(d + b) - predicted| <= tau.
inline FilterResult filter_outliers(const std::vector<RangeMeasurement>& ranges,
                                    const std::map<AnchorId, Vec3>& anchors, const LinkBias& biases,
                                    const Trajectory& traj, const TagExtrinsics& extrinsics, double tau) {
  FilterResult out;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const RangeMeasurement& m = ranges[i];
    auto a = anchors.find(m.anchor);
    auto tag = extrinsics.find(m.tag);
    if (a == anchors.end() || tag == extrinsics.end()) {
      out.rejected.push_back({i, RejectReason::UnknownLink});
      continue;
    }
    if (traj.size() < 2 || !traj.covers(m.t)) {
      out.rejected.push_back({i, RejectReason::OutOfSpan});
      continue;
    }
    const double corrected = m.d + bias_for(biases, m.tag, m.anchor);
    const double predicted = predicted_range(traj, m, tag->second, a->second);
    if (std::abs(corrected - predicted) <= tau)
      out.inliers.push_back(i);
    else
      out.rejected.push_back({i, RejectReason::Residual});
  }
  return out;
}

namespace detail {

inline Vec3 trajectory_centroid(const Trajectory& traj) {
  Vec3 c = Vec3::Zero();
  for (const Pose& p : traj.poses()) c += p.p;
  return c / static_cast<double>(traj.size());
}

inline Vec3 centroid_guess(const Trajectory& traj, std::size_t index, std::size_t count) {
  const double a = 2.0 * kPi * static_cast<double>(index) / static_cast<double>(std::max<std::size_t>(count, 1));
  return trajectory_centroid(traj) + Vec3(std::cos(a), std::sin(a), 1.0);
}

}  // namespace detail

/// Initial anchor position from the measurements of one anchor.
///
/// Trilaterate solves the linearized system |x_i - P|^2 = d_i^2 in
/// (P, |P|^2) over 20 evenly spaced measurements, ignoring bias, and falls
/// back to the centroid strategy when that system is ill-conditioned.
inline Vec3 init_anchor_guess(AnchorInit strategy, const Trajectory& traj,
                              const std::vector<RangeMeasurement>& ranges, const TagExtrinsics& extrinsics,
                              std::size_t anchor_index = 0, std::size_t anchor_count = 1) {
  if (traj.size() == 0) throw InsufficientData("empty trajectory");
  if (strategy == AnchorInit::Trilaterate) {
    std::vector<const RangeMeasurement*> usable;
    for (const auto& m : ranges)
      if (traj.covers(m.t) && extrinsics.contains(m.tag)) usable.push_back(&m);
    const std::size_t n = std::min<std::size_t>(20, usable.size());
    if (n >= 4) {
      Eigen::MatrixXd A(n, 4);
      Eigen::VectorXd b(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = (n == 1) ? 0 : i * (usable.size() - 1) / (n - 1);
        const RangeMeasurement& m = *usable[k];
        const Vec3 x = traj.interpolate(m.t).transform(extrinsics.at(m.tag));
        A.row(static_cast<Eigen::Index>(i)) << -2.0 * x.x(), -2.0 * x.y(), -2.0 * x.z(), 1.0;
        b(static_cast<Eigen::Index>(i)) = m.d * m.d - x.squaredNorm();
      }
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
      const auto& s = svd.singularValues();
      if (s(s.size() - 1) > 1e-6 * s(0)) {
        const Eigen::Vector4d sol = svd.solve(b);
        const Vec3 p = sol.head<3>();
        if (p.allFinite()) return p;
      }
    }
  }
  return detail::centroid_guess(traj, anchor_index, anchor_count);
}

namespace detail {

inline std::string anchor_block(const AnchorId& a) { return "anchor/" + a; }
inline std::string bias_block(const LinkKey& k) { return "bias/" + k.first + "/" + k.second; }

struct CalibrationProblem {
  Problem problem;
  std::vector<AnchorId> anchors;
  std::vector<LinkKey> free_links;
};

inline CalibrationProblem build_problem(const Trajectory& traj, const std::vector<RangeMeasurement>& ranges,
                                        const std::vector<std::size_t>& use, const TagExtrinsics& extrinsics,
                                        const std::vector<AnchorPairPrior>& pair_priors,
                                        const std::vector<AnchorHeightPrior>& height_priors,
                                        const std::map<AnchorId, Vec3>& anchors, const LinkBias& biases,
                                        const std::set<LinkKey>& estimate_bias, const ApcConfig& cfg) {
  CalibrationProblem cp;
  for (const auto& [id, p] : anchors) {
    cp.problem.add_point3(anchor_block(id), p);
    cp.anchors.push_back(id);
  }
  std::set<LinkKey> links;
  for (std::size_t i : use) links.insert({ranges[i].tag, ranges[i].anchor});
  for (const auto& link : links) {
    cp.problem.add_scalar(bias_block(link), bias_for(biases, link.first, link.second));
    if (!estimate_bias.contains(link))
      cp.problem.set_constant(bias_block(link));
    else
      cp.free_links.push_back(link);
  }
  const Loss loss = Loss::cauchy(cfg.cauchy_scale);
  for (std::size_t i : use) {
    const RangeMeasurement& m = ranges[i];
    auto cost = std::make_shared<FixedPoseRangeCost>(traj.interpolate(m.t), extrinsics.at(m.tag), m.d);
    cp.problem.add_residual_block(cost, loss, {anchor_block(m.anchor), bias_block({m.tag, m.anchor})});
  }
  for (const auto& prior : pair_priors) {
    if (!anchors.contains(prior.a) || !anchors.contains(prior.b)) continue;
    cp.problem.add_residual_block(std::make_shared<AnchorAnchorCost>(prior.distance), Loss::none(),
                                  {anchor_block(prior.a), anchor_block(prior.b)});
  }
  if (cfg.use_height_priors) {
    for (const auto& prior : height_priors) {
      if (!anchors.contains(prior.anchor)) continue;
      cp.problem.add_residual_block(std::make_shared<AnchorHeightCost>(prior.height, prior.sigma),
                                    Loss::none(), {anchor_block(prior.anchor)});
    }
  }
  return cp;
}

inline void read_back(const CalibrationProblem& cp, std::map<AnchorId, Vec3>& anchors, LinkBias& biases) {
  for (const auto& id : cp.anchors) anchors[id] = cp.problem.point3(anchor_block(id));
  for (const auto& link : cp.free_links) biases[link] = cp.problem.scalar(bias_block(link));
}

}  // namespace detail

/// Two-stage calibration. Anchors are expressed in the trajectory's frame.
inline CalibrationResult calibrate(const Trajectory& traj, const std::vector<RangeMeasurement>& ranges,
                                   const TagExtrinsics& extrinsics,
                                   const std::vector<AnchorPairPrior>& pair_priors, const ApcConfig& cfg,
                                   const std::vector<AnchorHeightPrior>& height_priors = {}) {
  cfg.validate();
  if (traj.size() < 2) throw InsufficientData("trajectory needs at least 2 poses");
  CalibrationResult result;

  // In-span measurements per anchor; everything else is rejected up front.
  std::vector<std::size_t> usable;
  std::map<AnchorId, std::vector<RangeMeasurement>> per_anchor;
  std::size_t in_span = 0;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const RangeMeasurement& m = ranges[i];
    result.links[{m.tag, m.anchor}].raw++;
    if (!traj.covers(m.t)) continue;
    ++in_span;
    if (!extrinsics.contains(m.tag) || !m.valid()) continue;
    usable.push_back(i);
    per_anchor[m.anchor].push_back(m);
  }
  if (in_span == 0) throw NoOverlap("no range measurement falls inside the trajectory span");
  for (const auto& [id, ms] : per_anchor)
    if (ms.size() < 4)
      throw InsufficientData("anchor " + id + " has " + std::to_string(ms.size()) + " usable measurements");
  for (const auto& [link, stats] : result.links)
    if (!extrinsics.contains(link.first))
      result.warnings.push_back("tag " + link.first + " has no extrinsics; its measurements are ignored");

  // Initial guess.
  std::map<AnchorId, Vec3> anchors;
  std::size_t idx = 0;
  for (const auto& [id, ms] : per_anchor) {
    if (cfg.init == AnchorInit::File) {
      auto it = cfg.initial_anchors.find(id);
      if (it == cfg.initial_anchors.end()) throw ConfigError("no initial position for anchor " + id);
      anchors[id] = it->second;
    } else {
      anchors[id] = init_anchor_guess(cfg.init, traj, ms, extrinsics, idx, per_anchor.size());
    }
    ++idx;
  }
  for (const auto& prior : pair_priors)
    if (!anchors.contains(prior.a) || !anchors.contains(prior.b))
      result.warnings.push_back("pair prior " + prior.a + "-" + prior.b + " references an unobserved anchor");

  LinkBias biases;
  auto bias_links = [&](const std::vector<std::size_t>& set) {
    std::map<LinkKey, std::size_t> count;
    for (std::size_t i : set) count[{ranges[i].tag, ranges[i].anchor}]++;
    std::set<LinkKey> est;
    for (const auto& [link, n] : count) {
      if (n >= cfg.min_bias_inliers) {
        est.insert(link);
      } else {
        biases[link] = 0.0;
      }
    }
    return est;
  };

  // Stage 1: all usable measurements.
  std::set<LinkKey> est = bias_links(usable);
  auto stage1 = detail::build_problem(traj, ranges, usable, extrinsics, pair_priors, height_priors, anchors,
                                      biases, est, cfg);
  result.stage1 = solve(stage1.problem, cfg.solver);
  detail::read_back(stage1, anchors, biases);

  // Gate and Stage 2 (plus optional extra rounds).
  FilterResult filtered;
  for (int round = 0; round <= cfg.refilter_rounds; ++round) {
    filtered = filter_outliers(ranges, anchors, biases, traj, extrinsics, cfg.tau);
    std::erase_if(filtered.inliers, [&](std::size_t i) { return !ranges[i].valid(); });
    for (const auto& [id, p] : anchors) {
      std::size_t n = 0;
      for (std::size_t i : filtered.inliers) n += ranges[i].anchor == id;
      if (n < 4) throw InsufficientData("anchor " + id + " has " + std::to_string(n) + " inliers after gating");
    }
    est = bias_links(filtered.inliers);
    auto stage2 = detail::build_problem(traj, ranges, filtered.inliers, extrinsics, pair_priors, height_priors,
                                        anchors, biases, est, cfg);
    if (round == 0) result.stage1_cost_on_inliers = stage2.problem.evaluate_cost();
    result.stage2 = solve(stage2.problem, cfg.solver);
    detail::read_back(stage2, anchors, biases);
  }

  result.anchors = anchors;
  result.biases = biases;
  result.kept = filtered.kept(ranges.size());

  std::map<LinkKey, double> sq;
  for (std::size_t i : filtered.inliers) {
    const RangeMeasurement& m = ranges[i];
    const LinkKey key{m.tag, m.anchor};
    const double e = predicted_range(traj, m, extrinsics.at(m.tag), anchors.at(m.anchor)) -
                     (m.d + bias_for(biases, m.tag, m.anchor));
    sq[key] += e * e;
    result.links[key].inliers++;
  }
  for (auto& [link, stats] : result.links) {
    stats.rejected = stats.raw - stats.inliers;
    stats.residual_rms = stats.inliers ? std::sqrt(sq[link] / static_cast<double>(stats.inliers)) : 0.0;
    stats.bias_estimated = est.contains(link);
    if (stats.inliers > 0 && !stats.bias_estimated) {
      result.warnings.push_back("link " + link.first + "/" + link.second + " has " +
                                std::to_string(stats.inliers) + " inliers; bias fixed to 0");
    }
    if (!result.biases.contains(link) && stats.inliers > 0) result.biases[link] = 0.0;
  }
  return result;
}

}  // namespace uwbcal
