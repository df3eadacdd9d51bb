#pragma once

// Residuals shared by anchor calibration and range/odometry fusion.
//
// Range sign convention everywhere: e = predicted - (measured + bias), so the
// bias-corrected measurement is d + b.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "uwbcal/error.hpp"
#include "uwbcal/geometry.hpp"
#include "uwbcal/solver.hpp"

namespace uwbcal {

using RowVec3 = Eigen::RowVector3d;
using RowVec6 = Eigen::Matrix<double, 1, 6>;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

using TagId = std::string;
using AnchorId = std::string;

struct RangeMeasurement {
  double t = 0.0;
  TagId tag;
  AnchorId anchor;
  double d = 0.0;

  bool valid() const { return std::isfinite(d) && d > 0.0 && std::isfinite(t); }
};

/// Body-frame lever arm of each tag.
using TagExtrinsics = std::map<TagId, Vec3>;

struct AnchorPairPrior {
  AnchorId a;
  AnchorId b;
  double distance = 0.0;
};

struct AnchorHeightPrior {
  AnchorId anchor;
  double height = 0.0;
  double sigma = 0.1;
};

using LinkKey = std::pair<TagId, AnchorId>;
using LinkBias = std::map<LinkKey, double>;

inline double bias_for(const LinkBias& biases, const TagId& tag, const AnchorId& anchor) {
  auto it = biases.find({tag, anchor});
  return it == biases.end() ? 0.0 : it->second;
}

inline constexpr double kDegenerateDistance = 1e-9;

// ---------------------------------------------------------------------------
// Residual functions

struct RangeJacobians {
  RowVec6 pose;     // [dtheta, dp]
  RowVec3 anchor;
  double bias = 0.0;
};

/// ||p + R*tag_offset - anchor|| - (d + bias).
inline double range_residual(const Pose& pose, const Vec3& tag_offset, const Vec3& anchor, double bias,
                             double d, RangeJacobians* jac = nullptr) {
  const Vec3 lever = pose.r * tag_offset;
  const Vec3 diff = pose.p + lever - anchor;
  const double dist = diff.norm();
  if (dist < kDegenerateDistance) throw DegenerateGeometry("tag coincides with anchor");
  if (jac) {
    const RowVec3 n = (diff / dist).transpose();
    jac->pose.head<3>() = -n * pose.r.matrix() * skew(tag_offset);
    jac->pose.tail<3>() = n;
    jac->anchor = -n;
    jac->bias = -1.0;
  }
  return dist - (d + bias);
}

struct InterpolatedRangeJacobians {
  RowVec6 pose_k;
  RowVec6 pose_k1;
};

/// Range residual against the pose interpolated at weight u between two
/// estimated poses (linear translation, slerped rotation).
inline double interpolated_range_residual(const Pose& pk, const Pose& pk1, double u,
                                          const Vec3& tag_offset, const Vec3& anchor, double bias,
                                          double d, InterpolatedRangeJacobians* jac = nullptr) {
  const Vec3 phi = (pk.r.inverse() * pk1.r).log();
  const Rotation partial = Rotation::exp(u * phi);
  const Rotation rm = pk.r * partial;
  const Vec3 pm = (1.0 - u) * pk.p + u * pk1.p;
  const Vec3 diff = pm + rm * tag_offset - anchor;
  const double dist = diff.norm();
  if (dist < kDegenerateDistance) throw DegenerateGeometry("tag coincides with anchor");
  if (jac) {
    const RowVec3 n = (diff / dist).transpose();
    const RowVec3 drot = -n * rm.matrix() * skew(tag_offset);  // wrt right perturbation of rm
    const Mat3 B = u * so3_right_jacobian(u * phi) * so3_right_jacobian_inv(phi);
    const Mat3 D = Rotation::exp(phi).matrix();
    const Mat3 eps_k = partial.matrix().transpose() - B * D.transpose();
    jac->pose_k.head<3>() = drot * eps_k;
    jac->pose_k.tail<3>() = (1.0 - u) * n;
    jac->pose_k1.head<3>() = drot * B;
    jac->pose_k1.tail<3>() = u * n;
  }
  return dist - (d + bias);
}

struct AnchorPairJacobians {
  RowVec3 a;
  RowVec3 b;
};

/// ||Pa - Pb|| - distance.
inline double anchor_anchor_residual(const Vec3& pa, const Vec3& pb, double distance,
                                     AnchorPairJacobians* jac = nullptr) {
  const Vec3 diff = pa - pb;
  const double dist = diff.norm();
  if (dist < kDegenerateDistance) throw DegenerateGeometry("coincident anchors");
  if (jac) {
    jac->a = (diff / dist).transpose();
    jac->b = -jac->a;
  }
  return dist - distance;
}

/// (Pa.z - h) / sigma.
inline double anchor_height_residual(const Vec3& pa, double height, double sigma,
                                     RowVec3* jac = nullptr) {
  if (!(sigma > 0.0)) throw DegenerateGeometry("height prior sigma must be positive");
  if (jac) *jac = RowVec3(0.0, 0.0, 1.0 / sigma);
  return (pa.z() - height) / sigma;
}

struct RelativePoseJacobians {
  Mat6 pose_i;
  Mat6 pose_j;
};

/// s * [ Log(dR^-1 Ri^T Rj) ; Ri^T (pj - pi) - dp ].
inline Vec6 relative_pose_residual(const Pose& ti, const Pose& tj, const Pose& delta, double s = 1.0,
                                   RelativePoseJacobians* jac = nullptr) {
  const Rotation rel = ti.r.inverse() * tj.r;
  const Vec3 rot_err = (delta.r.inverse() * rel).log();
  const Mat3 RiT = ti.r.matrix().transpose();
  const Vec3 local = RiT * (tj.p - ti.p);
  Vec6 e;
  e.head<3>() = rot_err;
  e.tail<3>() = local - delta.p;
  if (jac) {
    const Mat3 jr_inv = so3_right_jacobian_inv(rot_err);
    jac->pose_i.setZero();
    jac->pose_j.setZero();
    jac->pose_i.block<3, 3>(0, 0) = -jr_inv * rel.matrix().transpose();
    jac->pose_j.block<3, 3>(0, 0) = jr_inv;
    jac->pose_i.block<3, 3>(3, 0) = skew(local);
    jac->pose_i.block<3, 3>(3, 3) = -RiT;
    jac->pose_j.block<3, 3>(3, 3) = RiT;
    jac->pose_i *= s;
    jac->pose_j *= s;
  }
  return s * e;
}

/// [ Log(R0^-1 R) ; p - p0 ] against a fixed prior pose.
inline Vec6 pose_prior_residual(const Pose& pose, const Pose& prior, Mat6* jac = nullptr) {
  const Vec3 rot_err = (prior.r.inverse() * pose.r).log();
  Vec6 e;
  e.head<3>() = rot_err;
  e.tail<3>() = pose.p - prior.p;
  if (jac) {
    jac->setZero();
    jac->block<3, 3>(0, 0) = so3_right_jacobian_inv(rot_err);
    jac->block<3, 3>(3, 3).setIdentity();
  }
  return e;
}

struct InitJacobians {
  RowVec3 position;
  double yaw = 0.0;
};

/// ||Rz(psi) * level * tag_offset + p0 - anchor|| - d. `level` holds the
/// fixed pitch/roll part of the initial attitude (identity reproduces the
/// pure-yaw lever arm).
inline double init_residual(const Vec3& p0, double psi, const Vec3& tag_offset, const Vec3& anchor,
                            double d, const Rotation& level = Rotation(),
                            InitJacobians* jac = nullptr) {
  const Vec3 lever = Rotation::about_z(psi) * (level * tag_offset);
  const Vec3 diff = lever + p0 - anchor;
  const double dist = diff.norm();
  if (dist < kDegenerateDistance) throw DegenerateGeometry("tag coincides with anchor");
  if (jac) {
    const RowVec3 n = (diff / dist).transpose();
    jac->position = n;
    jac->yaw = n.dot(Vec3::UnitZ().cross(lever));
  }
  return dist - d;
}

// ---------------------------------------------------------------------------
// Solver adapters

/// Range against free pose, anchor and bias blocks.
class RangeCost final : public CostFunction {
 public:
  RangeCost(Vec3 tag_offset, double d)
      : CostFunction(1, {BlockKind::Pose, BlockKind::Point3, BlockKind::Scalar}),
        offset_(std::move(tag_offset)), d_(d) {}

  void evaluate(const double* const* x, double* r, double* const* J) const override {
    const Pose pose = pose_from_block(x[0]);
    const Vec3 anchor(x[1][0], x[1][1], x[1][2]);
    RangeJacobians jac;
    r[0] = range_residual(pose, offset_, anchor, x[2][0], d_, J ? &jac : nullptr);
    if (!J) return;
    if (J[0]) Eigen::Map<RowVec6>{J[0]} = jac.pose;
    if (J[1]) Eigen::Map<RowVec3>{J[1]} = jac.anchor;
    if (J[2]) J[2][0] = jac.bias;
  }

 private:
  Vec3 offset_;
  double d_;
};

/// Range with the body pose fixed (calibration): blocks [anchor, bias].
class FixedPoseRangeCost final : public CostFunction {
 public:
  FixedPoseRangeCost(const Pose& pose, const Vec3& tag_offset, double d)
      : CostFunction(1, {BlockKind::Point3, BlockKind::Scalar}),
        pose_(pose), offset_(tag_offset), d_(d) {}

  void evaluate(const double* const* x, double* r, double* const* J) const override {
    const Vec3 anchor(x[0][0], x[0][1], x[0][2]);
    RangeJacobians jac;
    r[0] = range_residual(pose_, offset_, anchor, x[1][0], d_, J ? &jac : nullptr);
    if (!J) return;
    if (J[0]) Eigen::Map<RowVec3>{J[0]} = jac.anchor;
    if (J[1]) J[1][0] = jac.bias;
  }

 private:
  Pose pose_;
  Vec3 offset_;
  double d_;
};

/// Range between two estimated window poses with known anchor and bias.
class InterpolatedRangeCost final : public CostFunction {
 public:
  InterpolatedRangeCost(double u, const Vec3& tag_offset, const Vec3& anchor, double bias, double d)
      : CostFunction(1, {BlockKind::Pose, BlockKind::Pose}),
        u_(u), offset_(tag_offset), anchor_(anchor), bias_(bias), d_(d) {}

  void evaluate(const double* const* x, double* r, double* const* J) const override {
    const Pose pk = pose_from_block(x[0]);
    const Pose pk1 = pose_from_block(x[1]);
    InterpolatedRangeJacobians jac;
    r[0] = interpolated_range_residual(pk, pk1, u_, offset_, anchor_, bias_, d_, J ? &jac : nullptr);
    if (!J) return;
    if (J[0]) Eigen::Map<RowVec6>{J[0]} = jac.pose_k;
    if (J[1]) Eigen::Map<RowVec6>{J[1]} = jac.pose_k1;
  }

 private:
  double u_;
  Vec3 offset_;
  Vec3 anchor_;
  double bias_;
  double d_;
};

class AnchorAnchorCost final : public CostFunction {
 public:
  explicit AnchorAnchorCost(double distance)
      : CostFunction(1, {BlockKind::Point3, BlockKind::Point3}), distance_(distance) {}

  void evaluate(const double* const* x, double* r, double* const* J) const override {
    AnchorPairJacobians jac;
    r[0] = anchor_anchor_residual(Vec3(x[0][0], x[0][1], x[0][2]), Vec3(x[1][0], x[1][1], x[1][2]),
                                  distance_, J ? &jac : nullptr);
    if (!J) return;
    if (J[0]) Eigen::Map<RowVec3>{J[0]} = jac.a;
    if (J[1]) Eigen::Map<RowVec3>{J[1]} = jac.b;
  }

 private:
  double distance_;
};

class AnchorHeightCost final : public CostFunction {
 public:
  AnchorHeightCost(double height, double sigma)
      : CostFunction(1, {BlockKind::Point3}), height_(height), sigma_(sigma) {}

  void evaluate(const double* const* x, double* r, double* const* J) const override {
    RowVec3 jac;
    r[0] = anchor_height_residual(Vec3(x[0][0], x[0][1], x[0][2]), height_, sigma_,
                                  J ? &jac : nullptr);
    if (J && J[0]) Eigen::Map<RowVec3>{J[0]} = jac;
  }

 private:
  double height_;
  double sigma_;
};

class RelativePoseCost final : public CostFunction {
 public:
  explicit RelativePoseCost(const Pose& delta, double scale = 1.0)
      : CostFunction(6, {BlockKind::Pose, BlockKind::Pose}), delta_(delta), scale_(scale) {}

  void evaluate(const double* const* x, double* r, double* const* J) const override {
    RelativePoseJacobians jac;
    const Vec6 e = relative_pose_residual(pose_from_block(x[0]), pose_from_block(x[1]), delta_,
                                          scale_, J ? &jac : nullptr);
    Eigen::Map<Vec6>{r} = e;
    if (!J) return;
    using RowMat6 = Eigen::Matrix<double, 6, 6, Eigen::RowMajor>;
    if (J[0]) Eigen::Map<RowMat6>{J[0]} = jac.pose_i;
    if (J[1]) Eigen::Map<RowMat6>{J[1]} = jac.pose_j;
  }

 private:
  Pose delta_;
  double scale_;
};

class PosePriorCost final : public CostFunction {
 public:
  explicit PosePriorCost(const Pose& prior) : CostFunction(6, {BlockKind::Pose}), prior_(prior) {}

  void evaluate(const double* const* x, double* r, double* const* J) const override {
    Mat6 jac;
    Eigen::Map<Vec6>{r} = pose_prior_residual(pose_from_block(x[0]), prior_, J ? &jac : nullptr);
    if (J && J[0]) Eigen::Map<Eigen::Matrix<double, 6, 6, Eigen::RowMajor>>{J[0]} = jac;
  }

 private:
  Pose prior_;
};

/// Stationary initialization residual over [position, yaw].
class InitRangeCost final : public CostFunction {
 public:
  InitRangeCost(const Vec3& tag_offset, const Vec3& anchor, double d, const Rotation& level)
      : CostFunction(1, {BlockKind::Point3, BlockKind::Yaw}),
        offset_(tag_offset), anchor_(anchor), d_(d), level_(level) {}

  void evaluate(const double* const* x, double* r, double* const* J) const override {
    InitJacobians jac;
    r[0] = init_residual(Vec3(x[0][0], x[0][1], x[0][2]), x[1][0], offset_, anchor_, d_, level_,
                         J ? &jac : nullptr);
    if (!J) return;
    if (J[0]) Eigen::Map<RowVec3>{J[0]} = jac.position;
    if (J[1]) J[1][0] = jac.yaw;
  }

 private:
  Vec3 offset_;
  Vec3 anchor_;
  double d_;
  Rotation level_;
};

/// Square-root information of the odometry increment factor:
/// diag(1/sigma_rot x3, 1/sigma_trans x3).
inline Eigen::MatrixXd odometry_sqrt_information(double sigma_rot, double sigma_trans) {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(6, 6);
  w.diagonal().head<3>().setConstant(1.0 / sigma_rot);
  w.diagonal().tail<3>().setConstant(1.0 / sigma_trans);
  return w;
}

}  // namespace uwbcal
