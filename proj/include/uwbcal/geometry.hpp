#pragma once

// Rotation / rigid-transform algebra used by every factor.
//
// Conventions:
//  * Rotations are unit quaternions with w >= 0 (double cover folded).
//  * Tangent perturbations are right-multiplicative: R <- R * Exp(dtheta).
//  * Pose tangent ordering is [dtheta; dp] (rotation first).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "uwbcal/error.hpp"

namespace uwbcal {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Wraps an angle to [-pi, pi).
inline double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a < 0.0) a += 2.0 * kPi;
  return a - kPi;
}

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}

  /// Normalizes (only when the input is measurably off the unit sphere, so
  /// already-unit values pass through bit-for-bit) and folds w to >= 0.
  static Rotation from_wxyz(double w, double x, double y, double z) {
    return Rotation(Eigen::Quaterniond(w, x, y, z));
  }
  static Rotation from_quaternion(const Eigen::Quaterniond& q) { return Rotation(q); }
  static Rotation from_matrix(const Mat3& m) { return Rotation(Eigen::Quaterniond(m)); }

  static Rotation about_x(double angle) {
    return Rotation(Eigen::Quaterniond(Eigen::AngleAxisd(angle, Vec3::UnitX())));
  }
  static Rotation about_y(double angle) {
    return Rotation(Eigen::Quaterniond(Eigen::AngleAxisd(angle, Vec3::UnitY())));
  }
  static Rotation about_z(double angle) {
    return Rotation(Eigen::Quaterniond(Eigen::AngleAxisd(angle, Vec3::UnitZ())));
  }

  /// Exponential map of an axis-angle vector.
  static Rotation exp(const Vec3& phi) {
    const double theta2 = phi.squaredNorm();
    const double theta = std::sqrt(theta2);
    double w;
    double k;  // sin(theta/2)/theta
    if (theta < 1e-6) {
      w = 1.0 - theta2 / 8.0;
      k = 0.5 - theta2 / 48.0;
    } else {
      w = std::cos(0.5 * theta);
      k = std::sin(0.5 * theta) / theta;
    }
    return Rotation(Eigen::Quaterniond(w, k * phi.x(), k * phi.y(), k * phi.z()));
  }

  /// Axis-angle vector theta*axis with theta in [0, pi].
  Vec3 log() const {
    const Vec3 v = q_.vec();
    const double s = v.norm();
    const double w = q_.w();  // >= 0 by construction
    if (s < 1e-6 * std::max(w, 1e-300)) {
      // theta = 2*atan(s/w) ~ 2 s/w (1 - s^2/(3 w^2))
      const double ratio2 = (s * s) / (w * w);
      return (2.0 / w) * (1.0 - ratio2 / 3.0) * v;
    }
    const double theta = 2.0 * std::atan2(s, w);
    return (theta / s) * v;
  }

  double angle() const { return 2.0 * std::atan2(q_.vec().norm(), q_.w()); }

  const Eigen::Quaterniond& quaternion() const { return q_; }
  double w() const { return q_.w(); }
  double x() const { return q_.x(); }
  double y() const { return q_.y(); }
  double z() const { return q_.z(); }

  Mat3 matrix() const { return q_.toRotationMatrix(); }
  Rotation inverse() const { return Rotation(q_.conjugate()); }
  Vec3 rotate(const Vec3& v) const { return q_ * v; }
  Vec3 operator*(const Vec3& v) const { return q_ * v; }
  Rotation operator*(const Rotation& o) const { return Rotation(q_ * o.q_); }

  /// Yaw of the ZYX Euler decomposition.
  double yaw() const {
    const Mat3 m = matrix();
    return std::atan2(m(1, 0), m(0, 0));
  }

 private:
  explicit Rotation(Eigen::Quaterniond q) : q_(q) {
    const double n2 = q_.squaredNorm();
    if (std::abs(n2 - 1.0) > 1e-13) q_.coeffs() /= std::sqrt(n2);
    if (q_.w() < 0.0) q_.coeffs() = -q_.coeffs();
  }

  Eigen::Quaterniond q_;
};

/// Geodesic distance between two rotations, radians.
inline double angular_distance(const Rotation& a, const Rotation& b) {
  return (a.inverse() * b).angle();
}

inline Vec3 so3_log_vee(const Rotation& r) { return r.log(); }
inline Rotation so3_exp(const Vec3& phi) { return Rotation::exp(phi); }

/// Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d).
inline Mat3 so3_right_jacobian(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const Mat3 K = skew(phi);
  if (theta2 < 1e-10) {
    return Mat3::Identity() - 0.5 * K + (1.0 / 6.0) * K * K;
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() - (1.0 - std::cos(theta)) / theta2 * K +
         (theta - std::sin(theta)) / (theta2 * theta) * K * K;
}

/// Inverse right Jacobian: Log(Exp(phi) Exp(d)) ~= phi + Jr^-1(phi) d.
inline Mat3 so3_right_jacobian_inv(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const Mat3 K = skew(phi);
  if (theta2 < 1e-10) {
    return Mat3::Identity() + 0.5 * K + (1.0 / 12.0) * K * K;
  }
  const double theta = std::sqrt(theta2);
  const double c = 1.0 / theta2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Mat3::Identity() + 0.5 * K + c * K * K;
}

/// Shortest-arc spherical interpolation. u in [0, 1].
inline Rotation slerp(const Rotation& r0, const Rotation& r1, double u) {
  if (u == 0.0) return r0;
  if (u == 1.0) return r1;
  // r0^-1 r1 is canonicalized to w >= 0, which is the shortest arc.
  return r0 * Rotation::exp(u * (r0.inverse() * r1).log());
}

/// Timestamped rigid transform of the body in some frame.
struct Pose {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Rotation r;

  static Pose identity(double t = 0.0) { return Pose{t, Vec3::Zero(), Rotation()}; }

  bool is_finite() const {
    return std::isfinite(t) && p.allFinite() && r.quaternion().coeffs().allFinite();
  }

  /// Maps a point from the body frame into the pose's reference frame.
  Vec3 transform(const Vec3& x) const { return p + r * x; }
};

/// a * b. The result carries b's timestamp.
inline Pose compose(const Pose& a, const Pose& b) {
  return Pose{b.t, a.p + a.r * b.p, a.r * b.r};
}

/// a^-1. Keeps a's timestamp.
inline Pose inverse(const Pose& a) {
  const Rotation ri = a.r.inverse();
  return Pose{a.t, -(ri * a.p), ri};
}

/// a^-1 * b: the motion from a to b expressed in a.
inline Pose between(const Pose& a, const Pose& b) { return compose(inverse(a), b); }

/// Linear translation mix, slerped rotation, at weight u in [0, 1].
inline Pose interpolate(const Pose& a, const Pose& b, double u) {
  return Pose{(1.0 - u) * a.t + u * b.t, (1.0 - u) * a.p + u * b.p, slerp(a.r, b.r, u)};
}

enum class Frame { S, U };

inline const char* to_string(Frame f) { return f == Frame::S ? "S" : "U"; }

/// Interval containing a query time: poses k and k+1 with weight u.
struct Bracket {
  std::size_t k = 0;
  double u = 0.0;
};

/// Time-sorted pose sequence with interpolation queries.
class Trajectory {
 public:
  Trajectory() = default;

  /// Requires strictly increasing timestamps and finite poses.
  explicit Trajectory(std::vector<Pose> poses, Frame frame = Frame::S)
      : poses_(std::move(poses)), frame_(frame) {
    for (std::size_t i = 0; i < poses_.size(); ++i) {
      if (!poses_[i].is_finite())
        throw OutOfRange("non-finite pose at index " + std::to_string(i));
      if (i > 0 && !(poses_[i].t > poses_[i - 1].t))
        throw OutOfRange("timestamps not strictly increasing at index " + std::to_string(i));
    }
  }

  const std::vector<Pose>& poses() const { return poses_; }
  std::size_t size() const { return poses_.size(); }
  bool empty() const { return poses_.empty(); }
  const Pose& operator[](std::size_t i) const { return poses_[i]; }
  const Pose& front() const { return poses_.front(); }
  const Pose& back() const { return poses_.back(); }
  Frame frame() const { return frame_; }

  double start_time() const { return poses_.front().t; }
  double end_time() const { return poses_.back().t; }
  bool covers(double t) const {
    return poses_.size() >= 2 && t >= start_time() && t <= end_time();
  }

  /// Binary search for t_k <= t <= t_{k+1}. Throws OutOfRange outside the span.
  Bracket bracket(double t) const {
    if (!covers(t))
      throw OutOfRange("time " + std::to_string(t) + " outside trajectory span");
    auto it = std::upper_bound(poses_.begin(), poses_.end(), t,
                               [](double v, const Pose& p) { return v < p.t; });
    std::size_t k = static_cast<std::size_t>(it - poses_.begin());
    k = (k == 0) ? 0 : k - 1;
    if (k + 1 >= poses_.size()) k = poses_.size() - 2;
    const double u = (t - poses_[k].t) / (poses_[k + 1].t - poses_[k].t);
    return {k, u};
  }

  Pose interpolate(double t) const {
    const Bracket b = bracket(t);
    Pose out = uwbcal::interpolate(poses_[b.k], poses_[b.k + 1], b.u);
    out.t = t;
    return out;
  }

 private:
  std::vector<Pose> poses_;
  Frame frame_ = Frame::S;
};

inline Pose interpolate_pose(const Trajectory& traj, double t) { return traj.interpolate(t); }

}  // namespace uwbcal
