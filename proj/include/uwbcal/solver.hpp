#pragma once

// Dense Levenberg-Marquardt over named parameter blocks.
//
// Problem sizes here are small (tens of unknowns for anchor calibration,
// a few hundred per fusion window), so the normal equations are assembled
// densely and factored with Cholesky.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "uwbcal/error.hpp"
#include "uwbcal/geometry.hpp"

namespace uwbcal {

enum class BlockKind { Point3, Scalar, Pose, Yaw };

/// Stored doubles. Pose blocks are [px, py, pz, qw, qx, qy, qz].
constexpr int ambient_size(BlockKind k) {
  switch (k) {
    case BlockKind::Point3: return 3;
    case BlockKind::Pose: return 7;
    case BlockKind::Scalar:
    case BlockKind::Yaw: return 1;
  }
  return 0;
}

/// Tangent dimension. Pose tangent is [dtheta; dp].
constexpr int local_size(BlockKind k) {
  switch (k) {
    case BlockKind::Point3: return 3;
    case BlockKind::Pose: return 6;
    case BlockKind::Scalar:
    case BlockKind::Yaw: return 1;
  }
  return 0;
}

inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Point3: return "point3";
    case BlockKind::Pose: return "pose";
    case BlockKind::Scalar: return "scalar";
    case BlockKind::Yaw: return "yaw";
  }
  return "?";
}

inline Pose pose_from_block(const double* x, double t = 0.0) {
  return Pose{t, Vec3(x[0], x[1], x[2]), Rotation::from_wxyz(x[3], x[4], x[5], x[6])};
}

inline std::array<double, 7> pose_to_block(const Pose& p) {
  return {p.p.x(), p.p.y(), p.p.z(), p.r.w(), p.r.x(), p.r.y(), p.r.z()};
}

/// Applies a tangent increment in place.
inline void retract(BlockKind kind, double* x, const double* delta) {
  if (kind == BlockKind::Pose) {
    const Pose cur = pose_from_block(x);
    const Rotation r = cur.r * Rotation::exp(Vec3(delta[0], delta[1], delta[2]));
    x[0] += delta[3];
    x[1] += delta[4];
    x[2] += delta[5];
    x[3] = r.w();
    x[4] = r.x();
    x[5] = r.y();
    x[6] = r.z();
    return;
  }
  for (int i = 0; i < ambient_size(kind); ++i) x[i] += delta[i];
}

// ---------------------------------------------------------------------------
// Robust loss

/// rho(s) with its first and second derivatives in s.
struct RhoTriple {
  double rho = 0.0;
  double d1 = 1.0;
  double d2 = 0.0;
};

/// Cauchy loss rho(s) = c^2 ln(1 + s/c^2) on a squared residual s.
inline RhoTriple cauchy_cost(double s, double c) {
  const double c2 = c * c;
  const double sum = 1.0 + s / c2;
  const double inv = 1.0 / sum;
  return {c2 * std::log1p(s / c2), inv, -inv * inv / c2};
}

struct Loss {
  enum class Kind { None, Cauchy };
  Kind kind = Kind::None;
  double scale = 1.0;

  static Loss none() { return {}; }
  static Loss cauchy(double c) { return {Kind::Cauchy, c}; }

  RhoTriple evaluate(double s) const {
    if (kind == Kind::Cauchy) return cauchy_cost(s, scale);
    return {s, 1.0, 0.0};
  }
};

// ---------------------------------------------------------------------------
// Residual interface

/// A residual over a fixed list of parameter-block kinds.
///
/// `evaluate` receives one pointer per block (ambient storage), writes
/// `residual_dim()` residuals and, for every non-null `jacobians[i]`, a
/// row-major residual_dim x local_size(kind_i) Jacobian with respect to the
/// block's tangent increment. Implementations may throw uwbcal::Error at
/// singular points.
class CostFunction {
 public:
  CostFunction(int residual_dim, std::vector<BlockKind> kinds)
      : dim_(residual_dim), kinds_(std::move(kinds)) {}
  virtual ~CostFunction() = default;

  int residual_dim() const { return dim_; }
  const std::vector<BlockKind>& parameter_kinds() const { return kinds_; }

  virtual void evaluate(const double* const* params, double* residuals,
                        double* const* jacobians) const = 0;

 private:
  int dim_;
  std::vector<BlockKind> kinds_;
};

struct SolverOptions {
  int max_iters = 100;
  double rel_tol = 1e-8;
  double grad_tol = 1e-10;
  /// Marquardt damping on the first iteration. Zero gives a pure
  /// Gauss-Newton first step.
  double initial_damping = 1e-4;
  std::ostream* log = nullptr;
};

enum class Termination { Converged, MaxIters, Stalled };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::Converged: return "converged";
    case Termination::MaxIters: return "max_iters";
    case Termination::Stalled: return "stalled";
  }
  return "?";
}

struct SolveReport {
  int iterations = 0;
  int accepted_steps = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  Termination termination = Termination::MaxIters;
  std::vector<double> cost_trace;
};

class Problem {
 public:
  void add_parameter_block(const std::string& id, BlockKind kind, std::span<const double> values) {
    if (static_cast<int>(values.size()) != ambient_size(kind))
      throw StructuralError("block '" + id + "' expects " + std::to_string(ambient_size(kind)) +
                            " values, got " + std::to_string(values.size()));
    if (index_.contains(id)) throw StructuralError("duplicate parameter block '" + id + "'");
    Block b{id, kind, std::vector<double>(values.begin(), values.end()), false};
    if (kind == BlockKind::Pose) {
      const Pose p = pose_from_block(b.values.data());
      const auto canon = pose_to_block(p);
      std::copy(canon.begin(), canon.end(), b.values.begin());
    }
    index_.emplace(id, blocks_.size());
    blocks_.push_back(std::move(b));
  }

  void add_point3(const std::string& id, const Vec3& v) {
    add_parameter_block(id, BlockKind::Point3, std::array<double, 3>{v.x(), v.y(), v.z()});
  }
  void add_scalar(const std::string& id, double v) {
    add_parameter_block(id, BlockKind::Scalar, std::array<double, 1>{v});
  }
  void add_yaw(const std::string& id, double v) {
    add_parameter_block(id, BlockKind::Yaw, std::array<double, 1>{v});
  }
  void add_pose(const std::string& id, const Pose& p) {
    add_parameter_block(id, BlockKind::Pose, pose_to_block(p));
  }

  bool has_block(const std::string& id) const { return index_.contains(id); }

  void set_constant(const std::string& id, bool constant = true) {
    blocks_[lookup(id)].constant = constant;
  }
  bool is_constant(const std::string& id) const { return blocks_[lookup(id)].constant; }

  /// Throws StructuralError on unknown ids or kind/count mismatch.
  void add_residual_block(std::shared_ptr<const CostFunction> cost, Loss loss,
                          const std::vector<std::string>& ids,
                          std::optional<Eigen::MatrixXd> sqrt_information = std::nullopt) {
    if (!cost) throw StructuralError("null cost function");
    const auto& kinds = cost->parameter_kinds();
    if (kinds.size() != ids.size())
      throw StructuralError("residual expects " + std::to_string(kinds.size()) +
                            " blocks, got " + std::to_string(ids.size()));
    Residual r;
    r.cost = std::move(cost);
    r.loss = loss;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto it = index_.find(ids[i]);
      if (it == index_.end()) throw StructuralError("dangling parameter block '" + ids[i] + "'");
      if (blocks_[it->second].kind != kinds[i])
        throw StructuralError("block '" + ids[i] + "' is " + to_string(blocks_[it->second].kind) +
                              ", residual expects " + to_string(kinds[i]));
      r.blocks.push_back(it->second);
    }
    if (sqrt_information) {
      const int d = r.cost->residual_dim();
      if (sqrt_information->rows() != d || sqrt_information->cols() != d)
        throw StructuralError("weight matrix must be " + std::to_string(d) + "x" + std::to_string(d));
    }
    r.sqrt_info = std::move(sqrt_information);
    residuals_.push_back(std::move(r));
  }

  std::span<const double> values(const std::string& id) const { return blocks_[lookup(id)].values; }
  Vec3 point3(const std::string& id) const {
    auto v = values(id);
    return {v[0], v[1], v[2]};
  }
  double scalar(const std::string& id) const { return values(id)[0]; }
  Pose pose(const std::string& id, double t = 0.0) const {
    return pose_from_block(values(id).data(), t);
  }

  std::size_t num_parameter_blocks() const { return blocks_.size(); }
  std::size_t num_residual_blocks() const { return residuals_.size(); }

  /// Sum over residual blocks of rho(||W r||^2). Throws NumericalFailure on
  /// non-finite or singular evaluations.
  double evaluate_cost() const {
    std::vector<double> r;
    double total = 0.0;
    for (const auto& res : residuals_) {
      r.resize(res.cost->residual_dim());
      if (!evaluate_residual(res, r.data(), nullptr))
        throw NumericalFailure("residual evaluation failed");
      total += res.loss.evaluate(weighted_sq_norm(res, r)).rho;
    }
    return total;
  }

 private:
  struct Block {
    std::string id;
    BlockKind kind;
    std::vector<double> values;
    bool constant;
  };
  struct Residual {
    std::shared_ptr<const CostFunction> cost;
    Loss loss;
    std::vector<std::size_t> blocks;
    std::optional<Eigen::MatrixXd> sqrt_info;
  };

  std::size_t lookup(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw StructuralError("unknown parameter block '" + id + "'");
    return it->second;
  }

  bool evaluate_residual(const Residual& res, double* r, double* const* jac) const {
    std::array<const double*, 16> ptrs{};
    if (res.blocks.size() > ptrs.size()) throw StructuralError("too many blocks on one residual");
    for (std::size_t i = 0; i < res.blocks.size(); ++i) ptrs[i] = blocks_[res.blocks[i]].values.data();
    try {
      res.cost->evaluate(ptrs.data(), r, jac);
    } catch (const Error&) {
      return false;
    }
    const int d = res.cost->residual_dim();
    for (int i = 0; i < d; ++i)
      if (!std::isfinite(r[i])) return false;
    return true;
  }

  double weighted_sq_norm(const Residual& res, std::vector<double>& r) const {
    Eigen::Map<Eigen::VectorXd> rv(r.data(), static_cast<Eigen::Index>(r.size()));
    if (res.sqrt_info) rv = (*res.sqrt_info) * rv.eval();
    return rv.squaredNorm();
  }

  friend SolveReport solve(Problem&, const SolverOptions&);

  std::vector<Block> blocks_;
  std::vector<Residual> residuals_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

struct Linearization {
  double cost = 0.0;
  Eigen::MatrixXd H;  // J~^T J~
  Eigen::VectorXd g;  // J~^T r~
};

}  // namespace detail

/// Levenberg-Marquardt with multiplicative damping updates (x10 / /10).
///
/// Robust losses enter through iteratively re-weighted residuals
/// sqrt(rho'(s)) * r, and the reported cost is sum rho(s).
inline SolveReport solve(Problem& problem, const SolverOptions& options) {
  using Eigen::Index;
  auto& blocks = problem.blocks_;
  const auto& residuals = problem.residuals_;

  std::vector<Index> offset(blocks.size(), -1);
  Index n = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].constant) continue;
    offset[i] = n;
    n += local_size(blocks[i].kind);
  }
  if (n == 0) throw StructuralError("problem has no free parameter blocks");

  int max_cols = 0;
  int max_dim = 0;
  for (const auto& res : residuals) {
    int cols = 0;
    for (auto b : res.blocks) cols += local_size(blocks[b].kind);
    max_cols = std::max(max_cols, cols);
    max_dim = std::max(max_dim, res.cost->residual_dim());
  }

  std::vector<double> rbuf(static_cast<std::size_t>(max_dim));
  std::vector<std::vector<double>> jbuf(16);
  Eigen::MatrixXd Jloc(max_dim, max_cols);
  std::vector<std::pair<Index, int>> cols;  // (global offset, width) per free block

  auto linearize = [&](detail::Linearization& lin) -> bool {
    lin.cost = 0.0;
    lin.H.setZero(n, n);
    lin.g.setZero(n);
    std::array<double*, 16> jptr{};
    for (const auto& res : residuals) {
      const int d = res.cost->residual_dim();
      int width = 0;
      cols.clear();
      for (std::size_t i = 0; i < res.blocks.size(); ++i) {
        const auto& blk = blocks[res.blocks[i]];
        const int ls = local_size(blk.kind);
        if (blk.constant) {
          jptr[i] = nullptr;
          continue;
        }
        jbuf[i].resize(static_cast<std::size_t>(d * ls));
        jptr[i] = jbuf[i].data();
        cols.emplace_back(offset[res.blocks[i]], ls);
        width += ls;
      }
      if (!problem.evaluate_residual(res, rbuf.data(), jptr.data())) return false;
      Eigen::Map<Eigen::VectorXd> r(rbuf.data(), d);
      auto J = Jloc.topLeftCorner(d, width);
      int c = 0;
      for (std::size_t i = 0; i < res.blocks.size(); ++i) {
        if (!jptr[i]) continue;
        const int ls = local_size(blocks[res.blocks[i]].kind);
        J.middleCols(c, ls) =
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                jptr[i], d, ls);
        c += ls;
      }
      if (!J.allFinite()) return false;
      if (res.sqrt_info) {
        r = (*res.sqrt_info) * r.eval();
        J = (*res.sqrt_info) * J.eval();
      }
      const double s = r.squaredNorm();
      const RhoTriple rho = res.loss.evaluate(s);
      lin.cost += rho.rho;
      const double w = std::sqrt(rho.d1);
      if (w != 1.0) {
        r *= w;
        J *= w;
      }
      Index ca = 0;
      for (const auto& [oa, la] : cols) {
        lin.g.segment(oa, la).noalias() += J.middleCols(ca, la).transpose() * r;
        Index cb = 0;
        for (const auto& [ob, lb] : cols) {
          if (ob >= oa)
            lin.H.block(oa, ob, la, lb).noalias() +=
                J.middleCols(ca, la).transpose() * J.middleCols(cb, lb);
          cb += lb;
        }
        ca += la;
      }
    }
    lin.H.triangularView<Eigen::StrictlyLower>() = lin.H.transpose();
    return std::isfinite(lin.cost);
  };

  auto cost_only = [&]() -> double {
    try {
      return problem.evaluate_cost();
    } catch (const NumericalFailure&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  SolveReport report;
  detail::Linearization lin;
  if (!linearize(lin)) throw NumericalFailure("non-finite residual or Jacobian at the initial point");
  report.initial_cost = lin.cost;
  report.final_cost = lin.cost;

  auto log = [&](int it, double cost, double lambda, bool accepted) {
    if (!options.log) return;
    *options.log << "iter " << std::setw(3) << it << "  cost " << std::scientific
                 << std::setprecision(6) << cost << "  lambda " << lambda
                 << (accepted ? "  accepted" : "  rejected") << std::defaultfloat << '\n';
  };

  if (lin.g.lpNorm<Eigen::Infinity>() < options.grad_tol) {
    report.termination = Termination::Converged;
    return report;
  }

  double lambda = options.initial_damping;
  std::vector<std::vector<double>> saved(blocks.size());
  Eigen::MatrixXd A;
  Eigen::VectorXd delta;
  Eigen::LLT<Eigen::MatrixXd> llt;

  while (report.iterations < options.max_iters) {
    ++report.iterations;
    A = lin.H;
    for (Index i = 0; i < n; ++i) A(i, i) += lambda * std::max(lin.H(i, i), 1e-6);
    llt.compute(A);
    bool ok = llt.info() == Eigen::Success;
    if (ok) {
      delta = llt.solve(-lin.g);
      ok = delta.allFinite();
    }
    if (!ok) {
      lambda = std::max(lambda * 10.0, 1e-9);
      report.cost_trace.push_back(report.final_cost);
      log(report.iterations, report.final_cost, lambda, false);
      if (lambda > 1e16) {
        report.termination = Termination::Stalled;
        return report;
      }
      continue;
    }

    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (blocks[i].constant) continue;
      saved[i] = blocks[i].values;
      retract(blocks[i].kind, blocks[i].values.data(), delta.data() + offset[i]);
    }
    const double new_cost = cost_only();

    if (new_cost < report.final_cost) {
      const double old_cost = report.final_cost;
      report.final_cost = new_cost;
      ++report.accepted_steps;
      report.cost_trace.push_back(new_cost);
      log(report.iterations, new_cost, lambda, true);
      lambda = lambda / 10.0;
      if (new_cost == 0.0 || (old_cost - new_cost) < options.rel_tol * old_cost) {
        report.termination = Termination::Converged;
        return report;
      }
      if (!linearize(lin)) {
        // Evaluated cleanly for the cost but not for the Jacobian; step back.
        for (std::size_t i = 0; i < blocks.size(); ++i)
          if (!blocks[i].constant) blocks[i].values = saved[i];
        report.final_cost = old_cost;
        report.termination = Termination::Stalled;
        return report;
      }
      if (lin.g.lpNorm<Eigen::Infinity>() < options.grad_tol) {
        report.termination = Termination::Converged;
        return report;
      }
    } else {
      for (std::size_t i = 0; i < blocks.size(); ++i)
        if (!blocks[i].constant) blocks[i].values = saved[i];
      report.cost_trace.push_back(report.final_cost);
      log(report.iterations, new_cost, lambda, false);
      // A rejected step that is already at round-off scale means no further progress.
      if (delta.lpNorm<Eigen::Infinity>() < 1e-15) {
        report.termination = Termination::Stalled;
        return report;
      }
      lambda = std::max(lambda * 10.0, 1e-9);
      if (lambda > 1e16) {
        report.termination = Termination::Stalled;
        return report;
      }
    }
  }
  report.termination = Termination::MaxIters;
  return report;
}

// ---------------------------------------------------------------------------
// Jacobian verification

/// Worst relative error, over the full stacked Jacobian, between analytic
/// and central finite-difference derivatives (step `h` per tangent
/// coordinate; pose blocks are perturbed through Exp). Throws
/// NumericalFailure when the residual cannot be evaluated at `at`.
inline double check_jacobians(const CostFunction& cost, const std::vector<std::vector<double>>& at,
                              double h = 1e-6) {
  const auto& kinds = cost.parameter_kinds();
  if (at.size() != kinds.size()) throw StructuralError("parameter count mismatch");
  const int d = cost.residual_dim();
  int total = 0;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (static_cast<int>(at[i].size()) != ambient_size(kinds[i]))
      throw StructuralError("parameter " + std::to_string(i) + " has wrong size");
    total += local_size(kinds[i]);
  }

  auto eval = [&](const std::vector<std::vector<double>>& x, double* r, double* const* jac) {
    std::vector<const double*> ptrs;
    for (const auto& v : x) ptrs.push_back(v.data());
    try {
      cost.evaluate(ptrs.data(), r, jac);
    } catch (const Error& e) {
      throw NumericalFailure(std::string("evaluation failed: ") + e.what());
    }
    for (int i = 0; i < d; ++i)
      if (!std::isfinite(r[i])) throw NumericalFailure("non-finite residual");
  };

  std::vector<std::vector<double>> jac(kinds.size());
  std::vector<double*> jptr(kinds.size());
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    jac[i].assign(static_cast<std::size_t>(d * local_size(kinds[i])), 0.0);
    jptr[i] = jac[i].data();
  }
  std::vector<double> r0(static_cast<std::size_t>(d));
  eval(at, r0.data(), jptr.data());

  Eigen::MatrixXd analytic(d, total);
  Eigen::MatrixXd numeric(d, total);
  int col = 0;
  std::vector<double> rp(static_cast<std::size_t>(d)), rm(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const int ls = local_size(kinds[i]);
    for (int k = 0; k < ls; ++k) {
      for (int row = 0; row < d; ++row) analytic(row, col + k) = jac[i][row * ls + k];
      std::vector<double> step(static_cast<std::size_t>(ls), 0.0);
      auto xp = at;
      auto xm = at;
      step[k] = h;
      retract(kinds[i], xp[i].data(), step.data());
      step[k] = -h;
      retract(kinds[i], xm[i].data(), step.data());
      eval(xp, rp.data(), nullptr);
      eval(xm, rm.data(), nullptr);
      for (int row = 0; row < d; ++row) numeric(row, col + k) = (rp[row] - rm[row]) / (2.0 * h);
    }
    col += ls;
  }
  if (!analytic.allFinite()) throw NumericalFailure("non-finite Jacobian");
  const double scale = std::max(numeric.norm(), 1e-12);
  return (analytic - numeric).norm() / scale;
}

}  // namespace uwbcal
