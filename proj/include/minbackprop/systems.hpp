#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "minbackprop/ift.hpp"
#include "minbackprop/solvers.hpp"

namespace minbackprop::systems {

using ift::ConstraintSystem;
using ift::EqualityConstraints;
using ift::LowLevelLoss;

// ---------------------------------------------------------------------------
// P3P: h_k = ||A_i - A_j||^2 - ||x_i a_i - x_j a_j||^2 for (i, j) in
// {(1,2), (2,3), (3,1)}; unknowns are the depths, parameters the packed
// [A1; A2; A3; a1; a2; a3].

inline ConstraintSystem p3p_system() {
  ConstraintSystem sys;
  sys.n_x = 3;
  sys.n_a = 18;
  sys.n_eq = 3;
  sys.eval = [](const Vector& x, const Vector& a) {
    return solvers::p3p_residuals(P3pInstance::unpack(a), x.head<3>());
  };
  sys.jac_x = [](const Vector& x, const Vector& a) {
    return Matrix(solvers::p3p_jacobian_depths(P3pInstance::unpack(a), x.head<3>()));
  };
  sys.jac_a = [](const Vector& x, const Vector& a) {
    const P3pInstance inst = P3pInstance::unpack(a);
    Matrix j = Matrix::Zero(3, 18);
    for (int k = 0; k < 3; ++k) {
      const int i = k;
      const int l = (k + 1) % 3;
      const Vector3d dp = inst.points[i] - inst.points[l];
      const Vector3d d = x[i] * inst.directions[i] - x[l] * inst.directions[l];
      j.block<1, 3>(k, 3 * i) = 2.0 * dp.transpose();
      j.block<1, 3>(k, 3 * l) = -2.0 * dp.transpose();
      j.block<1, 3>(k, 9 + 3 * i) = -2.0 * x[i] * d.transpose();
      j.block<1, 3>(k, 9 + 3 * l) = 2.0 * x[l] * d.transpose();
    }
    return j;
  };
  return sys;
}

// ---------------------------------------------------------------------------
// Essential system: unknowns are the nine entries of E (row-major),
// parameters the five matches as [q.x, q.y, q~.x, q~.y] each.

inline constexpr Index kEssentialParams = 20;
inline constexpr Index kEssentialEquations = 15;

inline Vector pack_sample(std::span<const Match> sample) {
  Vector a(4 * static_cast<Index>(sample.size()));
  for (size_t i = 0; i < sample.size(); ++i) {
    a.segment<4>(4 * i) << sample[i].q.x(), sample[i].q.y(), sample[i].q_tilde.x(), sample[i].q_tilde.y();
  }
  return a;
}

inline std::vector<Match> unpack_sample(const Vector& a) {
  require(a.size() % 4 == 0, ErrorCode::kDimensionMismatch, "sample parameters come in groups of four");
  std::vector<Match> out(a.size() / 4);
  for (size_t i = 0; i < out.size(); ++i) {
    out[i].q = Vector3d(a[4 * i], a[4 * i + 1], 1.0);
    out[i].q_tilde = Vector3d(a[4 * i + 2], a[4 * i + 3], 1.0);
  }
  return out;
}

/// d/dE_ab of 2 E E^T E - tr(E E^T) E, one column per (a, b), rows
/// row-major over the 3x3 result.
inline Matrix trace_constraint_jacobian(const Matrix3d& e) {
  const Matrix3d ete = e.transpose() * e;
  const Matrix3d eet = e * e.transpose();
  const double tr = eet.trace();
  Matrix j(9, 9);
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      Matrix3d de = Matrix3d::Zero();
      de(a, b) = 1.0;
      const Matrix3d dt = 2.0 * (de * ete + e * de.transpose() * e + eet * de) - 2.0 * e(a, b) * e - tr * de;
      j.col(3 * a + b) = numerics::vec(dt);
    }
  }
  return j;
}

inline ConstraintSystem essential_system() {
  ConstraintSystem sys;
  sys.n_x = 9;
  sys.n_a = kEssentialParams;
  sys.n_eq = kEssentialEquations;
  sys.eval = [](const Vector& x, const Vector& a) {
    const auto sample = unpack_sample(a);
    return solvers::essential_residuals(numerics::unvec(x), sample);
  };
  sys.jac_x = [](const Vector& x, const Vector& a) {
    const auto sample = unpack_sample(a);
    const Matrix3d e = numerics::unvec(x);
    Matrix j(15, 9);
    for (int i = 0; i < 5; ++i) j.row(i) = solvers::epipolar_row(sample[i]).transpose();
    j.row(5) = 2.0 * x.transpose();
    j.bottomRows(9) = trace_constraint_jacobian(e);
    return j;
  };
  sys.jac_a = [](const Vector& x, const Vector& a) {
    const auto sample = unpack_sample(a);
    const Matrix3d e = numerics::unvec(x);
    Matrix j = Matrix::Zero(15, kEssentialParams);
    for (int i = 0; i < 5; ++i) {
      const Vector3d etq = e.transpose() * sample[i].q_tilde;
      const Vector3d eq = e * sample[i].q;
      j(i, 4 * i + 0) = etq[0];
      j(i, 4 * i + 1) = etq[1];
      j(i, 4 * i + 2) = eq[0];
      j(i, 4 * i + 3) = eq[1];
    }
    return j;
  };
  return sys;
}

/// Square 9x9 Jacobian built from the first six rows (epipolar + norm) and
/// three random combinations of the nine trace rows.
struct ReducedJacobian {
  Matrix jx;        // 9 x 9
  Matrix combo;     // 3 x 9 combination coefficients
  int attempts = 0;
};

/// Rows 0-5 kept, rows 6-8 = combo * rows 6-14. Works for any column count,
/// so the same reduction applies to dH/dE and dH/dw.
inline Matrix apply_reduction(const Matrix& full, const Matrix& combo) {
  require(full.rows() == 15 && combo.rows() == 3 && combo.cols() == 9, ErrorCode::kDimensionMismatch,
          "reduction expects 15 rows and a 3x9 combination");
  Matrix out(9, full.cols());
  out.topRows(6) = full.topRows(6);
  out.bottomRows(3) = combo * full.bottomRows(9);
  return out;
}

using ComboSource = std::function<Matrix()>;

inline ComboSource uniform_combo_source(std::mt19937_64& rng) {
  return [&rng]() {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Matrix c(3, 9);
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 9; ++j) c(i, j) = dist(rng);
    return c;
  };
}

/// Tries up to 1 + max_retries coefficient draws until the reduced matrix
/// has numerical rank 9.
inline ReducedJacobian reduce_essential_jacobian(const Matrix& jx, const ComboSource& source, int max_retries) {
  require(jx.rows() == 15 && jx.cols() == 9, ErrorCode::kDimensionMismatch, "essential Jacobian must be 15x9");
  ReducedJacobian out;
  for (int attempt = 0; attempt <= std::max(0, max_retries); ++attempt) {
    out.combo = source();
    out.jx = apply_reduction(jx, out.combo);
    out.attempts = attempt + 1;
    if (numerics::numerical_rank(out.jx) == 9) return out;
  }
  fail(ErrorCode::kRankDeficient, "reduced essential Jacobian stayed rank deficient after " +
                                      std::to_string(out.attempts) + " attempts");
}

inline ReducedJacobian reduce_essential_jacobian(const Matrix& jx, std::mt19937_64& rng, int max_retries) {
  return reduce_essential_jacobian(jx, uniform_combo_source(rng), max_retries);
}

// ---------------------------------------------------------------------------
// Upper-level losses on a 3x3 model

enum class UpperLossKind { kRotationGeodesic, kFrobeniusToGt, kSymmetricEpipolar };

struct UpperLoss {
  UpperLossKind kind;
  std::function<double(const Matrix3d&)> eval;
  std::function<Matrix3d(const Matrix3d&)> grad;
};

inline constexpr double kArccosClamp = 1e-7;

/// arccos((tr(R R_true^T) - 1) / 2). The derivative is taken at the
/// argument clamped into [-1 + eps, 1 - eps] so it stays finite at 0 and pi.
inline UpperLoss rotation_geodesic_loss(const Matrix3d& r_true) {
  UpperLoss j;
  j.kind = UpperLossKind::kRotationGeodesic;
  j.eval = [r_true](const Matrix3d& r) {
    const double u = ((r * r_true.transpose()).trace() - 1.0) / 2.0;
    return std::acos(std::clamp(u, -1.0, 1.0));
  };
  j.grad = [r_true](const Matrix3d& r) {
    const double u = ((r * r_true.transpose()).trace() - 1.0) / 2.0;
    const double uc = std::clamp(u, -1.0 + kArccosClamp, 1.0 - kArccosClamp);
    const double dacos = -1.0 / std::sqrt(1.0 - uc * uc);
    return Matrix3d(dacos * 0.5 * r_true);
  };
  return j;
}

/// ||s F - F_true||^2 with s = sign<F, F_true> folding the projective sign.
inline UpperLoss frobenius_to_gt_loss(const Matrix3d& f_true) {
  UpperLoss j;
  j.kind = UpperLossKind::kFrobeniusToGt;
  auto sign_of = [f_true](const Matrix3d& f) { return (f.cwiseProduct(f_true).sum() < 0.0) ? -1.0 : 1.0; };
  j.eval = [f_true, sign_of](const Matrix3d& f) { return (sign_of(f) * f - f_true).squaredNorm(); };
  j.grad = [f_true, sign_of](const Matrix3d& f) {
    const double s = sign_of(f);
    return Matrix3d(2.0 * (f - s * f_true));
  };
  return j;
}

inline constexpr double kLineGuard = 1e-12;

struct LossValue {
  double value = 0.0;
  Matrix3d grad = Matrix3d::Zero();
};

/// Mean over the inlier set of (1/(l1^2+l2^2) + 1/(l~1^2+l~2^2)) (q~^T E q)^2
/// with l = E^T q~ and l~ = E q. Line norms are clamped below at kLineGuard.
inline LossValue epipolar_upper_loss(const Matrix3d& e, std::span<const Match> matches,
                                     std::span<const Index> inlier_set) {
  require(!inlier_set.empty(), ErrorCode::kInvalidArgument, "empty inlier set");
  LossValue out;
  Index guarded = 0;
  for (Index idx : inlier_set) {
    require(idx >= 0 && idx < static_cast<Index>(matches.size()), ErrorCode::kInvalidArgument, "inlier index");
    const Match& m = matches[idx];
    const Vector3d l = e.transpose() * m.q_tilde;
    const Vector3d lt = e * m.q;
    const double r = m.q_tilde.dot(e * m.q);
    double d = l[0] * l[0] + l[1] * l[1];
    double dt = lt[0] * lt[0] + lt[1] * lt[1];
    const bool clamp_d = d < kLineGuard;
    const bool clamp_dt = dt < kLineGuard;
    if (clamp_d || clamp_dt) ++guarded;
    d = std::max(d, kLineGuard);
    dt = std::max(dt, kLineGuard);
    const double w = 1.0 / d + 1.0 / dt;
    out.value += w * r * r;

    Matrix3d dr = m.q_tilde * m.q.transpose();
    Matrix3d dd = Matrix3d::Zero();
    Matrix3d ddt = Matrix3d::Zero();
    if (!clamp_d) {
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 2; ++b) dd(a, b) = 2.0 * l[b] * m.q_tilde[a];
    }
    if (!clamp_dt) {
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 3; ++b) ddt(a, b) = 2.0 * lt[a] * m.q[b];
    }
    out.grad += 2.0 * w * r * dr - (r * r) * (dd / (d * d) + ddt / (dt * dt));
  }
  if (guarded == static_cast<Index>(inlier_set.size())) {
    fail(ErrorCode::kDegenerateLine, "every inlier has vanishing epipolar lines");
  }
  const double inv = 1.0 / static_cast<double>(inlier_set.size());
  out.value *= inv;
  out.grad *= inv;
  return out;
}

inline UpperLoss symmetric_epipolar_loss(std::vector<Match> matches, std::vector<Index> inliers) {
  UpperLoss j;
  j.kind = UpperLossKind::kSymmetricEpipolar;
  j.eval = [matches, inliers](const Matrix3d& e) { return epipolar_upper_loss(e, matches, inliers).value; };
  j.grad = [matches, inliers](const Matrix3d& e) { return epipolar_upper_loss(e, matches, inliers).grad; };
  return j;
}

// ---------------------------------------------------------------------------
// Constraint families shared by the declarative formulations

/// Upper triangle (i <= j) of R^T R - I, six rows.
inline EqualityConstraints orthogonality_constraints() {
  static constexpr std::array<std::pair<int, int>, 6> kPairs{{{0, 0}, {0, 1}, {0, 2}, {1, 1}, {1, 2}, {2, 2}}};
  EqualityConstraints h;
  h.n_y = 9;
  h.n_h = 6;
  h.value = [](const Vector& y) {
    const Matrix3d r = numerics::unvec(y);
    const Matrix3d g = r.transpose() * r - Matrix3d::Identity();
    Vector out(6);
    for (int k = 0; k < 6; ++k) out[k] = g(kPairs[k].first, kPairs[k].second);
    return out;
  };
  h.jacobian = [](const Vector& y) {
    const Matrix3d r = numerics::unvec(y);
    Matrix j = Matrix::Zero(6, 9);
    for (int k = 0; k < 6; ++k) {
      const auto [i, l] = kPairs[k];
      // d/dR_ab sum_c R_ci R_cl = [b == i] R_al + [b == l] R_ai
      for (int a = 0; a < 3; ++a) {
        j(k, 3 * a + i) += r(a, l);
        j(k, 3 * a + l) += r(a, i);
      }
    }
    return j;
  };
  h.hessian_sum = [](const Vector&, const Vector& lambda) {
    Matrix hs = Matrix::Zero(9, 9);
    for (int k = 0; k < 6; ++k) {
      const auto [i, l] = kPairs[k];
      // d2/dR_ab dR_cd = [a == c] ([b == i][d == l] + [b == l][d == i])
      for (int a = 0; a < 3; ++a) {
        hs(3 * a + i, 3 * a + l) += lambda[k];
        hs(3 * a + l, 3 * a + i) += lambda[k];
      }
    }
    return hs;
  };
  return h;
}

/// d2 det(F) / dF_ab dF_cd, row-major indices.
inline Matrix determinant_hessian(const Matrix3d& f) {
  Matrix hs = Matrix::Zero(9, 9);
  for (int a = 0; a < 3; ++a) {
    for (int c = 0; c < 3; ++c) {
      if (a == c) continue;
      const int e = 3 - a - c;
      for (int b = 0; b < 3; ++b) {
        for (int d = 0; d < 3; ++d) {
          if (b == d) continue;
          const int g = 3 - b - d;
          // permutation sigma with sigma(a)=b, sigma(c)=d, sigma(e)=g
          std::array<int, 3> sigma{};
          sigma[a] = b;
          sigma[c] = d;
          sigma[e] = g;
          int inversions = 0;
          for (int i = 0; i < 3; ++i)
            for (int j = i + 1; j < 3; ++j) inversions += sigma[i] > sigma[j];
          hs(3 * a + b, 3 * c + d) = (inversions % 2 == 0 ? 1.0 : -1.0) * f(e, g);
        }
      }
    }
  }
  return hs;
}

/// {det F, ||F||^2 - 1}
inline EqualityConstraints rank2_unit_constraints() {
  EqualityConstraints h;
  h.n_y = 9;
  h.n_h = 2;
  h.value = [](const Vector& y) {
    const Matrix3d f = numerics::unvec(y);
    return Vector(Eigen::Vector2d(f.determinant(), y.squaredNorm() - 1.0));
  };
  h.jacobian = [](const Vector& y) {
    Matrix j(2, 9);
    j.row(0) = numerics::vec(numerics::cofactor(numerics::unvec(y))).transpose();
    j.row(1) = 2.0 * y.transpose();
    return j;
  };
  h.hessian_sum = [](const Vector& y, const Vector& lambda) {
    Matrix hs = lambda[0] * determinant_hessian(numerics::unvec(y));
    hs.diagonal().array() += 2.0 * lambda[1];
    return hs;
  };
  return h;
}

/// {||y||^2 - 1}
inline EqualityConstraints unit_norm_constraint(Index n) {
  EqualityConstraints h;
  h.n_y = n;
  h.n_h = 1;
  h.value = [](const Vector& y) { return Vector::Constant(1, y.squaredNorm() - 1.0); };
  h.jacobian = [](const Vector& y) { return Matrix(2.0 * y.transpose()); };
  h.hessian_sum = [n](const Vector&, const Vector& lambda) { return Matrix(2.0 * lambda[0] * Matrix::Identity(n, n)); };
  return h;
}

// ---------------------------------------------------------------------------
// Registration: f(w, R) = (1/N) sum_i w_i ||R p_i - q_i||^2, h(R) = R^T R - I,
// J(R) = geodesic distance to R_true.

struct RegistrationLosses {
  LowLevelLoss f;
  EqualityConstraints h;
  UpperLoss j;
};

inline RegistrationLosses registration_losses(const RegistrationInstance& inst) {
  const Index n = inst.size();
  require(n >= 1 && static_cast<Index>(inst.q.size()) == n, ErrorCode::kDimensionMismatch, "point sets differ");
  const std::vector<Vector3d> p = inst.p;
  const std::vector<Vector3d> q = inst.q;
  const double inv_n = 1.0 / static_cast<double>(n);

  RegistrationLosses out;
  out.f.n_y = 9;
  out.f.n_w = n;
  out.f.value = [p, q, inv_n](const Vector& y, const Vector& w) {
    const Matrix3d r = numerics::unvec(y);
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) acc += w[i] * (r * p[i] - q[i]).squaredNorm();
    return acc * inv_n;
  };
  out.f.grad_y = [p, q, inv_n](const Vector& y, const Vector& w) {
    const Matrix3d r = numerics::unvec(y);
    Matrix3d g = Matrix3d::Zero();
    for (size_t i = 0; i < p.size(); ++i) g += w[i] * (r * p[i] - q[i]) * p[i].transpose();
    return numerics::vec(2.0 * inv_n * g);
  };
  out.f.hess_yy = [p, inv_n](const Vector&, const Vector& w) {
    Matrix3d s = Matrix3d::Zero();
    for (size_t i = 0; i < p.size(); ++i) s += w[i] * p[i] * p[i].transpose();
    Matrix hs = Matrix::Zero(9, 9);
    for (int a = 0; a < 3; ++a) hs.block<3, 3>(3 * a, 3 * a) = 2.0 * inv_n * s;
    return hs;
  };
  out.f.hess_yw = [p, q, inv_n](const Vector& y, const Vector&) {
    const Matrix3d r = numerics::unvec(y);
    Matrix hs(9, static_cast<Index>(p.size()));
    for (size_t i = 0; i < p.size(); ++i) {
      hs.col(static_cast<Index>(i)) = numerics::vec(2.0 * inv_n * (r * p[i] - q[i]) * p[i].transpose());
    }
    return hs;
  };
  out.h = orthogonality_constraints();
  out.j = rotation_geodesic_loss(inst.r_true);
  return out;
}

// ---------------------------------------------------------------------------
// Fundamental: f(w, F) = (1/N) sum_i w_i (q~_i^T F q_i)^2 subject to
// det F = 0 and ||F||^2 = 1; J(F) = ||F - F_true||^2.

struct FundamentalLosses {
  LowLevelLoss f;
  EqualityConstraints h;
  UpperLoss j;
};

inline LowLevelLoss weighted_algebraic_loss(const EpipolarInstance& inst) {
  const Index n = inst.size();
  Matrix rows(n, 9);
  for (Index i = 0; i < n; ++i) rows.row(i) = solvers::epipolar_row(inst.matches[i]).transpose();
  const double inv_n = 1.0 / static_cast<double>(n);

  LowLevelLoss f;
  f.n_y = 9;
  f.n_w = n;
  f.value = [rows, inv_n](const Vector& y, const Vector& w) {
    const Vector r = rows * y;
    return inv_n * (w.array() * r.array().square()).sum();
  };
  f.grad_y = [rows, inv_n](const Vector& y, const Vector& w) {
    const Vector r = rows * y;
    return Vector(2.0 * inv_n * rows.transpose() * (w.array() * r.array()).matrix());
  };
  f.hess_yy = [rows, inv_n](const Vector&, const Vector& w) {
    return Matrix(2.0 * inv_n * rows.transpose() * w.asDiagonal() * rows);
  };
  f.hess_yw = [rows, inv_n](const Vector& y, const Vector&) {
    const Vector r = rows * y;
    return Matrix(2.0 * inv_n * rows.transpose() * r.asDiagonal());
  };
  return f;
}

inline FundamentalLosses fundamental_losses(const EpipolarInstance& inst) {
  require(inst.f_true.has_value(), ErrorCode::kInvalidArgument, "fundamental losses need F_true");
  FundamentalLosses out;
  out.f = weighted_algebraic_loss(inst);
  out.h = rank2_unit_constraints();
  out.j = frobenius_to_gt_loss(*inst.f_true / inst.f_true->norm());
  return out;
}

/// Nearest unit-norm rank-2 matrix to a reference F0 (the parameters):
/// f = ||F - F0||^2 subject to det F = 0, ||F||^2 = 1.
inline LowLevelLoss nearest_matrix_loss() {
  LowLevelLoss f;
  f.n_y = 9;
  f.n_w = 9;
  f.value = [](const Vector& y, const Vector& w) { return (y - w).squaredNorm(); };
  f.grad_y = [](const Vector& y, const Vector& w) { return Vector(2.0 * (y - w)); };
  f.hess_yy = [](const Vector&, const Vector&) { return Matrix(2.0 * Matrix::Identity(9, 9)); };
  f.hess_yw = [](const Vector&, const Vector&) { return Matrix(-2.0 * Matrix::Identity(9, 9)); };
  return f;
}

}  // namespace minbackprop::systems
