#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "minbackprop/numerics.hpp"

namespace minbackprop::ift {

/// Polynomial (or generally smooth) system h(x, a) = 0 with K equations in
/// N unknowns x and M parameters a, together with its two Jacobians.
struct ConstraintSystem {
  Index n_x = 0;
  Index n_a = 0;
  Index n_eq = 0;
  std::function<Vector(const Vector& x, const Vector& a)> eval;
  std::function<Matrix(const Vector& x, const Vector& a)> jac_x;  // K x N
  std::function<Matrix(const Vector& x, const Vector& a)> jac_a;  // K x M
};

enum class IftMethod { kSquareInverse, kPseudoinverse };

inline const char* to_string(IftMethod m) {
  return m == IftMethod::kSquareInverse ? "square-inverse" : "pseudoinverse";
}

struct SolutionJacobian {
  Matrix dxda;  // N x M
  Index rank_jx = 0;
  double sigma_min = 0.0;
  IftMethod method = IftMethod::kPseudoinverse;

  bool full_rank() const { return rank_jx == dxda.rows(); }
};

inline constexpr double kRootTolerance = 1e-6;
inline constexpr double kFdStep = 1e-6;

enum class IftPreference { kAuto, kForcePseudoinverse };

inline void check_dimensions(const ConstraintSystem& sys, const Vector& x, const Vector& a) {
  require(x.size() == sys.n_x, ErrorCode::kDimensionMismatch,
          "solution has " + std::to_string(x.size()) + " entries, system expects " + std::to_string(sys.n_x));
  require(a.size() == sys.n_a, ErrorCode::kDimensionMismatch,
          "parameters have " + std::to_string(a.size()) + " entries, system expects " + std::to_string(sys.n_a));
}

/// dx/da = -(dh/dx)^+ dh/da at a root x of h(., a).
///
/// A rank-deficient dh/dx is not raised: the pseudoinverse result is returned
/// with `rank_jx < n_x` so callers can decide on a fallback.
inline SolutionJacobian ift_jacobian(const ConstraintSystem& sys, const Vector& x, const Vector& a,
                                     double rank_tol = -1.0, IftPreference pref = IftPreference::kAuto) {
  check_dimensions(sys, x, a);
  const Vector r = sys.eval(x, a);
  numerics::require_finite(r, "constraint residual");
  if (r.size() > 0 && r.cwiseAbs().maxCoeff() >= kRootTolerance) {
    fail(ErrorCode::kNotARoot, "max residual " + std::to_string(r.cwiseAbs().maxCoeff()));
  }
  const Matrix jx = sys.jac_x(x, a);
  const Matrix ja = sys.jac_a(x, a);
  require(jx.rows() == sys.n_eq && jx.cols() == sys.n_x, ErrorCode::kDimensionMismatch, "jac_x shape");
  require(ja.rows() == sys.n_eq && ja.cols() == sys.n_a, ErrorCode::kDimensionMismatch, "jac_a shape");
  numerics::require_finite(jx, "jac_x");
  numerics::require_finite(ja, "jac_a");

  const numerics::SvdResult s = numerics::svd(jx);
  SolutionJacobian out;
  out.rank_jx = numerics::rank_from_sigma(s.sigma, jx.rows(), jx.cols(), rank_tol);
  out.sigma_min = s.sigma.size() > 0 ? s.sigma[s.sigma.size() - 1] : 0.0;
  if (s.sigma.size() < sys.n_x) out.sigma_min = 0.0;

  if (pref == IftPreference::kAuto && sys.n_eq == sys.n_x && out.rank_jx == sys.n_x) {
    out.method = IftMethod::kSquareInverse;
    out.dxda = -jx.partialPivLu().solve(ja);
  } else {
    out.method = IftMethod::kPseudoinverse;
    const double sigma_max = s.sigma.size() > 0 ? s.sigma[0] : 0.0;
    const double tol = rank_tol < 0.0 ? numerics::default_tolerance(jx.rows(), jx.cols(), sigma_max) : rank_tol;
    Matrix pinv = Matrix::Zero(jx.cols(), jx.rows());
    for (Index i = 0; i < s.sigma.size(); ++i) {
      if (s.sigma[i] > tol) pinv += (s.v.col(i) / s.sigma[i]) * s.u.col(i).transpose();
    }
    out.dxda = -pinv * ja;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Declarative nodes: y(w) = argmin f(y, w) s.t. h(y) = 0

/// Low-level objective with the derivatives the KKT system needs.
struct LowLevelLoss {
  Index n_y = 0;
  Index n_w = 0;
  std::function<double(const Vector& y, const Vector& w)> value;
  std::function<Vector(const Vector& y, const Vector& w)> grad_y;   // n_y
  std::function<Matrix(const Vector& y, const Vector& w)> hess_yy;  // n_y x n_y
  std::function<Matrix(const Vector& y, const Vector& w)> hess_yw;  // n_y x n_w
};

/// Equality constraints h(y) = 0 (independent of the parameters).
struct EqualityConstraints {
  Index n_y = 0;
  Index n_h = 0;
  std::function<Vector(const Vector& y)> value;                                // n_h
  std::function<Matrix(const Vector& y)> jacobian;                             // n_h x n_y
  std::function<Matrix(const Vector& y, const Vector& lambda)> hessian_sum;    // sum_i lambda_i d2h_i/dy2

  static EqualityConstraints none(Index n_y) {
    EqualityConstraints h;
    h.n_y = n_y;
    h.n_h = 0;
    h.value = [](const Vector&) { return Vector(0); };
    h.jacobian = [n_y](const Vector&) { return Matrix(0, n_y); };
    h.hessian_sum = [n_y](const Vector&, const Vector&) { return Matrix::Zero(n_y, n_y).eval(); };
    return h;
  }
};

/// Stationarity + feasibility of L(y, lambda) = f(y, w) + lambda^T h(y),
/// posed as a constraint system in the unknowns z = (y, lambda) with
/// parameters w.
struct KktSystem {
  ConstraintSystem base;
  LowLevelLoss f;
  EqualityConstraints h;
  Index n_y = 0;
  Index n_lambda = 0;

  Vector pack(const Vector& y, const Vector& lambda) const {
    Vector z(n_y + n_lambda);
    z << y, lambda;
    return z;
  }
  Vector y_part(const Vector& z) const { return z.head(n_y); }
  Vector lambda_part(const Vector& z) const { return z.tail(n_lambda); }
};

inline KktSystem build_kkt(LowLevelLoss f, EqualityConstraints h) {
  require(f.n_y == h.n_y, ErrorCode::kDimensionMismatch,
          "loss acts on " + std::to_string(f.n_y) + " unknowns, constraints on " + std::to_string(h.n_y));
  require(f.grad_y && f.hess_yy && f.hess_yw, ErrorCode::kInvalidArgument, "loss derivatives missing");
  require(h.value && h.jacobian && h.hessian_sum, ErrorCode::kInvalidArgument, "constraint derivatives missing");

  KktSystem kkt;
  kkt.f = std::move(f);
  kkt.h = std::move(h);
  kkt.n_y = kkt.f.n_y;
  kkt.n_lambda = kkt.h.n_h;
  const Index ny = kkt.n_y;
  const Index nl = kkt.n_lambda;
  const Index nw = kkt.f.n_w;

  // The closures copy the loss/constraint objects so the system stays valid
  // independently of the KktSystem that owns them.
  const LowLevelLoss lf = kkt.f;
  const EqualityConstraints lh = kkt.h;

  kkt.base.n_x = ny + nl;
  kkt.base.n_a = nw;
  kkt.base.n_eq = ny + nl;
  kkt.base.eval = [lf, lh, ny, nl](const Vector& z, const Vector& w) {
    const Vector y = z.head(ny);
    const Vector lambda = z.tail(nl);
    Vector r(ny + nl);
    r.head(ny) = lf.grad_y(y, w);
    if (nl > 0) {
      r.head(ny) += lh.jacobian(y).transpose() * lambda;
      r.tail(nl) = lh.value(y);
    }
    return r;
  };
  kkt.base.jac_x = [lf, lh, ny, nl](const Vector& z, const Vector& w) {
    const Vector y = z.head(ny);
    const Vector lambda = z.tail(nl);
    Matrix j = Matrix::Zero(ny + nl, ny + nl);
    j.topLeftCorner(ny, ny) = lf.hess_yy(y, w);
    if (nl > 0) {
      const Matrix jh = lh.jacobian(y);
      j.topLeftCorner(ny, ny) += lh.hessian_sum(y, lambda);
      j.topRightCorner(ny, nl) = jh.transpose();
      j.bottomLeftCorner(nl, ny) = jh;
    }
    return j;
  };
  kkt.base.jac_a = [lf, ny, nl, nw](const Vector& z, const Vector& w) {
    Matrix j = Matrix::Zero(ny + nl, nw);
    j.topRows(ny) = lf.hess_yw(z.head(ny), w);
    return j;
  };
  return kkt;
}

/// Least-squares multipliers from stationarity: (dh/dy)^T lambda = -df/dy.
inline Vector recover_multipliers(const KktSystem& kkt, const Vector& y, const Vector& w) {
  require(y.size() == kkt.n_y, ErrorCode::kDimensionMismatch, "solution size");
  require(w.size() == kkt.f.n_w, ErrorCode::kDimensionMismatch, "parameter size");
  if (kkt.n_lambda == 0) return Vector(0);
  const Matrix jh = kkt.h.jacobian(y);
  const Index rank = numerics::numerical_rank(jh);
  if (rank < kkt.n_lambda) {
    fail(ErrorCode::kRankDeficient,
         "constraint Jacobian rank " + std::to_string(rank) + " < " + std::to_string(kkt.n_lambda));
  }
  const Vector g = kkt.f.grad_y(y, w);
  return jh.transpose().colPivHouseholderQr().solve(-g);
}

inline double kkt_residual(const KktSystem& kkt, const Vector& y, const Vector& lambda, const Vector& w) {
  return kkt.base.eval(kkt.pack(y, lambda), w).norm();
}

struct SelfCheckReport {
  double max_error_x = 0.0;
  double max_error_a = 0.0;
  double max_error() const { return std::max(max_error_x, max_error_a); }
};

/// Max of |analytic - FD| / (1 + |FD|) over both Jacobians, central
/// differences with step `step`.
inline SelfCheckReport self_check_system(const ConstraintSystem& sys, const Vector& x, const Vector& a,
                                         double step = kFdStep) {
  check_dimensions(sys, x, a);
  auto compare = [&](const Matrix& analytic, bool wrt_x) {
    double worst = 0.0;
    const Index n = wrt_x ? sys.n_x : sys.n_a;
    for (Index j = 0; j < n; ++j) {
      Vector xp = x, xm = x, ap = a, am = a;
      if (wrt_x) {
        xp[j] += step;
        xm[j] -= step;
      } else {
        ap[j] += step;
        am[j] -= step;
      }
      const Vector fd = (sys.eval(xp, ap) - sys.eval(xm, am)) / (2.0 * step);
      for (Index i = 0; i < fd.size(); ++i) {
        worst = std::max(worst, std::abs(analytic(i, j) - fd[i]) / (1.0 + std::abs(fd[i])));
      }
    }
    return worst;
  };
  SelfCheckReport rep;
  rep.max_error_x = compare(sys.jac_x(x, a), true);
  rep.max_error_a = compare(sys.jac_a(x, a), false);
  return rep;
}

}  // namespace minbackprop::ift
