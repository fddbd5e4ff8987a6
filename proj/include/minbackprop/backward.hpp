#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "minbackprop/ift.hpp"
#include "minbackprop/solvers.hpp"
#include "minbackprop/systems.hpp"

namespace minbackprop::backward {

enum class Problem { kP3p, kRegistration, kFundamental, kEssential };
enum class BackwardMethod { kIftDirect, kKktIft, kSvdClosedForm, kFiniteDifference };

inline const char* to_string(Problem p) {
  switch (p) {
    case Problem::kP3p: return "p3p";
    case Problem::kRegistration: return "registration";
    case Problem::kFundamental: return "fundamental";
    case Problem::kEssential: return "essential";
  }
  return "?";
}

inline const char* to_string(BackwardMethod m) {
  switch (m) {
    case BackwardMethod::kIftDirect: return "ift-direct";
    case BackwardMethod::kKktIft: return "kkt-ift";
    case BackwardMethod::kSvdClosedForm: return "svd-closed-form";
    case BackwardMethod::kFiniteDifference: return "finite-difference";
  }
  return "?";
}

inline std::optional<Problem> parse_problem(const std::string& s) {
  for (Problem p : {Problem::kP3p, Problem::kRegistration, Problem::kFundamental, Problem::kEssential})
    if (s == to_string(p)) return p;
  return std::nullopt;
}

inline std::optional<BackwardMethod> parse_method(const std::string& s) {
  for (BackwardMethod m : {BackwardMethod::kIftDirect, BackwardMethod::kKktIft, BackwardMethod::kSvdClosedForm,
                           BackwardMethod::kFiniteDifference})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

inline bool applicable(BackwardMethod m, Problem p) {
  switch (m) {
    case BackwardMethod::kIftDirect: return p == Problem::kP3p || p == Problem::kEssential;
    case BackwardMethod::kKktIft:
    case BackwardMethod::kSvdClosedForm: return p == Problem::kRegistration || p == Problem::kFundamental;
    case BackwardMethod::kFiniteDifference: return true;
  }
  return false;
}

inline std::vector<BackwardMethod> analytic_methods(Problem p) {
  std::vector<BackwardMethod> out;
  for (BackwardMethod m : {BackwardMethod::kIftDirect, BackwardMethod::kKktIft, BackwardMethod::kSvdClosedForm})
    if (applicable(m, p)) out.push_back(m);
  return out;
}

struct GradientReport {
  Vector dJdw;
  Matrix jacobian;  // d model / d parameters, row-major model entries
  double wall_time = 0.0;
  int rank_failures = 0;
  bool fallback_used = false;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline GradientReport finish(Matrix jacobian, const Vector& upper, Clock::time_point t0) {
  GradientReport rep;
  rep.dJdw = jacobian.transpose() * upper;
  rep.jacobian = std::move(jacobian);
  numerics::require_finite(rep.dJdw, "parameter gradient");
  rep.wall_time = seconds_since(t0);
  return rep;
}

inline void require_distinct(const Vector& sigma, Index count, const char* what) {
  for (Index i = 0; i < count; ++i)
    for (Index j = i + 1; j < count; ++j)
      if (std::abs(sigma[i] - sigma[j]) < 1e-8)
        fail(ErrorCode::kDegenerateSpectrum, std::string(what) + ": singular values closer than 1e-8");
}

/// Antisymmetric generators of dU = U Omega_U, dV = V Omega_V for a square
/// matrix with SVD U S V^T perturbed by dM, given dP = U^T dM V.
inline std::pair<Matrix3d, Matrix3d> svd_rotations(const Matrix3d& dp, const Eigen::Vector3d& s) {
  Matrix3d ou = Matrix3d::Zero();
  Matrix3d ov = Matrix3d::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const double den = s[j] * s[j] - s[i] * s[i];
      ou(i, j) = (s[j] * dp(i, j) + s[i] * dp(j, i)) / den;
      ov(i, j) = (s[i] * dp(i, j) + s[j] * dp(j, i)) / den;
    }
  }
  return {ou, ov};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// P3P

inline GradientReport backward_p3p(const Vector3d& x, const P3pInstance& inst, const Vector3d& dJdx) {
  const auto t0 = detail::Clock::now();
  const auto sol = ift::ift_jacobian(systems::p3p_system(), x, inst.packed());
  if (!sol.full_rank()) fail(ErrorCode::kRankDeficient, "P3P depth Jacobian is singular");
  return detail::finish(sol.dxda, dJdx, t0);
}

// ---------------------------------------------------------------------------
// Essential (ift-direct on the reduced 9x9 system)

inline constexpr int kDefaultMaxRetries = 5;

struct EssentialJacobian {
  Matrix dEdw;  // 9 x 20
  int attempts = 0;
};

inline EssentialJacobian essential_solution_jacobian(const Matrix3d& e, std::span<const Match> sample,
                                                     std::mt19937_64& rng, int max_retries = kDefaultMaxRetries) {
  require(sample.size() == 5, ErrorCode::kInvalidArgument, "essential backward needs five matches");
  const auto sys = systems::essential_system();
  const Vector x = numerics::vec(e);
  const Vector a = systems::pack_sample(sample);
  const Vector r = sys.eval(x, a);
  if (r.cwiseAbs().maxCoeff() >= ift::kRootTolerance) {
    fail(ErrorCode::kNotARoot, "essential residual " + std::to_string(r.cwiseAbs().maxCoeff()));
  }
  const auto red = systems::reduce_essential_jacobian(sys.jac_x(x, a), rng, max_retries);
  const Matrix ja = systems::apply_reduction(sys.jac_a(x, a), red.combo);
  return {-red.jx.partialPivLu().solve(ja), red.attempts};
}

/// Full-rank dE/dw matrices from other members of a batch. An empty pool
/// means the zero-gradient fallback.
struct FallbackPolicy {
  std::span<const Matrix> pool;
  std::mt19937_64* rng = nullptr;
};

inline GradientReport backward_essential(const Matrix3d& e, std::span<const Match> sample, const Matrix3d& dJdE,
                                         std::mt19937_64& rng, const FallbackPolicy* fallback = nullptr,
                                         int max_retries = kDefaultMaxRetries) {
  const auto t0 = detail::Clock::now();
  const Vector upper = numerics::vec(dJdE);
  try {
    return detail::finish(essential_solution_jacobian(e, sample, rng, max_retries).dEdw, upper, t0);
  } catch (const Error& err) {
    if (err.code() != ErrorCode::kRankDeficient || fallback == nullptr) throw;
  }
  Matrix jac = Matrix::Zero(9, systems::kEssentialParams);
  if (!fallback->pool.empty()) {
    std::mt19937_64& pick_rng = fallback->rng ? *fallback->rng : rng;
    std::uniform_int_distribution<size_t> pick(0, fallback->pool.size() - 1);
    jac = fallback->pool[pick(pick_rng)];
  }
  GradientReport rep = detail::finish(std::move(jac), upper, t0);
  rep.rank_failures = 1;
  rep.fallback_used = true;
  return rep;
}

// ---------------------------------------------------------------------------
// Registration

inline Matrix registration_jacobian_kkt(const Matrix3d& r, const RegistrationInstance& inst) {
  auto losses = systems::registration_losses(inst);
  const auto kkt = ift::build_kkt(std::move(losses.f), std::move(losses.h));
  const Vector y = numerics::vec(r);
  const Vector lambda = ift::recover_multipliers(kkt, y, inst.w);
  const auto sol = ift::ift_jacobian(kkt.base, kkt.pack(y, lambda), inst.w);
  if (!sol.full_rank()) fail(ErrorCode::kRankDeficient, "registration KKT matrix is singular");
  return sol.dxda.topRows(9);
}

inline GradientReport backward_registration_kkt(const Matrix3d& r, const RegistrationInstance& inst,
                                                const Matrix3d& dJdR) {
  const auto t0 = detail::Clock::now();
  return detail::finish(registration_jacobian_kkt(r, inst), numerics::vec(dJdR), t0);
}

/// Differentiates R = V D U^T with H = sum_i w_i p_i q_i^T = U S V^T.
inline Matrix registration_jacobian_svd(const Matrix3d& r, const RegistrationInstance& inst) {
  const Matrix3d h = solvers::cross_covariance(inst);
  const auto s = numerics::svd(h);
  const Matrix3d u = s.u;
  const Matrix3d v = s.v;
  const Eigen::Vector3d sigma = s.sigma;
  detail::require_distinct(s.sigma, 3, "cross-covariance");
  Matrix3d d = Matrix3d::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  if ((v * d * u.transpose() - r).norm() > 1e-6) fail(ErrorCode::kNotARoot, "R is not the Kabsch solution");

  Matrix jac(9, inst.size());
  for (Index k = 0; k < inst.size(); ++k) {
    const Matrix3d dp = u.transpose() * (inst.p[k] * inst.q[k].transpose()) * v;
    const auto [ou, ov] = detail::svd_rotations(dp, sigma);
    jac.col(k) = numerics::vec(v * (ov * d - d * ou) * u.transpose());
  }
  return jac;
}

inline GradientReport backward_registration_svd(const Matrix3d& r, const RegistrationInstance& inst,
                                                const Matrix3d& dJdR) {
  const auto t0 = detail::Clock::now();
  return detail::finish(registration_jacobian_svd(r, inst), numerics::vec(dJdR), t0);
}

// ---------------------------------------------------------------------------
// Fundamental
//
// The forward is f0 = argmin (1/N) sum w_i (a_i^T f)^2 s.t. ||f|| = 1,
// followed by F = c * proj(F0) / ||proj(F0)|| with proj the rank-2
// truncation and c the canonical sign. The KKT backward chains two
// declarative nodes: the unit-norm eigenproblem in w, and the nearest
// unit-norm rank-2 matrix to F0 under {det F = 0, ||F||^2 = 1}.

struct FundamentalStages {
  Vector f0;        // unit vector, SVD sign convention
  Matrix3d f_rank2;  // unit norm, before the canonical sign
  double sign = 1.0;
};

inline FundamentalStages fundamental_stages(const Matrix3d& f, const EpipolarInstance& inst) {
  FundamentalStages st;
  st.f0 = numerics::vec(solvers::fundamental_8pt_unconstrained(inst));
  const auto s = numerics::svd(numerics::unvec(st.f0));
  const Matrix3d p = s.u.leftCols<2>() * s.sigma.head<2>().asDiagonal() * s.v.leftCols<2>().transpose();
  st.f_rank2 = p / p.norm();
  st.sign = f.cwiseProduct(st.f_rank2).sum() < 0.0 ? -1.0 : 1.0;
  if ((st.sign * st.f_rank2 - f).norm() > 1e-6) fail(ErrorCode::kNotARoot, "F is not the 8-point solution");
  return st;
}

inline Matrix fundamental_jacobian_kkt(const Matrix3d& f, const EpipolarInstance& inst) {
  const FundamentalStages st = fundamental_stages(f, inst);

  const auto eig = ift::build_kkt(systems::weighted_algebraic_loss(inst), systems::unit_norm_constraint(9));
  const Vector l1 = ift::recover_multipliers(eig, st.f0, inst.weights);
  const auto s1 = ift::ift_jacobian(eig.base, eig.pack(st.f0, l1), inst.weights);
  if (!s1.full_rank()) fail(ErrorCode::kRankDeficient, "8-point eigenproblem KKT matrix is singular");

  const auto near = ift::build_kkt(systems::nearest_matrix_loss(), systems::rank2_unit_constraints());
  const Vector y = numerics::vec(st.f_rank2);
  const Vector l2 = ift::recover_multipliers(near, y, st.f0);
  const auto s2 = ift::ift_jacobian(near.base, near.pack(y, l2), st.f0);
  if (!s2.full_rank()) fail(ErrorCode::kRankDeficient, "rank-2 projection KKT matrix is singular");

  return st.sign * s2.dxda.topRows(9) * s1.dxda.topRows(9);
}

inline GradientReport backward_fundamental_kkt(const Matrix3d& f, const EpipolarInstance& inst,
                                               const Matrix3d& dJdF) {
  const auto t0 = detail::Clock::now();
  return detail::finish(fundamental_jacobian_kkt(f, inst), numerics::vec(dJdF), t0);
}

/// Closed-form differentiation of both SVDs and the normalisation.
inline Matrix fundamental_jacobian_svd(const Matrix3d& f, const EpipolarInstance& inst) {
  const FundamentalStages st = fundamental_stages(f, inst);
  const Index n = inst.size();

  // Stage 1: f0 is the eigenvector of M = sum w_i a_i a_i^T with the
  // smallest eigenvalue; dM/dw_i = a_i a_i^T.
  const Matrix design = solvers::weighted_design(inst);
  const auto sa = numerics::svd(design);
  const Vector mu = sa.sigma.array().square();
  detail::require_distinct(sa.sigma, 9, "8-point design");
  Vector v9 = sa.v.col(8);
  if (v9.dot(st.f0) < 0.0) v9 = -v9;
  Matrix df0(9, n);
  for (Index i = 0; i < n; ++i) {
    const Vector a = solvers::epipolar_row(inst.matches[i]);
    const double av9 = a.dot(v9);
    Vector d = Vector::Zero(9);
    for (Index j = 0; j < 8; ++j) d += sa.v.col(j) * (sa.v.col(j).dot(a) * av9 / (mu[8] - mu[j]));
    df0.col(i) = d;
  }

  // Stage 2: rank-2 truncation of F0 = U S V^T.
  const auto s = numerics::svd(numerics::unvec(st.f0));
  const Matrix3d u = s.u;
  const Matrix3d v = s.v;
  const Eigen::Vector3d sigma = s.sigma;
  detail::require_distinct(s.sigma, 3, "F0");
  const Eigen::Vector3d trunc(sigma[0], sigma[1], 0.0);
  const Matrix3d p = u * trunc.asDiagonal() * v.transpose();
  const double pn = p.norm();

  Matrix jac(9, n);
  for (Index i = 0; i < n; ++i) {
    const Matrix3d dp = u.transpose() * numerics::unvec(df0.col(i)) * v;
    const auto [ou, ov] = detail::svd_rotations(dp, sigma);
    const Eigen::Vector3d ds(dp(0, 0), dp(1, 1), 0.0);
    const Matrix3d dtr =
        u * (ou * trunc.asDiagonal().toDenseMatrix() + Matrix3d(ds.asDiagonal()) - trunc.asDiagonal() * ov) *
        v.transpose();
    // Stage 3: normalisation and sign.
    const Matrix3d dn = dtr / pn - p * (p.cwiseProduct(dtr).sum() / (pn * pn * pn));
    jac.col(i) = st.sign * numerics::vec(dn);
  }
  return jac;
}

inline GradientReport backward_fundamental_svd(const Matrix3d& f, const EpipolarInstance& inst,
                                               const Matrix3d& dJdF) {
  const auto t0 = detail::Clock::now();
  return detail::finish(fundamental_jacobian_svd(f, inst), numerics::vec(dJdF), t0);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle with root tracking

using CandidateSolver = std::function<std::vector<Vector>(const Vector& a)>;

struct FdOptions {
  double rel_step = 1e-6;
  double abs_step = 1e-8;
  bool sign_fold = false;
};

namespace detail {

inline Vector nearest_candidate(const std::vector<Vector>& cands, const Vector& x0, bool sign_fold, double& dist) {
  if (cands.empty()) fail(ErrorCode::kTrackingFailure, "forward solver returned no candidates");
  Vector best;
  dist = std::numeric_limits<double>::infinity();
  for (const Vector& c : cands) {
    const double dp = (c - x0).norm();
    if (dp < dist) {
      dist = dp;
      best = c;
    }
    if (sign_fold) {
      const double dm = (c + x0).norm();
      if (dm < dist) {
        dist = dm;
        best = -c;
      }
    }
  }
  return best;
}

}  // namespace detail

/// Central differences of the tracked solution. A column whose two
/// one-sided displacements differ by more than 10x (plus a noise floor) is
/// treated as a root swap.
inline Matrix fd_oracle(const CandidateSolver& solve, const Vector& x0, const Vector& a,
                        const FdOptions& opt = {}) {
  Matrix jac(x0.size(), a.size());
  const double floor = 1e-9 * std::max(1.0, x0.norm());
  for (Index m = 0; m < a.size(); ++m) {
    const double step = std::max(opt.rel_step * std::abs(a[m]), opt.abs_step);
    Vector ap = a, am = a;
    ap[m] += step;
    am[m] -= step;
    double dp = 0.0, dm = 0.0;
    const Vector xp = detail::nearest_candidate(solve(ap), x0, opt.sign_fold, dp);
    const Vector xm = detail::nearest_candidate(solve(am), x0, opt.sign_fold, dm);
    if (std::max(dp, dm) > 10.0 * std::min(dp, dm) + floor) {
      fail(ErrorCode::kTrackingFailure, "root swap while perturbing parameter " + std::to_string(m) + " (" + std::to_string(dp) + ", " + std::to_string(dm) + ")");
    }
    jac.col(m) = (xp - xm) / (2.0 * step);
  }
  return jac;
}

inline Matrix fd_p3p(const P3pInstance& inst, const Vector3d& x0, const FdOptions& opt = {}) {
  auto solve = [](const Vector& a) {
    std::vector<Vector> out;
    for (const Vector3d& x : solvers::solve_p3p(P3pInstance::unpack(a))) out.emplace_back(x);
    return out;
  };
  return fd_oracle(solve, x0, inst.packed(), opt);
}

inline Matrix fd_registration(const RegistrationInstance& inst, const FdOptions& opt = {}) {
  auto solve = [inst](const Vector& w) {
    RegistrationInstance local = inst;
    local.w = w;
    return std::vector<Vector>{numerics::vec(solvers::solve_kabsch(local))};
  };
  return fd_oracle(solve, numerics::vec(solvers::solve_kabsch(inst)), inst.w, opt);
}

inline Matrix fd_fundamental(const EpipolarInstance& inst, const FdOptions& opt = {}) {
  FdOptions o = opt;
  o.sign_fold = true;
  auto solve = [inst](const Vector& w) {
    EpipolarInstance local = inst;
    local.weights = w;
    return std::vector<Vector>{numerics::vec(solvers::solve_fundamental_8pt(local))};
  };
  return fd_oracle(solve, numerics::vec(solvers::solve_fundamental_8pt(inst)), inst.weights, o);
}

inline Matrix fd_essential(std::span<const Match> sample, const Matrix3d& e0, const FdOptions& opt = {}) {
  FdOptions o = opt;
  o.sign_fold = true;
  auto solve = [](const Vector& a) {
    const auto local = systems::unpack_sample(a);
    std::vector<Vector> out;
    try {
      for (const Matrix3d& e : solvers::solve_essential_5pt(local).candidates) out.push_back(numerics::vec(e));
    } catch (const Error& err) {
      if (err.code() != ErrorCode::kNoRealSolution) throw;
    }
    return out;
  };
  return fd_oracle(solve, numerics::vec(e0), systems::pack_sample(sample), o);
}

}  // namespace minbackprop::backward
