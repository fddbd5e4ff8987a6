#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "minbackprop/numerics.hpp"

namespace minbackprop {

using Eigen::Matrix3d;
using Eigen::Vector3d;

// ---------------------------------------------------------------------------
// Problem instances

/// Three scene points and their homogeneous image directions.
/// Packed parameter order is [A1; A2; A3; a1; a2; a3].
struct P3pInstance {
  std::array<Vector3d, 3> points;
  std::array<Vector3d, 3> directions;

  Vector packed() const {
    Vector a(18);
    for (int i = 0; i < 3; ++i) {
      a.segment<3>(3 * i) = points[i];
      a.segment<3>(9 + 3 * i) = directions[i];
    }
    return a;
  }

  static P3pInstance unpack(const Vector& a) {
    require(a.size() == 18, ErrorCode::kDimensionMismatch, "P3P parameter vector must have 18 entries");
    P3pInstance inst;
    for (int i = 0; i < 3; ++i) {
      inst.points[i] = a.segment<3>(3 * i);
      inst.directions[i] = a.segment<3>(9 + 3 * i);
    }
    return inst;
  }
};

struct RegistrationInstance {
  std::vector<Vector3d> p;
  std::vector<Vector3d> q;
  Vector w;
  Matrix3d r_true = Matrix3d::Identity();

  Index size() const { return static_cast<Index>(p.size()); }
};

/// Correspondence q <-> q_tilde with q_tilde^T M q = 0. Stored with unit
/// third coordinate.
struct Match {
  Vector3d q;
  Vector3d q_tilde;
};

inline Vector3d canonical_point(const Vector3d& h) {
  require(std::abs(h.z()) > 1e-12, ErrorCode::kInvalidArgument, "homogeneous point at infinity");
  return h / h.z();
}

inline Match make_match(const Vector3d& q, const Vector3d& q_tilde) {
  return {canonical_point(q), canonical_point(q_tilde)};
}

inline bool is_canonical(const Match& m) { return m.q.z() == 1.0 && m.q_tilde.z() == 1.0; }

struct EpipolarInstance {
  std::vector<Match> matches;
  Vector weights;
  std::vector<bool> inlier;
  Matrix3d e_gt = Matrix3d::Zero();
  std::optional<Matrix3d> f_true;
  Matrix3d intrinsics = Matrix3d::Identity();
  Matrix3d rotation = Matrix3d::Identity();
  Vector3d translation = Vector3d::UnitX();

  Index size() const { return static_cast<Index>(matches.size()); }
};

struct ModelCandidateSet {
  std::vector<Matrix3d> candidates;
  Index selected_index = -1;
  double selection_distance = 0.0;
};

namespace solvers {

/// Largest-magnitude entry positive, ties to the lowest row-major index.
inline Matrix3d canonical_sign(const Matrix3d& m) {
  const Vector v = numerics::vec(m);
  const Index k = numerics::detail::dominant_index(v);
  return v[k] < 0.0 ? Matrix3d(-m) : m;
}

inline double sign_folded_distance(const Matrix3d& a, const Matrix3d& b) {
  return std::min((a - b).norm(), (a + b).norm());
}

// ---------------------------------------------------------------------------
// Univariate helpers

namespace detail {

/// Polynomial with ascending coefficients.
using Poly = std::vector<double>;

inline Poly padd(const Poly& a, const Poly& b) {
  Poly out(std::max(a.size(), b.size()), 0.0);
  for (size_t i = 0; i < a.size(); ++i) out[i] += a[i];
  for (size_t i = 0; i < b.size(); ++i) out[i] += b[i];
  return out;
}

inline Poly pscale(Poly a, double s) {
  for (double& c : a) c *= s;
  return a;
}

inline Poly psub(const Poly& a, const Poly& b) { return padd(a, pscale(b, -1.0)); }

inline Poly pmul(const Poly& a, const Poly& b) {
  if (a.empty() || b.empty()) return {};
  Poly out(a.size() + b.size() - 1, 0.0);
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return out;
}

inline double peval(const Poly& p, double x) {
  double acc = 0.0;
  for (size_t i = p.size(); i-- > 0;) acc = acc * x + p[i];
  return acc;
}

/// Real roots via companion-matrix eigenvalues. Leading coefficients that
/// are negligible relative to the largest one are dropped first. A double
/// root splits into a pair with imaginary part ~sqrt(eps), so eigenvalues
/// with |imag| <= near_real (1 + |real|) count as real; callers polish and
/// filter.
inline std::vector<double> real_roots(Poly p, double near_real = 1e-6) {
  double scale = 0.0;
  for (double c : p) scale = std::max(scale, std::abs(c));
  if (scale == 0.0) return {};
  while (!p.empty() && std::abs(p.back()) <= 1e-14 * scale) p.pop_back();
  if (p.size() < 2) return {};
  const Index n = static_cast<Index>(p.size()) - 1;
  Matrix companion = Matrix::Zero(n, n);
  for (Index i = 1; i < n; ++i) companion(i, i - 1) = 1.0;
  for (Index i = 0; i < n; ++i) companion(i, n - 1) = -p[i] / p[n];
  const Eigen::EigenSolver<Matrix> es(companion, false);
  std::vector<double> roots;
  for (Index i = 0; i < n; ++i) {
    const auto z = es.eigenvalues()[i];
    if (std::abs(z.imag()) <= near_real * (1.0 + std::abs(z.real()))) roots.push_back(z.real());
  }
  return roots;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// P3P

inline Vector p3p_residuals(const P3pInstance& inst, const Vector3d& x) {
  Vector3d r;
  for (int k = 0; k < 3; ++k) {
    const int i = k;
    const int j = (k + 1) % 3;
    r[k] = (inst.points[i] - inst.points[j]).squaredNorm() -
           (x[i] * inst.directions[i] - x[j] * inst.directions[j]).squaredNorm();
  }
  return r;
}

inline Matrix3d p3p_jacobian_depths(const P3pInstance& inst, const Vector3d& x) {
  Matrix3d j = Matrix3d::Zero();
  for (int k = 0; k < 3; ++k) {
    const int i = k;
    const int l = (k + 1) % 3;
    const Vector3d d = x[i] * inst.directions[i] - x[l] * inst.directions[l];
    j(k, i) = -2.0 * inst.directions[i].dot(d);
    j(k, l) = 2.0 * inst.directions[l].dot(d);
  }
  return j;
}

/// All real depth vectors x with ||A_i - A_j||^2 = ||x_i a_i - x_j a_j||^2.
/// Negative-depth roots are kept; the system is symmetric under x -> -x so
/// solutions come in sign pairs (up to 8 total).
inline std::vector<Vector3d> solve_p3p(const P3pInstance& inst) {
  using detail::Poly;
  const auto& A = inst.points;
  const double cross = (A[1] - A[0]).cross(A[2] - A[0]).norm();
  const double scale2 = std::max({(A[1] - A[0]).squaredNorm(), (A[2] - A[0]).squaredNorm(),
                                  (A[2] - A[1]).squaredNorm()});
  require(scale2 > 0.0 && cross > 1e-10 * scale2, ErrorCode::kDegenerateConfiguration, "collinear P3P points");
  for (const auto& a : inst.directions) {
    require(std::abs(a.z()) > 0.0, ErrorCode::kInvalidArgument, "image direction with zero third coordinate");
  }

  std::array<Vector3d, 3> u;
  std::array<double, 3> len{};
  for (int i = 0; i < 3; ++i) {
    len[i] = inst.directions[i].norm();
    u[i] = inst.directions[i] / len[i];
  }
  const double d12 = (A[0] - A[1]).squaredNorm();
  const double d13 = (A[0] - A[2]).squaredNorm();
  const double d23 = (A[1] - A[2]).squaredNorm();
  const double c12 = u[0].dot(u[1]);
  const double c13 = u[0].dot(u[2]);
  const double c23 = u[1].dot(u[2]);

  // With s2 = u s1, s3 = v s1 (distances along unit rays):
  //   d13 (1 + u^2 - 2u c12) = d12 (1 + v^2 - 2v c13)
  //   d23 (1 + u^2 - 2u c12) = d12 (u^2 + v^2 - 2uv c23)
  // both quadratic in u with coefficients polynomial in v.
  const double a1 = d13;
  const Poly b1{-2.0 * c12 * d13};
  const Poly cc1{d13 - d12, 2.0 * d12 * c13, -d12};
  const double a2 = d23 - d12;
  const Poly b2{-2.0 * c12 * d23, 2.0 * d12 * c23};
  const Poly cc2{d23, 0.0, -d12};

  using detail::pmul;
  using detail::pscale;
  using detail::psub;
  const Poly p = psub(pscale(cc2, a1), pscale(cc1, a2));   // a1 c2 - a2 c1
  const Poly q = psub(pscale(b2, a1), pscale(b1, a2));     // a1 b2 - a2 b1
  const Poly r = psub(pmul(b1, cc2), pmul(b2, cc1));       // b1 c2 - b2 c1
  const Poly resultant = psub(pmul(p, p), pmul(q, r));

  std::vector<Vector3d> out;
  // Near-duplicates keep the candidate with the smaller residual.
  auto push_unique = [&](const Vector3d& x) {
    const double rx = p3p_residuals(inst, x).norm();
    for (auto& y : out) {
      if ((x - y).norm() <= 1e-7 * std::max(1.0, y.norm())) {
        if (rx < p3p_residuals(inst, y).norm()) y = x;
        return;
      }
    }
    out.push_back(x);
  };

  for (double v : detail::real_roots(resultant)) {
    // The linear elimination degenerates when two roots share v, so the
    // two roots of the first quadratic are tried as well; Newton polishing
    // and the residual test below discard the spurious ones.
    std::vector<double> us;
    const double qv = detail::peval(q, v);
    const double pv = detail::peval(p, v);
    if (std::abs(qv) > 1e-10 * std::max(1.0, std::abs(pv))) us.push_back(-pv / qv);
    const double bq = detail::peval(b1, v);
    const double cq = detail::peval(cc1, v);
    const double disc = bq * bq - 4.0 * a1 * cq;
    if (disc >= 0.0) {
      us.push_back((-bq + std::sqrt(disc)) / (2.0 * a1));
      us.push_back((-bq - std::sqrt(disc)) / (2.0 * a1));
    }
    for (double uu : us) {
      const double denom = 1.0 + uu * uu - 2.0 * uu * c12;
      if (!(denom > 0.0)) continue;
      const double s1sq = d12 / denom;
      if (!(s1sq > 0.0)) continue;
      const double s1 = std::sqrt(s1sq);
      Vector3d x(s1 / len[0], uu * s1 / len[1], v * s1 / len[2]);
      for (int it = 0; it < 30; ++it) {
        const Vector3d res = p3p_residuals(inst, x);
        if (res.cwiseAbs().maxCoeff() < 1e-15 * scale2) break;
        const Matrix3d jac = p3p_jacobian_depths(inst, x);
        const Vector3d step = jac.fullPivLu().solve(res);
        if (!step.allFinite()) break;
        x -= step;
      }
      if (!x.allFinite()) continue;
      if (p3p_residuals(inst, x).cwiseAbs().maxCoeff() > 1e-8 * std::max(1.0, scale2)) continue;
      push_unique(x);
      push_unique(-x);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighted Kabsch

inline Matrix3d cross_covariance(const RegistrationInstance& inst) {
  Matrix3d h = Matrix3d::Zero();
  for (Index i = 0; i < inst.size(); ++i) h += inst.w[i] * inst.p[i] * inst.q[i].transpose();
  return h;
}

/// argmin over SO(3) of sum_i w_i ||R p_i - q_i||^2.
inline Matrix3d solve_kabsch(const RegistrationInstance& inst) {
  require(inst.size() >= 3 && inst.q.size() == inst.p.size() && inst.w.size() == inst.size(),
          ErrorCode::kDimensionMismatch, "registration needs |P| = |Q| = |w| >= 3");
  const Matrix3d h = cross_covariance(inst);
  numerics::require_finite(h, "cross-covariance");
  const numerics::SvdResult s = numerics::svd(h);
  if (numerics::rank_from_sigma(s.sigma, 3, 3) < 2) {
    fail(ErrorCode::kDegenerateConfiguration, "weighted cross-covariance has rank < 2");
  }
  const Matrix3d u = s.u;
  const Matrix3d v = s.v;
  Matrix3d d = Matrix3d::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  return v * d * u.transpose();
}

// ---------------------------------------------------------------------------
// Weighted 8-point

/// Coefficients of F (row-major) in q_tilde^T F q.
inline Eigen::Matrix<double, 9, 1> epipolar_row(const Match& m) {
  Eigen::Matrix<double, 9, 1> row;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) row[3 * a + b] = m.q_tilde[a] * m.q[b];
  return row;
}

inline Matrix weighted_design(const EpipolarInstance& inst) {
  const Index n = inst.size();
  require(inst.weights.size() == n, ErrorCode::kDimensionMismatch, "one weight per match");
  Matrix design(std::max<Index>(n, 9), 9);
  design.setZero();
  for (Index i = 0; i < n; ++i) {
    require(inst.weights[i] >= 0.0, ErrorCode::kInvalidArgument, "8-point weights must be non-negative");
    design.row(i) = std::sqrt(inst.weights[i]) * epipolar_row(inst.matches[i]).transpose();
  }
  return design;
}

/// Unit-norm smallest right singular vector of the weighted design, before
/// the rank-2 projection.
inline Matrix3d fundamental_8pt_unconstrained(const EpipolarInstance& inst) {
  require(inst.size() >= 8, ErrorCode::kInvalidArgument, "8-point needs at least 8 matches");
  const Matrix design = weighted_design(inst);
  const numerics::SvdResult s = numerics::svd(design);
  if (numerics::rank_from_sigma(s.sigma, design.rows(), design.cols()) < 8) {
    fail(ErrorCode::kDegenerateConfiguration, "8-point design matrix has rank < 8");
  }
  return numerics::unvec(s.v.col(8));
}

inline Matrix3d solve_fundamental_8pt(const EpipolarInstance& inst) {
  const Matrix3d f0 = fundamental_8pt_unconstrained(inst);
  const numerics::SvdResult s = numerics::svd(f0);
  const Matrix3d f = s.u.leftCols<2>() * s.sigma.head<2>().asDiagonal() * s.v.leftCols<2>().transpose();
  return canonical_sign(f / f.norm());
}

// ---------------------------------------------------------------------------
// Essential matrix constraints (shared by the 5-point solver and the
// constraint system used for differentiation)

inline Matrix3d trace_constraint(const Matrix3d& e) {
  const Matrix3d eet = e * e.transpose();
  return 2.0 * eet * e - eet.trace() * e;
}

/// Five epipolar rows, the norm row, and the nine trace rows (row-major).
inline Vector essential_residuals(const Matrix3d& e, std::span<const Match> sample) {
  Vector r(sample.size() + 10);
  Index k = 0;
  for (const auto& m : sample) r[k++] = m.q_tilde.dot(e * m.q);
  r[k++] = e.squaredNorm() - 1.0;
  r.tail(9) = numerics::vec(trace_constraint(e));
  return r;
}

namespace detail {

// Monomials in (x, y, z) of degree <= 3. The first ten are the cubic
// monomials eliminated by Gauss-Jordan, the last ten form the quotient basis
// [x^2, xy, y^2, xz, yz, z^2, x, y, z, 1].
inline constexpr std::array<std::array<int, 3>, 20> kMonomials{{
    {3, 0, 0}, {2, 1, 0}, {1, 2, 0}, {0, 3, 0}, {2, 0, 1}, {1, 1, 1}, {0, 2, 1}, {1, 0, 2}, {0, 1, 2}, {0, 0, 3},
    {2, 0, 0}, {1, 1, 0}, {0, 2, 0}, {1, 0, 1}, {0, 1, 1}, {0, 0, 2}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0},
}};

inline int monomial_index(int i, int j, int k) {
  for (int m = 0; m < 20; ++m) {
    if (kMonomials[m][0] == i && kMonomials[m][1] == j && kMonomials[m][2] == k) return m;
  }
  return -1;
}

// product_table[i][j] = index of monomial_i * monomial_j, or -1 past degree 3.
inline const std::array<std::array<int, 20>, 20>& product_table() {
  static const auto table = [] {
    std::array<std::array<int, 20>, 20> t{};
    for (int i = 0; i < 20; ++i)
      for (int j = 0; j < 20; ++j)
        t[i][j] = monomial_index(kMonomials[i][0] + kMonomials[j][0], kMonomials[i][1] + kMonomials[j][1],
                                 kMonomials[i][2] + kMonomials[j][2]);
    return t;
  }();
  return table;
}

inline std::array<double, 20> monomial_values(double x, double y, double z) {
  std::array<double, 20> v{};
  const std::array<double, 4> px{1.0, x, x * x, x * x * x};
  const std::array<double, 4> py{1.0, y, y * y, y * y * y};
  const std::array<double, 4> pz{1.0, z, z * z, z * z * z};
  for (int m = 0; m < 20; ++m) v[m] = px[kMonomials[m][0]] * py[kMonomials[m][1]] * pz[kMonomials[m][2]];
  return v;
}

struct Poly3 {
  std::array<double, 20> c{};

  Poly3 operator+(const Poly3& o) const {
    Poly3 r;
    for (int i = 0; i < 20; ++i) r.c[i] = c[i] + o.c[i];
    return r;
  }
  Poly3 operator-(const Poly3& o) const {
    Poly3 r;
    for (int i = 0; i < 20; ++i) r.c[i] = c[i] - o.c[i];
    return r;
  }
  Poly3 operator*(double s) const {
    Poly3 r;
    for (int i = 0; i < 20; ++i) r.c[i] = c[i] * s;
    return r;
  }
  Poly3 operator*(const Poly3& o) const {
    const auto& table = product_table();
    Poly3 r;
    for (int i = 0; i < 20; ++i) {
      if (c[i] == 0.0) continue;
      for (int j = 0; j < 20; ++j) {
        if (o.c[j] == 0.0) continue;
        const int m = table[i][j];
        if (m < 0) fail(ErrorCode::kInvalidArgument, "polynomial degree exceeds 3");
        r.c[m] += c[i] * o.c[j];
      }
    }
    return r;
  }

  double eval(double x, double y, double z) const {
    const auto mono = monomial_values(x, y, z);
    double acc = 0.0;
    for (int i = 0; i < 20; ++i) acc += c[i] * mono[i];
    return acc;
  }

  Vector3d gradient(double x, double y, double z) const {
    const std::array<double, 4> px{1.0, x, x * x, x * x * x};
    const std::array<double, 4> py{1.0, y, y * y, y * y * y};
    const std::array<double, 4> pz{1.0, z, z * z, z * z * z};
    Vector3d g = Vector3d::Zero();
    for (int i = 0; i < 20; ++i) {
      if (c[i] == 0.0) continue;
      const auto& e = kMonomials[i];
      if (e[0] > 0) g[0] += c[i] * e[0] * px[e[0] - 1] * py[e[1]] * pz[e[2]];
      if (e[1] > 0) g[1] += c[i] * e[1] * px[e[0]] * py[e[1] - 1] * pz[e[2]];
      if (e[2] > 0) g[2] += c[i] * e[2] * px[e[0]] * py[e[1]] * pz[e[2] - 1];
    }
    return g;
  }
};

inline std::array<Poly3, 10> essential_polynomials(const std::array<Matrix3d, 4>& basis) {
  std::array<std::array<Poly3, 3>, 3> e{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      Poly3& p = e[r][c];
      p.c[monomial_index(1, 0, 0)] = basis[0](r, c);
      p.c[monomial_index(0, 1, 0)] = basis[1](r, c);
      p.c[monomial_index(0, 0, 1)] = basis[2](r, c);
      p.c[monomial_index(0, 0, 0)] = basis[3](r, c);
    }
  }
  std::array<Poly3, 10> eqs{};
  eqs[0] = e[0][0] * (e[1][1] * e[2][2] - e[1][2] * e[2][1]) - e[0][1] * (e[1][0] * e[2][2] - e[1][2] * e[2][0]) +
           e[0][2] * (e[1][0] * e[2][1] - e[1][1] * e[2][0]);
  std::array<std::array<Poly3, 3>, 3> eet{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 3; ++k) eet[r][c] = eet[r][c] + e[r][k] * e[c][k];
  const Poly3 trace = eet[0][0] + eet[1][1] + eet[2][2];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      Poly3 acc;
      for (int k = 0; k < 3; ++k) acc = acc + eet[r][k] * e[k][c];
      eqs[1 + 3 * r + c] = acc * 2.0 - trace * e[r][c];
    }
  }
  return eqs;
}

}  // namespace detail

inline constexpr double kEssentialResidualTolerance = 1e-6;

/// Up to ten real essential matrices through five matches, each unit
/// Frobenius norm with canonical sign. Raises NoRealSolution when nothing
/// survives; the caller picks the fallback.
inline ModelCandidateSet solve_essential_5pt(std::span<const Match> sample) {
  require(sample.size() == 5, ErrorCode::kInvalidArgument, "5-point solver needs exactly 5 matches");
  Matrix design(5, 9);
  for (int i = 0; i < 5; ++i) design.row(i) = epipolar_row(sample[i]).transpose();
  const numerics::SvdResult s = numerics::svd(design);
  if (numerics::rank_from_sigma(s.sigma, 5, 9) < 5) {
    fail(ErrorCode::kDegenerateConfiguration, "5x9 epipolar design is rank deficient");
  }
  std::array<Matrix3d, 4> null_basis;
  for (int i = 0; i < 4; ++i) null_basis[i] = numerics::unvec(s.v.col(5 + i));

  // The chart E = x E1 + y E2 + z E3 + E4 misses solutions with no E4
  // component, and special geometry (pure translation, for one) can make
  // its elimination template singular. Fixed orthogonal remixes of the null
  // space give other charts.
  ModelCandidateSet out;
  bool any_regular = false;
  std::mt19937_64 mix_rng(0x5eed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int chart = 0; chart < 4 && out.candidates.empty(); ++chart) {
    std::array<Matrix3d, 4> basis = null_basis;
    if (chart > 0) {
      Eigen::Matrix4d g;
      for (int i = 0; i < 16; ++i) g(i / 4, i % 4) = gauss(mix_rng);
      const Eigen::Matrix4d q = Eigen::HouseholderQR<Eigen::Matrix4d>(g).householderQ();
      for (int i = 0; i < 4; ++i) {
        basis[i].setZero();
        for (int j = 0; j < 4; ++j) basis[i] += q(j, i) * null_basis[j];
      }
    }
    const auto eqs = detail::essential_polynomials(basis);
    Matrix coeffs(10, 20);
    for (int r = 0; r < 10; ++r)
      for (int c = 0; c < 20; ++c) coeffs(r, c) = eqs[r].c[c];

    const Eigen::FullPivLU<Matrix> lu(coeffs.leftCols(10));
    if (lu.rank() < 10) continue;
    any_regular = true;
    const Matrix reduced = lu.solve(coeffs.rightCols(10));  // cubic monomial = -reduced.row * basis

    // Multiplication by x on the quotient basis.
    constexpr std::array<int, 6> kTimesXCubic{0, 1, 2, 4, 5, 7};  // x*x^2, x*xy, x*y^2, x*xz, x*yz, x*z^2
    constexpr std::array<int, 4> kTimesXBasis{0, 1, 3, 6};       // x*x, x*y, x*z, x*1 -> basis slots
    Matrix action = Matrix::Zero(10, 10);
    for (int j = 0; j < 6; ++j) action.row(j) = -reduced.row(kTimesXCubic[j]);
    for (int j = 0; j < 4; ++j) action(6 + j, kTimesXBasis[j]) = 1.0;

    for (const auto& pair : numerics::real_eigenpairs(action)) {
      const Vector& b = pair.vector;
      if (std::abs(b[9]) < 1e-12) continue;
      Vector3d xyz(b[6] / b[9], b[7] / b[9], b[8] / b[9]);

      // Gauss-Newton polish on the ten cubic constraints.
      for (int it = 0; it < 4; ++it) {
        Eigen::Matrix<double, 10, 1> res;
        Eigen::Matrix<double, 10, 3> jac;
        for (int k = 0; k < 10; ++k) {
          res[k] = eqs[k].eval(xyz[0], xyz[1], xyz[2]);
          jac.row(k) = eqs[k].gradient(xyz[0], xyz[1], xyz[2]).transpose();
        }
        const Vector3d step = jac.colPivHouseholderQr().solve(res);
        if (!step.allFinite()) break;
        xyz -= step;
        if (step.norm() < 1e-15 * std::max(1.0, xyz.norm())) break;
      }
      Matrix3d e = xyz[0] * basis[0] + xyz[1] * basis[1] + xyz[2] * basis[2] + basis[3];
      const double n = e.norm();
      if (!(n > 0.0) || !e.allFinite()) continue;
      e = canonical_sign(e / n);
      if (essential_residuals(e, sample).cwiseAbs().maxCoeff() > kEssentialResidualTolerance) continue;
      bool duplicate = false;
      for (const auto& other : out.candidates) duplicate = duplicate || sign_folded_distance(e, other) <= 1e-6;
      if (!duplicate) out.candidates.push_back(e);
    }
  }
  if (!any_regular) fail(ErrorCode::kNoRealSolution, "cubic elimination template is singular in every chart");
  if (out.candidates.empty()) fail(ErrorCode::kNoRealSolution, "no real essential matrix through the sample");
  return out;
}

// ---------------------------------------------------------------------------
// Selection

struct Selection {
  Index index = -1;
  double distance = 0.0;
  Matrix3d model = Matrix3d::Zero();
};

/// Candidate minimising min(||M - gt||, ||M + gt||); first index wins ties.
inline Selection select_closest(std::span<const Matrix3d> candidates, const Matrix3d& gt) {
  require(!candidates.empty(), ErrorCode::kEmptyCandidates, "no candidates to select from");
  Selection best;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const double d = sign_folded_distance(candidates[i], gt);
    if (best.index < 0 || d < best.distance) {
      best.index = static_cast<Index>(i);
      best.distance = d;
      best.model = candidates[i];
    }
  }
  return best;
}

inline void select_closest(ModelCandidateSet& set, const Matrix3d& gt) {
  const Selection s = select_closest(std::span<const Matrix3d>(set.candidates), gt);
  set.selected_index = s.index;
  set.selection_distance = s.distance;
}

}  // namespace solvers
}  // namespace minbackprop
