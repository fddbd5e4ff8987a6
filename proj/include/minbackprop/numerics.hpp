#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "minbackprop/error.hpp"

namespace minbackprop {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

namespace numerics {

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) fail(ErrorCode::kNonFinite, std::string(what) + " has non-finite entries");
}

/// ||a - b||_F / max(||b||_F, tiny)
template <typename A, typename B>
double relative_error(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double denom = std::max(b.norm(), std::numeric_limits<double>::min());
  return (a - b).norm() / denom;
}

struct SvdResult {
  Matrix u;      // rows x rows
  Vector sigma;  // min(rows, cols), non-increasing
  Matrix v;      // cols x cols

  Matrix reconstruct() const {
    Matrix s = Matrix::Zero(u.cols(), v.cols());
    for (Index i = 0; i < sigma.size(); ++i) s(i, i) = sigma[i];
    return u * s * v.transpose();
  }
};

namespace detail {

// Index of the largest-magnitude entry; the first one wins on ties.
template <typename Derived>
Index dominant_index(const Eigen::MatrixBase<Derived>& col) {
  Index best = 0;
  double best_abs = -1.0;
  for (Index i = 0; i < col.size(); ++i) {
    const double a = std::abs(col[i]);
    if (a > best_abs) {
      best_abs = a;
      best = i;
    }
  }
  return best;
}

}  // namespace detail

/// Full SVD. The largest-magnitude entry of every left singular vector is
/// made positive (right vectors follow their partner); unpaired right
/// vectors get the same rule applied to themselves.
inline SvdResult svd(const Matrix& m) {
  require_finite(m, "svd input");
  Eigen::JacobiSVD<Matrix> solver(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  SvdResult out{solver.matrixU(), solver.singularValues(), solver.matrixV()};
  if (!out.u.allFinite() || !out.v.allFinite() || !out.sigma.allFinite()) {
    fail(ErrorCode::kConvergenceFailure, "SVD produced non-finite factors");
  }
  const Index p = out.sigma.size();
  for (Index i = 0; i < out.u.cols(); ++i) {
    const Index k = detail::dominant_index(out.u.col(i));
    if (out.u(k, i) < 0.0) {
      out.u.col(i) *= -1.0;
      if (i < p) out.v.col(i) *= -1.0;
    }
  }
  for (Index i = p; i < out.v.cols(); ++i) {
    const Index k = detail::dominant_index(out.v.col(i));
    if (out.v(k, i) < 0.0) out.v.col(i) *= -1.0;
  }
  return out;
}

inline double default_tolerance(Index rows, Index cols, double sigma_max) {
  return static_cast<double>(std::max(rows, cols)) * sigma_max * std::numeric_limits<double>::epsilon();
}

/// Negative `tol` selects max(rows, cols) * sigma_max * eps.
inline Matrix pseudoinverse(const Matrix& m, double tol = -1.0) {
  const SvdResult s = svd(m);
  const double sigma_max = s.sigma.size() > 0 ? s.sigma[0] : 0.0;
  if (tol < 0.0) tol = default_tolerance(m.rows(), m.cols(), sigma_max);
  Matrix out = Matrix::Zero(m.cols(), m.rows());
  for (Index i = 0; i < s.sigma.size(); ++i) {
    if (s.sigma[i] > tol) out += (s.v.col(i) / s.sigma[i]) * s.u.col(i).transpose();
  }
  return out;
}

inline Index rank_from_sigma(const Vector& sigma, Index rows, Index cols, double tol = -1.0) {
  const double sigma_max = sigma.size() > 0 ? sigma[0] : 0.0;
  if (tol < 0.0) tol = default_tolerance(rows, cols, sigma_max);
  return static_cast<Index>((sigma.array() > tol).count());
}

inline Index numerical_rank(const Matrix& m, double tol = -1.0) {
  return rank_from_sigma(svd(m).sigma, m.rows(), m.cols(), tol);
}

struct EigenPair {
  double value;
  Vector vector;  // unit length, first nonzero entry positive
};

inline constexpr double kRealEigenvalueTolerance = 1e-8;

/// Real eigenpairs of a square matrix, sorted by eigenvalue.
inline std::vector<EigenPair> real_eigenpairs(const Matrix& m) {
  require(m.rows() == m.cols(), ErrorCode::kDimensionMismatch, "real_eigenpairs needs a square matrix");
  require_finite(m, "real_eigenpairs input");
  Eigen::EigenSolver<Matrix> solver(m, true);
  if (solver.info() != Eigen::Success) fail(ErrorCode::kConvergenceFailure, "eigen decomposition did not converge");

  std::vector<EigenPair> out;
  const auto values = solver.eigenvalues();
  const auto vectors = solver.eigenvectors();
  for (Index i = 0; i < values.size(); ++i) {
    if (std::abs(values[i].imag()) >= kRealEigenvalueTolerance) continue;
    Vector v = vectors.col(i).real();
    const double n = v.norm();
    if (!(n > 0.0)) continue;
    v /= n;
    for (Index k = 0; k < v.size(); ++k) {
      if (std::abs(v[k]) > 1e-12) {
        if (v[k] < 0.0) v = -v;
        break;
      }
    }
    out.push_back({values[i].real(), std::move(v)});
  }
  std::stable_sort(out.begin(), out.end(), [](const EigenPair& a, const EigenPair& b) { return a.value < b.value; });
  return out;
}

/// Row-major flattening used for every 3x3 model in the library.
inline Vector vec(const Eigen::Matrix3d& m) {
  Vector out(9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out[3 * r + c] = m(r, c);
  return out;
}

template <typename Derived>
Eigen::Matrix3d unvec(const Eigen::MatrixBase<Derived>& v) {
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = v[3 * r + c];
  return m;
}

inline Eigen::Matrix3d skew(const Eigen::Vector3d& t) {
  Eigen::Matrix3d s;
  s << 0.0, -t.z(), t.y(), t.z(), 0.0, -t.x(), -t.y(), t.x(), 0.0;
  return s;
}

/// Matrix of cofactors; d det(M) / dM_ab = cofactor(M)_ab.
inline Eigen::Matrix3d cofactor(const Eigen::Matrix3d& m) {
  Eigen::Matrix3d c;
  c.row(0) = m.row(1).cross(m.row(2));
  c.row(1) = m.row(2).cross(m.row(0));
  c.row(2) = m.row(0).cross(m.row(1));
  return c;
}

}  // namespace numerics
}  // namespace minbackprop
