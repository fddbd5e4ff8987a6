#include <random>

#include <gtest/gtest.h>

#include "minbackprop/numerics.hpp"

using namespace minbackprop;

namespace {

Matrix random_matrix(Index r, Index c, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

}  // namespace

TEST(Svd, Identity) {
  const auto s = numerics::svd(Matrix::Identity(3, 3));
  EXPECT_TRUE(s.u.isApprox(Matrix::Identity(3, 3)));
  EXPECT_TRUE(s.v.isApprox(Matrix::Identity(3, 3)));
  EXPECT_TRUE(s.sigma.isApprox(Vector::Ones(3)));
}

TEST(Svd, Diagonal) {
  Matrix d = Matrix::Zero(3, 3);
  d.diagonal() << 1.0, 3.0, 2.0;
  const auto s = numerics::svd(d);
  EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
  EXPECT_NEAR(s.sigma[1], 2.0, 1e-14);
  EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
}

TEST(Svd, ReconstructsRandom) {
  const Matrix m = random_matrix(9, 9, 7);
  const auto s = numerics::svd(m);
  EXPECT_LT((s.reconstruct() - m).norm(), 1e-12);
  EXPECT_LT((s.u.transpose() * s.u - Matrix::Identity(9, 9)).norm(), 1e-12);
  EXPECT_LT((s.v.transpose() * s.v - Matrix::Identity(9, 9)).norm(), 1e-12);
}

TEST(Svd, RectangularAndSignConvention) {
  const Matrix m = random_matrix(5, 9, 3);
  const auto s = numerics::svd(m);
  EXPECT_EQ(s.u.rows(), 5);
  EXPECT_EQ(s.v.rows(), 9);
  EXPECT_LT((s.reconstruct() - m).norm(), 1e-12);
  for (Index k = 0; k < s.u.cols(); ++k) {
    Index i = 0;
    s.u.col(k).cwiseAbs().maxCoeff(&i);
    EXPECT_GT(s.u(i, k), 0.0);
  }
  for (Index k = 1; k < s.sigma.size(); ++k) EXPECT_GE(s.sigma[k - 1], s.sigma[k]);
}

TEST(Pseudoinverse, Trivial) {
  EXPECT_TRUE(numerics::pseudoinverse(Matrix::Identity(3, 3)).isApprox(Matrix::Identity(3, 3)));
  Matrix a(2, 2);
  a << 2, 0, 0, 0;
  Matrix expected(2, 2);
  expected << 0.5, 0, 0, 0;
  EXPECT_LT((numerics::pseudoinverse(a) - expected).norm(), 1e-15);
}

TEST(Pseudoinverse, InvertibleIsInverse) {
  const Matrix a = random_matrix(3, 3, 11);
  EXPECT_LT((a * numerics::pseudoinverse(a) - Matrix::Identity(3, 3)).norm(), 1e-10);
}

// The four Moore-Penrose conditions on full-rank, wide, tall and
// rank-deficient inputs.
TEST(Pseudoinverse, MoorePenroseIdentities) {
  std::vector<Matrix> cases = {random_matrix(4, 4, 1), random_matrix(3, 7, 2), random_matrix(8, 5, 3)};
  cases.push_back(random_matrix(6, 2, 4) * random_matrix(2, 5, 5));
  for (const Matrix& a : cases) {
    const Matrix p = numerics::pseudoinverse(a);
    const double scale = 1.0 + a.norm() * p.norm();
    EXPECT_LT((a * p * a - a).norm() / scale, 1e-12);
    EXPECT_LT((p * a * p - p).norm() / scale, 1e-12);
    EXPECT_LT((a * p - (a * p).transpose()).norm() / scale, 1e-12);
    EXPECT_LT((p * a - (p * a).transpose()).norm() / scale, 1e-12);
  }
}

TEST(Rank, Basics) {
  EXPECT_EQ(numerics::numerical_rank(Matrix::Identity(3, 3)), 3);
  const Eigen::Vector3d u(1, 2, 3), v(-1, 0.5, 2);
  EXPECT_EQ(numerics::numerical_rank(u * v.transpose()), 1);
  EXPECT_EQ(numerics::numerical_rank(random_matrix(6, 2, 4) * random_matrix(2, 5, 5)), 2);
}

TEST(RealEigenpairs, Diagonal) {
  Matrix d = Matrix::Zero(3, 3);
  d.diagonal() << 1.0, 2.0, 3.0;
  const auto pairs = numerics::real_eigenpairs(d);
  ASSERT_EQ(pairs.size(), 3u);
  std::vector<double> values;
  for (const auto& p : pairs) {
    values.push_back(p.value);
    EXPECT_NEAR(p.vector.norm(), 1.0, 1e-14);
    EXPECT_NEAR(p.vector.cwiseAbs().maxCoeff(), 1.0, 1e-14);
  }
  std::sort(values.begin(), values.end());
  EXPECT_NEAR(values[0], 1.0, 1e-14);
  EXPECT_NEAR(values[2], 3.0, 1e-14);
}

TEST(RealEigenpairs, RotationHasNone) {
  Matrix r(2, 2);
  r << 0, -1, 1, 0;
  EXPECT_TRUE(numerics::real_eigenpairs(r).empty());
}

TEST(RealEigenpairs, CompanionMatrixRoots) {
  // (x - 1)(x - 2)(x + 3) = x^3 - 7x + 6
  Matrix c(3, 3);
  c << 0, 0, -6, 1, 0, 7, 0, 1, 0;
  std::vector<double> values;
  for (const auto& p : numerics::real_eigenpairs(c)) {
    values.push_back(p.value);
    EXPECT_LT((c * p.vector - p.value * p.vector).norm(), 1e-10);
  }
  std::sort(values.begin(), values.end());
  ASSERT_EQ(values.size(), 3u);
  EXPECT_NEAR(values[0], -3.0, 1e-10);
  EXPECT_NEAR(values[1], 1.0, 1e-10);
  EXPECT_NEAR(values[2], 2.0, 1e-10);
}

TEST(Helpers, VecIsRowMajorAndInverts) {
  Eigen::Matrix3d m;
  m << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  const Vector v = numerics::vec(m);
  for (int i = 0; i < 9; ++i) EXPECT_EQ(v[i], i + 1);
  EXPECT_EQ(numerics::unvec(v), m);
}

TEST(Helpers, SkewAndCofactor) {
  const Eigen::Vector3d t(0.3, -1.2, 2.0), x(1.0, 0.5, -0.7);
  EXPECT_LT((numerics::skew(t) * x - t.cross(x)).norm(), 1e-15);
  EXPECT_EQ(numerics::cofactor(Eigen::Matrix3d::Identity()), Eigen::Matrix3d::Identity());
  Eigen::Matrix3d m;
  m << 2, -1, 0.5, 0.3, 1, 4, -2, 0.1, 1.5;
  // cofactor^T = det * inverse
  EXPECT_LT((numerics::cofactor(m).transpose() - m.determinant() * m.inverse()).norm(), 1e-12);
}

TEST(Helpers, RequireFinite) {
  Matrix m = Matrix::Ones(2, 2);
  EXPECT_NO_THROW(numerics::require_finite(m, "m"));
  m(1, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    numerics::require_finite(m, "m");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
  }
}
