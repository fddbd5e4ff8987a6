#include <random>

#include <gtest/gtest.h>

#include "minbackprop/synthetic.hpp"
#include "minbackprop/systems.hpp"

using namespace minbackprop;

namespace {

ift::ConstraintSystem scalar_system(std::function<double(double, double)> h, std::function<double(double, double)> hx,
                                    std::function<double(double, double)> ha) {
  ift::ConstraintSystem sys;
  sys.n_x = sys.n_a = sys.n_eq = 1;
  sys.eval = [h](const Vector& x, const Vector& a) { return Vector::Constant(1, h(x[0], a[0])); };
  sys.jac_x = [hx](const Vector& x, const Vector& a) { return Matrix::Constant(1, 1, hx(x[0], a[0])); };
  sys.jac_a = [ha](const Vector& x, const Vector& a) { return Matrix::Constant(1, 1, ha(x[0], a[0])); };
  return sys;
}

Vector v1(double x) { return Vector::Constant(1, x); }

}  // namespace

TEST(IftJacobian, IdentitySystem) {
  const auto sys = scalar_system([](double x, double a) { return x - a; }, [](double, double) { return 1.0; },
                                 [](double, double) { return -1.0; });
  const auto sol = ift::ift_jacobian(sys, v1(5), v1(5));
  EXPECT_NEAR(sol.dxda(0, 0), 1.0, 1e-15);
  EXPECT_EQ(sol.method, ift::IftMethod::kSquareInverse);
  EXPECT_TRUE(sol.full_rank());
}

TEST(IftJacobian, SquareRoot) {
  const auto sys = scalar_system([](double x, double a) { return x * x - a; },
                                 [](double x, double) { return 2.0 * x; }, [](double, double) { return -1.0; });
  EXPECT_NEAR(ift::ift_jacobian(sys, v1(2), v1(4)).dxda(0, 0), 0.25, 1e-15);
}

TEST(IftJacobian, NotARoot) {
  const auto sys = scalar_system([](double x, double a) { return x * x - a; },
                                 [](double x, double) { return 2.0 * x; }, [](double, double) { return -1.0; });
  try {
    ift::ift_jacobian(sys, v1(2), v1(4.01));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotARoot);
  }
}

TEST(IftJacobian, RankDeficientUsesPseudoinverse) {
  // h = x^2 - a at x = 0, a = 0: J_x = 0.
  const auto sys = scalar_system([](double x, double a) { return x * x - a; },
                                 [](double x, double) { return 2.0 * x; }, [](double, double) { return -1.0; });
  const auto sol = ift::ift_jacobian(sys, v1(0), v1(0));
  EXPECT_EQ(sol.rank_jx, 0);
  EXPECT_FALSE(sol.full_rank());
  EXPECT_EQ(sol.method, ift::IftMethod::kPseudoinverse);
  EXPECT_EQ(sol.dxda(0, 0), 0.0);
}

TEST(IftJacobian, ForcedPseudoinverseMatchesInverse) {
  const auto sys = systems::p3p_system();
  const auto [inst, depths] = synthetic::make_p3p(41);
  const auto a = ift::ift_jacobian(sys, depths, inst.packed());
  const auto b = ift::ift_jacobian(sys, depths, inst.packed(), -1.0, ift::IftPreference::kForcePseudoinverse);
  EXPECT_EQ(b.method, ift::IftMethod::kPseudoinverse);
  EXPECT_LT((a.dxda - b.dxda).norm(), 1e-10 * a.dxda.norm());
}

TEST(IftJacobian, DimensionMismatch) {
  const auto sys = systems::p3p_system();
  try {
    ift::ift_jacobian(sys, Vector::Ones(2), Vector::Ones(18));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
}

// Worked example: three points seen at depth 3 each.
TEST(IftJacobian, ExampleOneJacobians) {
  Vector b(18);
  b << 0, 0, 3, 2, 0, 3, 0, 6, 3, -1.0 / 3, -1.0 / 3, 1, 1.0 / 3, -1.0 / 3, 1, -1.0 / 3, 5.0 / 3, 1;
  const Vector x = Vector3d(3, 3, 3);
  const auto sys = systems::p3p_system();
  EXPECT_LT(sys.eval(x, b).norm(), 1e-10);

  Matrix jx_printed(3, 3);
  jx_printed << -1.33, -1.33, 0, 0, -5.33, -21.33, -4, 0, -20;
  EXPECT_LT((sys.jac_x(x, b) - jx_printed).cwiseAbs().maxCoeff(), 5e-3);

  const Matrix ja = sys.jac_a(x, b);
  const int cols[9] = {0, 1, 2, 3, 4, 5, 15, 16, 17};
  const double printed[3][9] = {{-4, 0, 0, 4, 0, 0, 0, 0, 0}, {0, 0, 0, 4, -12, 0, 12, -36, 0},
                                {0, -12, 0, 0, 0, 0, 0, -36, 0}};
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(ja(r, cols[k]), printed[r][k], 5e-3) << r << "," << cols[k];
  EXPECT_EQ(numerics::numerical_rank(sys.jac_x(x, b)), 3);
}

// Frozen from -J_x^{-1} J_a evaluated in exact arithmetic (J_x has entries in
// thirds); the finite-difference oracle reproduces the same numbers.
TEST(IftJacobian, ExampleOneSolutionJacobian) {
  Vector b(18);
  b << 0, 0, 3, 2, 0, 3, 0, 6, 3, -1.0 / 3, -1.0 / 3, 1, 1.0 / 3, -1.0 / 3, 1, -1.0 / 3, 5.0 / 3, 1;
  const Vector x = Vector3d(3, 3, 3);
  const auto sol = ift::ift_jacobian(systems::p3p_system(), x, b);
  const double expected[3][2] = {{-5.0 / 3, -4.0 / 3}, {-4.0 / 3, 4.0 / 3}, {1.0 / 3, -1.0 / 3}};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(sol.dxda(r, c), expected[r][c], 1e-12);
  EXPECT_NEAR(sol.dxda(0, 15), -1.25, 1e-12);
  EXPECT_NEAR(sol.dxda(2, 16), -1.75, 1e-12);

  Matrix num(3, 18);
  const double h = 1e-6;
  for (int m = 0; m < 18; ++m) {
    Vector bp = b, bm = b;
    bp[m] += h;
    bm[m] -= h;
    auto nearest = [&](const Vector& a) {
      Vector3d best = Vector3d::Zero();
      for (const Vector3d& r : solvers::solve_p3p(P3pInstance::unpack(a)))
        if (best.isZero() || (r - x).norm() < (best - x).norm()) best = r;
      return best;
    };
    num.col(m) = (nearest(bp) - nearest(bm)) / (2 * h);
  }
  EXPECT_LT((sol.dxda - num).norm(), 1e-6);
}

// x(a + t d) - x(a) - t dx/da d = O(t^2): halving t divides the error by 4.
TEST(IftJacobian, QuadraticRootPrediction) {
  const auto sys = systems::p3p_system();
  int checked = 0;
  for (std::uint64_t seed = 21; seed < 41; ++seed) {
    const auto [inst, depths] = synthetic::make_p3p(seed);
    const Vector a = inst.packed();
    // Skip instances with a second root close by: the quartic's roots are
    // then only accurate to about sqrt(eps).
    double separation = 1e300;
    for (const Vector3d& r : solvers::solve_p3p(inst))
      if ((r - depths).norm() > 1e-6) separation = std::min(separation, (r - depths).norm());
    if (separation < 0.5) continue;
    ++checked;
    const Matrix j = ift::ift_jacobian(sys, depths, a).dxda;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Vector d(18);
    for (Index i = 0; i < 18; ++i) d[i] = n(rng);
    d.normalize();
    auto error = [&](double t) {
      double best = 1e300;
      for (const Vector3d& r : solvers::solve_p3p(P3pInstance::unpack(a + t * d)))
        best = std::min(best, (r - depths - t * j * d).norm());
      return best;
    };
    const double t = 0.1 / (1.0 + j.norm());  // stay well inside the basin of the tracked root
    const double e1 = error(4 * t), e2 = error(2 * t), e3 = error(t);
    EXPECT_NEAR(e1 / e2, 4.0, 0.4) << seed;
    EXPECT_NEAR(e2 / e3, 4.0, 0.4) << seed;
  }
  EXPECT_GE(checked, 10);
}

TEST(SelfCheck, LinearSystemExact) {
  const auto sys = scalar_system([](double x, double a) { return 3.0 * x - 2.0 * a; },
                                 [](double, double) { return 3.0; }, [](double, double) { return -2.0; });
  EXPECT_LT(ift::self_check_system(sys, v1(0.7), v1(-1.3)).max_error(), 1e-9);
}

TEST(SelfCheck, WrongJacobianDetected) {
  const auto sys = scalar_system([](double x, double a) { return x * x - a; },
                                 [](double x, double) { return x; }, [](double, double) { return -1.0; });
  EXPECT_GT(ift::self_check_system(sys, v1(2.0), v1(4.0)).max_error(), 0.1);
}

// ---------------------------------------------------------------------------
// Declarative nodes

namespace {

ift::LowLevelLoss distance_loss(Index n) {
  ift::LowLevelLoss f;
  f.n_y = f.n_w = n;
  f.value = [](const Vector& y, const Vector& w) { return (y - w).squaredNorm(); };
  f.grad_y = [](const Vector& y, const Vector& w) { return Vector(2.0 * (y - w)); };
  f.hess_yy = [n](const Vector&, const Vector&) { return Matrix(2.0 * Matrix::Identity(n, n)); };
  f.hess_yw = [n](const Vector&, const Vector&) { return Matrix(-2.0 * Matrix::Identity(n, n)); };
  return f;
}

ift::EqualityConstraints pin_to_one() {
  ift::EqualityConstraints h;
  h.n_y = 1;
  h.n_h = 1;
  h.value = [](const Vector& y) { return Vector::Constant(1, y[0] - 1.0); };
  h.jacobian = [](const Vector&) { return Matrix::Ones(1, 1); };
  h.hessian_sum = [](const Vector&, const Vector&) { return Matrix::Zero(1, 1).eval(); };
  return h;
}

}  // namespace

TEST(Kkt, UnconstrainedDistanceGivesIdentity) {
  const auto kkt = ift::build_kkt(distance_loss(4), ift::EqualityConstraints::none(4));
  const Vector w = Vector::LinSpaced(4, -1.0, 2.0);
  EXPECT_EQ(kkt.n_lambda, 0);
  EXPECT_EQ(ift::recover_multipliers(kkt, w, w).size(), 0);
  const auto sol = ift::ift_jacobian(kkt.base, w, w);
  EXPECT_LT((sol.dxda - Matrix::Identity(4, 4)).norm(), 1e-14);
}

TEST(Kkt, UnconstrainedResidualIsGradientNorm) {
  const auto kkt = ift::build_kkt(distance_loss(3), ift::EqualityConstraints::none(3));
  const Vector y = Vector3d(1, 2, 3), w = Vector3d(0, 0, 0);
  EXPECT_NEAR(ift::kkt_residual(kkt, y, Vector(0), w), (2.0 * y).norm(), 1e-14);
}

TEST(Kkt, ConstraintPinsSolution) {
  ift::LowLevelLoss f;
  f.n_y = f.n_w = 1;
  f.value = [](const Vector& y, const Vector& w) { return w[0] * y[0] * y[0]; };
  f.grad_y = [](const Vector& y, const Vector& w) { return Vector::Constant(1, 2.0 * w[0] * y[0]); };
  f.hess_yy = [](const Vector&, const Vector& w) { return Matrix::Constant(1, 1, 2.0 * w[0]); };
  f.hess_yw = [](const Vector& y, const Vector&) { return Matrix::Constant(1, 1, 2.0 * y[0]); };
  const auto kkt = ift::build_kkt(f, pin_to_one());
  const Vector y = v1(1.0), w = v1(0.7);
  const Vector lambda = ift::recover_multipliers(kkt, y, w);
  EXPECT_NEAR(lambda[0], -1.4, 1e-14);
  const auto sol = ift::ift_jacobian(kkt.base, kkt.pack(y, lambda), w);
  EXPECT_NEAR(sol.dxda(0, 0), 0.0, 1e-14);
}

TEST(Kkt, MultiplierByHand) {
  // f = (y - 2)^2, h = y - 1, at y = 1: lambda = -df/dy = 2.
  const auto kkt = ift::build_kkt(distance_loss(1), pin_to_one());
  const Vector lambda = ift::recover_multipliers(kkt, v1(1.0), v1(2.0));
  EXPECT_NEAR(lambda[0], 2.0, 1e-14);
  EXPECT_NEAR(ift::kkt_residual(kkt, v1(1.0), lambda, v1(2.0)), 0.0, 1e-14);
}

TEST(Kkt, MismatchedSizesRejected) {
  try {
    ift::build_kkt(distance_loss(3), pin_to_one());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
}

TEST(Kkt, RegistrationNodeShape) {
  const auto inst = synthetic::make_registration(6, 0.05, 3);
  const auto losses = systems::registration_losses(inst);
  const auto kkt = ift::build_kkt(losses.f, losses.h);
  EXPECT_EQ(kkt.base.n_x, 15);
  EXPECT_EQ(kkt.base.n_eq, 15);
  EXPECT_EQ(kkt.base.n_a, 6);
}
