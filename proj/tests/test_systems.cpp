#include <random>

#include <gtest/gtest.h>

#include "minbackprop/synthetic.hpp"
#include "minbackprop/systems.hpp"

using namespace minbackprop;

namespace {

Vector random_vector(Index n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

Matrix3d random_rotation(std::mt19937_64& rng) { return synthetic::random_rotation(rng); }

// Central differences of a matrix-valued upper loss against its gradient.
double loss_gradient_error(const systems::UpperLoss& j, const Matrix3d& m) {
  const Matrix3d g = j.grad(m);
  double worst = 0.0;
  const double h = 1e-6;
  for (int k = 0; k < 9; ++k) {
    Matrix3d p = m, q = m;
    p(k / 3, k % 3) += h;
    q(k / 3, k % 3) -= h;
    const double fd = (j.eval(p) - j.eval(q)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g(k / 3, k % 3)) / (1.0 + std::abs(fd)));
  }
  return worst;
}

// Jacobian and multiplier-weighted Hessian of a constraint family vs FD.
double constraint_error(const ift::EqualityConstraints& h, const Vector& y, const Vector& lambda) {
  const double step = 1e-6;
  const Matrix jac = h.jacobian(y);
  const Matrix hs = h.hessian_sum(y, lambda);
  double worst = 0.0;
  for (Index k = 0; k < y.size(); ++k) {
    Vector p = y, m = y;
    p[k] += step;
    m[k] -= step;
    const Vector dv = (h.value(p) - h.value(m)) / (2 * step);
    const Vector dj = (h.jacobian(p).transpose() * lambda - h.jacobian(m).transpose() * lambda) / (2 * step);
    for (Index i = 0; i < dv.size(); ++i) worst = std::max(worst, std::abs(dv[i] - jac(i, k)) / (1 + std::abs(dv[i])));
    for (Index i = 0; i < dj.size(); ++i) worst = std::max(worst, std::abs(dj[i] - hs(i, k)) / (1 + std::abs(dj[i])));
  }
  return worst;
}

// Matches on the variety of E = diag(1, 1, 0) / sqrt(2): q~ = (q1, -q0, 1).
std::vector<Match> canonical_matches(std::mt19937_64& rng) {
  std::vector<Match> out;
  for (int i = 0; i < 5; ++i) {
    const Vector v = random_vector(2, rng);
    out.push_back(make_match(Vector3d(v[0], v[1], 1), Vector3d(v[1], -v[0], 1)));
  }
  return out;
}

}  // namespace

TEST(P3pSystem, ExampleOneRoot) {
  Vector b(18);
  b << 0, 0, 3, 2, 0, 3, 0, 6, 3, -1.0 / 3, -1.0 / 3, 1, 1.0 / 3, -1.0 / 3, 1, -1.0 / 3, 5.0 / 3, 1;
  const auto sys = systems::p3p_system();
  EXPECT_LT(sys.eval(Vector3d(3, 3, 3), b).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix ja = sys.jac_a(Vector3d(3, 3, 3), b);
  Eigen::RowVectorXd first(18);
  first << -4, 0, 0, 4, 0, 0, 0, 0, 0, 12, 0, 0, -12, 0, 0, 0, 0, 0;
  EXPECT_LT((ja.row(0) - first).cwiseAbs().maxCoeff(), 5e-3);
}

TEST(EssentialSystem, CanonicalMatrix) {
  std::mt19937_64 rng(5);
  const auto sample = canonical_matches(rng);
  Matrix3d e = Matrix3d::Zero();
  e(0, 0) = e(1, 1) = 1.0 / std::sqrt(2.0);
  const Vector r = solvers::essential_residuals(e, sample);
  EXPECT_EQ(r.size(), 15);
  EXPECT_LT(r.cwiseAbs().maxCoeff(), 1e-12);
  const auto sys = systems::essential_system();
  EXPECT_LT(sys.eval(numerics::vec(e), systems::pack_sample(sample)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EssentialSystem, NormRowAtUnitMatrix) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 10; ++i) {
    Matrix3d e = numerics::unvec(random_vector(9, rng));
    e /= e.norm();
    EXPECT_NEAR(solvers::essential_residuals(e, canonical_matches(rng))[5], 0.0, 1e-14);
  }
}

TEST(EssentialSystem, PackRoundTrip) {
  const auto inst = synthetic::make_minimal_sample(3);
  const auto back = systems::unpack_sample(systems::pack_sample(inst.matches));
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(back[i].q, inst.matches[i].q);
    EXPECT_EQ(back[i].q_tilde, inst.matches[i].q_tilde);
  }
}

TEST(EssentialSystem, SelfCheckAtRoot) {
  const auto inst = synthetic::make_minimal_sample(17);
  const auto set = solvers::solve_essential_5pt(inst.matches);
  const auto sys = systems::essential_system();
  for (const auto& e : set.candidates) {
    EXPECT_LT(ift::self_check_system(sys, numerics::vec(e), systems::pack_sample(inst.matches)).max_error(), 1e-5);
  }
}

// Every analytic Jacobian against central differences at 100 points.
TEST(SelfCheck, AllSystemsHundredPoints) {
  std::mt19937_64 rng(2024);
  const auto p3p = systems::p3p_system();
  const auto ess = systems::essential_system();
  const auto reg_inst = synthetic::make_registration(6, 0.1, 8);
  const auto reg = systems::registration_losses(reg_inst);
  const auto reg_kkt = ift::build_kkt(reg.f, reg.h);
  synthetic::SceneConfig c;
  c.n_outliers = 2;
  c.noise_sigma = 0.01;
  const auto two_view = synthetic::make_two_view(c);
  const auto fun_kkt = ift::build_kkt(systems::weighted_algebraic_loss(two_view), systems::rank2_unit_constraints());
  const auto stage1 = ift::build_kkt(systems::weighted_algebraic_loss(two_view), systems::unit_norm_constraint(9));
  const auto stage2 = ift::build_kkt(systems::nearest_matrix_loss(), systems::rank2_unit_constraints());

  const std::vector<std::pair<const char*, const ift::ConstraintSystem*>> all = {
      {"p3p", &p3p},           {"essential", &ess},    {"registration-kkt", &reg_kkt.base},
      {"fundamental-kkt", &fun_kkt.base}, {"unit-norm-kkt", &stage1.base}, {"nearest-rank2-kkt", &stage2.base}};
  for (const auto& [name, sys] : all) {
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      const Vector x = random_vector(sys->n_x, rng);
      Vector a = random_vector(sys->n_a, rng);
      if (sys->n_a == two_view.size()) a = a.cwiseAbs();
      worst = std::max(worst, ift::self_check_system(*sys, x, a).max_error());
    }
    EXPECT_LT(worst, 1e-5) << name;
  }
}

TEST(Reduction, GenericRootFirstTry) {
  const auto inst = synthetic::make_minimal_sample(17);
  const auto set = solvers::solve_essential_5pt(inst.matches);
  const auto sel = solvers::select_closest(std::span<const Matrix3d>(set.candidates), inst.e_gt);
  const auto sys = systems::essential_system();
  std::mt19937_64 rng(17);
  const auto red =
      systems::reduce_essential_jacobian(sys.jac_x(numerics::vec(sel.model), systems::pack_sample(inst.matches)), rng, 5);
  EXPECT_EQ(red.attempts, 1);
  EXPECT_EQ(numerics::numerical_rank(red.jx), 9);
  EXPECT_EQ(numerics::numerical_rank(sys.jac_x(numerics::vec(sel.model), systems::pack_sample(inst.matches))), 9);
}

TEST(Reduction, DegenerateCombinationsRetried) {
  const auto inst = synthetic::make_minimal_sample(17);
  const auto set = solvers::solve_essential_5pt(inst.matches);
  const auto sys = systems::essential_system();
  const Matrix jx = sys.jac_x(numerics::vec(set.candidates[0]), systems::pack_sample(inst.matches));

  int calls = 0;
  systems::ComboSource zero = [&] {
    ++calls;
    return Matrix(Matrix::Zero(3, 9));
  };
  EXPECT_LE(numerics::numerical_rank(systems::apply_reduction(jx, zero())), 6);
  calls = 0;
  try {
    systems::reduce_essential_jacobian(jx, zero, 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRankDeficient);
  }
  EXPECT_EQ(calls, 6);

  std::mt19937_64 rng(1);
  const Vector row = random_vector(9, rng);
  calls = 0;
  systems::ComboSource repeated = [&] {
    ++calls;
    Matrix c(3, 9);
    for (int i = 0; i < 3; ++i) c.row(i) = row.transpose();
    return c;
  };
  EXPECT_LE(numerics::numerical_rank(systems::apply_reduction(jx, repeated())), 7);

  // A bad first draw followed by a good one succeeds on the second attempt.
  calls = 0;
  auto good = systems::uniform_combo_source(rng);
  systems::ComboSource recovering = [&] { return calls++ == 0 ? Matrix(Matrix::Zero(3, 9)) : good(); };
  EXPECT_EQ(systems::reduce_essential_jacobian(jx, recovering, 5).attempts, 2);
}

TEST(UpperLoss, Geodesic) {
  const auto j = systems::rotation_geodesic_loss(Matrix3d::Identity());
  EXPECT_NEAR(j.eval(Matrix3d::Identity()), 0.0, 1e-15);
  std::mt19937_64 rng(3);
  for (double theta : {0.1, 0.7, 1.5, 2.9}) {
    const Vector3d axis = synthetic::random_unit_vector(rng);
    EXPECT_NEAR(j.eval(Eigen::AngleAxisd(theta, axis).toRotationMatrix()), theta, 1e-12);
  }
  const auto jr = systems::rotation_geodesic_loss(random_rotation(rng));
  for (int i = 0; i < 10; ++i) EXPECT_LT(loss_gradient_error(jr, random_rotation(rng)), 1e-6);
  EXPECT_TRUE(j.grad(Matrix3d::Identity()).allFinite());
}

TEST(UpperLoss, FrobeniusToGroundTruth) {
  std::mt19937_64 rng(4);
  Matrix3d ft = numerics::unvec(random_vector(9, rng));
  ft /= ft.norm();
  const auto j = systems::frobenius_to_gt_loss(ft);
  EXPECT_EQ(j.eval(ft), 0.0);
  EXPECT_EQ(j.eval(-ft), 0.0);
  for (int i = 0; i < 10; ++i) EXPECT_LT(loss_gradient_error(j, numerics::unvec(random_vector(9, rng))), 1e-6);
}

TEST(UpperLoss, SymmetricEpipolar) {
  synthetic::SceneConfig c;
  c.seed = 23;
  const auto inst = synthetic::make_two_view(c);
  std::vector<Index> inliers(inst.size());
  for (Index i = 0; i < inst.size(); ++i) inliers[i] = i;
  const auto j = systems::symmetric_epipolar_loss(inst.matches, inliers);
  EXPECT_LT(j.eval(inst.e_gt), 1e-20);
  std::mt19937_64 rng(23);
  const Matrix3d e = numerics::unvec(random_vector(9, rng));
  EXPECT_EQ(j.eval(e), j.eval(-e));
  EXPECT_LT(loss_gradient_error(j, e), 1e-5);
  try {
    systems::epipolar_upper_loss(Matrix3d::Zero(), inst.matches, inliers);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::kDegenerateLine);
  }
}

TEST(Constraints, RankTwoUnit) {
  const auto h = systems::rank2_unit_constraints();
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto s = numerics::svd(numerics::unvec(random_vector(9, rng)));
    Matrix3d f = s.u.leftCols<2>() * s.sigma.head<2>().asDiagonal() * s.v.leftCols<2>().transpose();
    f /= f.norm();
    EXPECT_LT(h.value(numerics::vec(f)).cwiseAbs().maxCoeff(), 1e-10);
  }
  const Matrix jac = h.jacobian(numerics::vec(Matrix3d::Identity()));
  EXPECT_EQ(numerics::unvec(jac.row(0).transpose()), Matrix3d::Identity());
}

TEST(Constraints, DerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  const std::vector<ift::EqualityConstraints> families = {systems::orthogonality_constraints(),
                                                          systems::rank2_unit_constraints(),
                                                          systems::unit_norm_constraint(9)};
  for (const auto& h : families) {
    for (int i = 0; i < 20; ++i) {
      EXPECT_LT(constraint_error(h, random_vector(9, rng), random_vector(h.n_h, rng)), 1e-6);
    }
  }
}

TEST(RegistrationNode, KktResidualAtKabschOptimum) {
  const auto inst = synthetic::make_registration_toy({4, 1.0, 3});
  const auto losses = systems::registration_losses(inst);
  const auto kkt = ift::build_kkt(losses.f, losses.h);
  const Vector y = numerics::vec(solvers::solve_kabsch(inst));
  const Vector lambda = ift::recover_multipliers(kkt, y, inst.w);
  EXPECT_LT(ift::kkt_residual(kkt, y, lambda, inst.w), 1e-8);
}

TEST(RegistrationNode, KabschIsLocalMinimum) {
  const auto inst = synthetic::make_registration(7, 0.2, 19);
  const auto losses = systems::registration_losses(inst);
  const Matrix3d r = solvers::solve_kabsch(inst);
  const double f0 = losses.f.value(numerics::vec(r), inst.w);
  std::mt19937_64 rng(19);
  for (int i = 0; i < 50; ++i) {
    const Matrix3d d = Eigen::AngleAxisd(0.05, synthetic::random_unit_vector(rng)).toRotationMatrix();
    EXPECT_LE(f0, losses.f.value(numerics::vec(d * r), inst.w));
  }
}

TEST(WeightedAlgebraicLoss, GradientAndHessian) {
  synthetic::SceneConfig c;
  c.noise_sigma = 0.01;
  const auto inst = synthetic::make_two_view(c);
  const auto f = systems::weighted_algebraic_loss(inst);
  std::mt19937_64 rng(10);
  const Vector y = random_vector(9, rng);
  const Vector w = random_vector(inst.size(), rng).cwiseAbs();
  const double h = 1e-6;
  for (Index k = 0; k < 9; ++k) {
    Vector p = y, m = y;
    p[k] += h;
    m[k] -= h;
    EXPECT_NEAR((f.value(p, w) - f.value(m, w)) / (2 * h), f.grad_y(y, w)[k], 1e-7);
  }
  EXPECT_LT((f.hess_yy(y, w) - f.hess_yy(y, w).transpose()).norm(), 1e-14);
}
