#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <utility>

#include "minbackprop/solvers.hpp"

namespace minbackprop::synthetic {

using Rng = std::mt19937_64;

/// Uniform over SO(3): normalised Gaussian quaternion.
inline Matrix3d random_rotation(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline Vector3d random_unit_vector(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vector3d v;
  do {
    v = Vector3d(n(rng), n(rng), n(rng));
  } while (v.norm() < 1e-12);
  return v.normalized();
}

inline double rotation_angle(const Matrix3d& r) {
  return std::acos(std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0));
}

struct Intrinsics {
  double focal = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  Matrix3d matrix() const {
    Matrix3d k;
    k << focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0;
    return k;
  }
};

struct SceneConfig {
  Index n_points = 15;
  double noise_sigma = 0.0;  // image units
  Index n_outliers = 0;
  double depth_min = 4.0;
  double depth_max = 8.0;
  double max_rotation_angle = 0.5;  // radians between the two views
  double field_of_view = 0.5;       // lateral extent / depth
  std::optional<Intrinsics> intrinsics;
  std::uint64_t seed = 0;

  void validate() const {
    require(n_points >= 1, ErrorCode::kInvalidArgument, "n_points must be positive");
    require(n_outliers >= 0 && n_outliers < n_points, ErrorCode::kInvalidArgument, "need n_outliers < n_points");
    require(noise_sigma >= 0.0, ErrorCode::kInvalidArgument, "noise_sigma must be non-negative");
    require(depth_min > 0.0 && depth_max >= depth_min, ErrorCode::kInvalidArgument, "bad depth range");
  }
};

/// Two calibrated views of a random scene. Outliers replace the second-view
/// point of the first `n_outliers` matches by a uniform draw over the
/// bounding box of the inlier projections.
inline EpipolarInstance make_two_view(const SceneConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const Vector3d axis = random_unit_vector(rng);
  const double angle = config.max_rotation_angle * unit(rng);
  const Matrix3d r = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  const Vector3d t = random_unit_vector(rng);
  const Matrix3d k = config.intrinsics ? config.intrinsics->matrix() : Matrix3d::Identity();
  const double noise = config.noise_sigma;

  EpipolarInstance inst;
  inst.rotation = r;
  inst.translation = t;
  inst.intrinsics = k;
  Matrix3d e = numerics::skew(t) * r;
  inst.e_gt = e / e.norm();
  if (config.intrinsics) {
    const Matrix3d kinv = k.inverse();
    const Matrix3d f = kinv.transpose() * inst.e_gt * kinv;
    inst.f_true = f / f.norm();
  } else {
    inst.f_true = inst.e_gt;
  }

  const Index n = config.n_points;
  inst.matches.reserve(n);
  for (Index i = 0; i < n; ++i) {
    Vector3d x1, x2;
    do {
      const double z = config.depth_min + (config.depth_max - config.depth_min) * unit(rng);
      const double half = config.field_of_view * z;
      x1 = Vector3d((2.0 * unit(rng) - 1.0) * half, (2.0 * unit(rng) - 1.0) * half, z);
      x2 = r * x1 + t;
    } while (x2.z() < 0.25 * config.depth_min);
    Vector3d q = k * (x1 / x1.z());
    Vector3d qt = k * (x2 / x2.z());
    if (noise > 0.0) {
      q.head<2>() += noise * Eigen::Vector2d(gauss(rng), gauss(rng));
      qt.head<2>() += noise * Eigen::Vector2d(gauss(rng), gauss(rng));
    }
    inst.matches.push_back(make_match(q, qt));
  }

  inst.inlier.assign(n, true);
  if (config.n_outliers > 0) {
    Eigen::Vector2d lo = inst.matches[0].q_tilde.head<2>();
    Eigen::Vector2d hi = lo;
    for (const auto& m : inst.matches) {
      lo = lo.cwiseMin(m.q_tilde.head<2>());
      hi = hi.cwiseMax(m.q_tilde.head<2>());
    }
    for (Index i = 0; i < config.n_outliers; ++i) {
      const Vector3d qt(lo.x() + (hi.x() - lo.x()) * unit(rng), lo.y() + (hi.y() - lo.y()) * unit(rng), 1.0);
      inst.matches[i].q_tilde = qt;
      inst.inlier[i] = false;
    }
  }
  inst.weights = Vector::Constant(n, 1.0 / static_cast<double>(n));
  return inst;
}

/// Fifteen matches in pixel coordinates with one outlier. The pixel scale
/// keeps |dJ/dw| small enough for the large step size of the fundamental
/// toy.
inline SceneConfig fundamental_toy_config(std::uint64_t seed) {
  SceneConfig config;
  config.n_points = 15;
  config.n_outliers = 1;
  config.depth_min = 4.0;
  config.depth_max = 12.0;
  config.max_rotation_angle = 1.0;
  config.field_of_view = 0.3;
  config.intrinsics = Intrinsics{600.0, 600.0, 600.0};
  config.seed = seed;
  return config;
}

/// Noiseless five-match sample (calibrated coordinates) plus its geometry.
inline EpipolarInstance make_minimal_sample(std::uint64_t seed) {
  SceneConfig config;
  config.n_points = 5;
  config.seed = seed;
  return make_two_view(config);
}

struct RegistrationToyConfig {
  Index n_points = 4;
  double corruption = 1.0;  // length of the offset applied to q_1
  std::uint64_t seed = 0;
};

/// Random points in [-1, 1]^3, R_true = I, q_1 = p_1 + offset, w = 1/N.
inline RegistrationInstance make_registration_toy(const RegistrationToyConfig& config) {
  require(config.n_points >= 3, ErrorCode::kInvalidArgument, "registration toy needs at least 3 points");
  Rng rng(config.seed);
  std::uniform_real_distribution<double> coord(-1.0, 1.0);
  RegistrationInstance inst;
  for (Index i = 0; i < config.n_points; ++i) {
    const Vector3d p(coord(rng), coord(rng), coord(rng));
    inst.p.push_back(p);
    inst.q.push_back(p);
  }
  inst.q[0] += config.corruption * Vector3d(1.0, -1.0, 1.0).normalized();
  inst.w = Vector::Constant(config.n_points, 1.0 / static_cast<double>(config.n_points));
  inst.r_true = Matrix3d::Identity();
  return inst;
}

/// Rotated, optionally noisy point sets with random positive weights.
inline RegistrationInstance make_registration(Index n, double noise, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> coord(-1.0, 1.0);
  std::uniform_real_distribution<double> weight(0.2, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  RegistrationInstance inst;
  const Matrix3d r = random_rotation(rng);
  inst.w.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Vector3d p(coord(rng), coord(rng), coord(rng));
    inst.p.push_back(p);
    inst.q.push_back(r * p + noise * Vector3d(gauss(rng), gauss(rng), gauss(rng)));
    inst.w[i] = weight(rng);
  }
  inst.r_true = r;
  return inst;
}

/// Camera at the origin looking down +z; three scene points at random
/// depths with directions normalised to unit third coordinate. Returns the
/// instance and the true depths.
inline std::pair<P3pInstance, Vector3d> make_p3p(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  P3pInstance inst;
  Vector3d depths;
  for (;;) {
    for (int i = 0; i < 3; ++i) {
      const double z = 2.0 + 4.0 * unit(rng);
      const Vector3d cam((2.0 * unit(rng) - 1.0) * 0.6 * z, (2.0 * unit(rng) - 1.0) * 0.6 * z, z);
      inst.directions[i] = cam / z;
      depths[i] = z;
      inst.points[i] = cam;
    }
    const double area = (inst.points[1] - inst.points[0]).cross(inst.points[2] - inst.points[0]).norm();
    if (area > 0.5) break;
  }
  // Express the scene in a random world frame; distances are unchanged.
  const Matrix3d r = random_rotation(rng);
  const Vector3d t(2.0 * unit(rng) - 1.0, 2.0 * unit(rng) - 1.0, 2.0 * unit(rng) - 1.0);
  for (auto& p : inst.points) p = r * p + t;
  return {inst, depths};
}

}  // namespace minbackprop::synthetic
