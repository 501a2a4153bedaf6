#include "d3ga/gauss.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <random>

using namespace d3ga;

namespace {

void expect_mat_near(const Mat3& a, const Mat3& b, double tol) {
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), tol) << "\n" << a << "\nvs\n" << b;
}

Vec4 random_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return Vec4(n(rng), n(rng), n(rng), n(rng)).normalized();
}

} // namespace

TEST(ComposeCovariance, IdentityRotationUnitScale) {
  expect_mat_near(compose_covariance(quat_identity(), Vec3(1, 1, 1)).matrix(), Mat3::Identity(), 1e-15);
}

TEST(ComposeCovariance, AxisAlignedScaleSquares) {
  expect_mat_near(compose_covariance(quat_identity(), Vec3(2, 1, 1)).matrix(), Vec3(4, 1, 1).asDiagonal().toDenseMatrix(),
                  1e-15);
}

TEST(ComposeCovariance, QuarterTurnAboutZ) {
  const Vec4 q = quat_from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2);
  Mat3 r;
  r << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 oracle = r * Vec3(4, 1, 1).asDiagonal() * r.transpose();
  expect_mat_near(compose_covariance(q, Vec3(2, 1, 1)).matrix(), oracle, 1e-12);
  expect_mat_near(oracle, Vec3(1, 4, 1).asDiagonal().toDenseMatrix(), 1e-15);
}

TEST(ComposeCovariance, SymmetricPositiveDefinite) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 3.0);
  for (int k = 0; k < 200; ++k) {
    const Mat3 m = compose_covariance(random_quat(rng), Vec3(u(rng), u(rng), u(rng))).matrix();
    EXPECT_EQ(m, m.transpose());
    Eigen::SelfAdjointEigenSolver<Mat3> es(m);
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
  }
}

TEST(ComposeCovariance, EigenvaluesAreSquaredScales) {
  std::mt19937_64 rng(2);
  const Vec3 s(0.3, 1.1, 2.0);
  Eigen::SelfAdjointEigenSolver<Mat3> es(compose_covariance(random_quat(rng), s).matrix());
  EXPECT_NEAR(es.eigenvalues()[0], 0.09, 1e-12);
  EXPECT_NEAR(es.eigenvalues()[1], 1.21, 1e-12);
  EXPECT_NEAR(es.eigenvalues()[2], 4.0, 1e-12);
}

TEST(ComposeCovariance, QuaternionSignInvariant) {
  std::mt19937_64 rng(3);
  const Vec4 q = random_quat(rng);
  expect_mat_near(compose_covariance(q, Vec3(1, 2, 3)).matrix(), compose_covariance(-q, Vec3(1, 2, 3)).matrix(), 1e-14);
}

TEST(GaussianDensity, PeakIsOne) {
  EXPECT_DOUBLE_EQ(gaussian_density(Vec3(1, 2, 3), Vec3(1, 2, 3), Covariance3::identity()), 1.0);
}

TEST(GaussianDensity, UnitDistance) {
  EXPECT_NEAR(gaussian_density(Vec3(0, 1, 0), Vec3::Zero(), Covariance3::identity()), std::exp(-0.5), 1e-15);
  EXPECT_NEAR(std::exp(-0.5), 0.6065, 1e-4);
}

TEST(GaussianDensity, AnisotropicQuadraticForm) {
  const auto cov = Covariance3::from_matrix(Vec3(4, 1, 1).asDiagonal());
  // (2,0,0) · diag(1/4,1,1) · (2,0,0) = 1
  EXPECT_NEAR(gaussian_density(Vec3(2, 0, 0), Vec3::Zero(), cov), std::exp(-0.5), 1e-15);
}

TEST(GaussianDensity, BoundedAndSymmetric) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  const auto cov = compose_covariance(random_quat(rng), Vec3(0.5, 1.0, 1.5));
  for (int k = 0; k < 100; ++k) {
    const Vec3 d(n(rng), n(rng), n(rng));
    const double g = gaussian_density(d, Vec3::Zero(), cov);
    EXPECT_GT(g, 0.0);
    EXPECT_LE(g, 1.0);
    EXPECT_DOUBLE_EQ(g, gaussian_density(-d, Vec3::Zero(), cov));
  }
}

TEST(TransformCovariance, IdentityMap) {
  const auto cov = Covariance3::from_matrix((Mat3() << 2, 0.3, 0.1, 0.3, 1, 0.2, 0.1, 0.2, 3).finished());
  expect_mat_near(transform_covariance(cov, Mat3::Identity()).matrix(), cov.matrix(), 1e-15);
}

TEST(TransformCovariance, RotationOfIdentity) {
  std::mt19937_64 rng(5);
  expect_mat_near(transform_covariance(Covariance3::identity(), quat_to_rotation(random_quat(rng))).matrix(),
                  Mat3::Identity(), 1e-14);
}

TEST(TransformCovariance, StretchX) {
  expect_mat_near(transform_covariance(Covariance3::identity(), Vec3(2, 1, 1).asDiagonal().toDenseMatrix()).matrix(),
                  Vec3(4, 1, 1).asDiagonal().toDenseMatrix(), 1e-15);
}

TEST(TransformCovariance, ComposesLikeMatrices) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1, 1);
  Mat3 a, b;
  for (int i = 0; i < 9; ++i) {
    a.data()[i] = u(rng);
    b.data()[i] = u(rng);
  }
  const auto cov = compose_covariance(random_quat(rng), Vec3(0.4, 0.9, 1.3));
  expect_mat_near(transform_covariance(transform_covariance(cov, a), b).matrix(),
                  transform_covariance(cov, b * a).matrix(), 1e-12);
}

TEST(CovariancePacking, GradientConventionRoundTrip) {
  Mat3 g;
  g << 1, 2, 3, 2, 5, 6, 3, 6, 9;
  const Covariance3 packed = cov_grad_from_full(g);
  EXPECT_EQ(packed[1], 4.0);
  expect_mat_near(cov_grad_to_full(packed), g, 1e-15);
}
