#pragma once

// Gaussian primitive algebra: covariance composition from rotation/scale,
// unnormalized density, and covariance transfer through a linear map.
// Each forward has a matching *_backward taking dL/d(output).

#include "d3ga/common.hpp"

#include <array>

namespace d3ga {

/// Symmetric 3x3 matrix stored as its upper triangle (xx, xy, xz, yy, yz, zz).
///
/// Gradients with respect to a Covariance3 use the same six slots: the
/// off-diagonal slot receives the sum of both mirrored entries, because
/// perturbing the stored xy scalar moves (0,1) and (1,0) together.
struct Covariance3 {
  std::array<double, 6> v{};

  static Covariance3 from_matrix(const Mat3& m) {
    return {{m(0, 0), 0.5 * (m(0, 1) + m(1, 0)), 0.5 * (m(0, 2) + m(2, 0)), m(1, 1),
             0.5 * (m(1, 2) + m(2, 1)), m(2, 2)}};
  }

  static Covariance3 identity() { return {{1.0, 0.0, 0.0, 1.0, 0.0, 1.0}}; }

  Mat3 matrix() const {
    Mat3 m;
    m << v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5];
    return m;
  }

  double& operator[](int i) { return v[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return v[static_cast<std::size_t>(i)]; }
};

/// Converts a full-matrix gradient G (entries treated independently) into
/// the six-slot convention above.
inline Covariance3 cov_grad_from_full(const Mat3& g) {
  return {{g(0, 0), g(0, 1) + g(1, 0), g(0, 2) + g(2, 0), g(1, 1), g(1, 2) + g(2, 1),
           g(2, 2)}};
}

/// Inverse of cov_grad_from_full: a symmetric full-matrix gradient.
inline Mat3 cov_grad_to_full(const Covariance3& g) {
  Mat3 m;
  m << g[0], 0.5 * g[1], 0.5 * g[2], 0.5 * g[1], g[3], 0.5 * g[4], 0.5 * g[2],
      0.5 * g[4], g[5];
  return m;
}

/// Σ = R diag(s)² Rᵀ.
inline Covariance3 compose_covariance(const Vec4& rotation, const Vec3& scale) {
  const Mat3 r = quat_to_rotation(rotation);
  const Mat3 m = r * scale.array().square().matrix().asDiagonal() * r.transpose();
  return Covariance3::from_matrix(m);
}

struct ComposeCovarianceGrad {
  Vec4 rotation;
  Vec3 scale;
};

inline ComposeCovarianceGrad compose_covariance_backward(const Vec4& rotation,
                                                         const Vec3& scale,
                                                         const Covariance3& grad) {
  const Mat3 r = quat_to_rotation(rotation);
  const Mat3 g = cov_grad_to_full(grad);
  const Vec3 d = scale.array().square();
  // Σ = R D Rᵀ with G symmetric: dR = 2 G R D, dD = diag(Rᵀ G R).
  const Mat3 gr = 2.0 * g * r * d.asDiagonal();
  const Mat3 gd = r.transpose() * g * r;
  ComposeCovarianceGrad out;
  out.rotation = quat_to_rotation_backward(rotation, gr);
  for (int k = 0; k < 3; ++k) out.scale[k] = gd(k, k) * 2.0 * scale[k];
  return out;
}

/// Closed-form inverse of a symmetric 3x3 via the adjugate.
/// Throws NearSingularCovariance when the smallest eigenvalue is below `floor`.
inline Mat3 covariance_inverse(const Covariance3& cov, double floor = 1e-12) {
  const Mat3 m = cov.matrix();
  Eigen::SelfAdjointEigenSolver<Mat3> es;
  es.computeDirect(m, Eigen::EigenvaluesOnly);
  if (!(es.eigenvalues().minCoeff() >= floor))
    throw NearSingularCovariance("smallest eigenvalue " +
                                 std::to_string(es.eigenvalues().minCoeff()));
  const double a = m(0, 0), b = m(0, 1), c = m(0, 2), d = m(1, 1), e = m(1, 2), f = m(2, 2);
  const double c00 = d * f - e * e;
  const double c01 = c * e - b * f;
  const double c02 = b * e - c * d;
  const double det = a * c00 + b * c01 + c * c02;
  Mat3 inv;
  inv << c00, c01, c02, c01, a * f - c * c, b * c - a * e, c02, b * c - a * e, a * d - b * b;
  return inv / det;
}

/// G(x) = exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ)).
inline double gaussian_density(const Vec3& x, const Vec3& mean, const Covariance3& cov) {
  const Vec3 r = x - mean;
  return std::exp(-0.5 * r.dot(covariance_inverse(cov) * r));
}

struct DensityGrad {
  Vec3 x;
  Vec3 mean;
  Covariance3 cov;
};

inline DensityGrad gaussian_density_backward(const Vec3& x, const Vec3& mean,
                                             const Covariance3& cov, double grad) {
  const Mat3 inv = covariance_inverse(cov);
  const Vec3 r = x - mean;
  const Vec3 ir = inv * r;
  const double g = std::exp(-0.5 * r.dot(ir)) * grad;
  DensityGrad out;
  out.x = -g * ir;
  out.mean = g * ir;
  // d(Σ⁻¹) = -Σ⁻¹ dΣ Σ⁻¹, so dG/dΣ = ½ G Σ⁻¹ r rᵀ Σ⁻¹.
  out.cov = cov_grad_from_full(0.5 * g * ir * ir.transpose());
  return out;
}

/// Σ̂ = J Σ Jᵀ.
inline Covariance3 transform_covariance(const Covariance3& cov, const Mat3& j) {
  return Covariance3::from_matrix(j * cov.matrix() * j.transpose());
}

struct TransformCovarianceGrad {
  Covariance3 cov;
  Mat3 j;
};

inline TransformCovarianceGrad transform_covariance_backward(const Covariance3& cov,
                                                             const Mat3& j,
                                                             const Covariance3& grad) {
  const Mat3 g = cov_grad_to_full(grad);
  TransformCovarianceGrad out;
  out.cov = cov_grad_from_full(j.transpose() * g * j);
  out.j = 2.0 * g * j * cov.matrix();
  return out;
}

/// One splat in canonical space. Scale and opacity are stored unconstrained
/// (log-scale, logit) and mapped on read.
struct Gaussian3D {
  Vec3 mean_canonical = Vec3::Zero();
  Vec4 rotation = quat_identity();
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  Eigen::Matrix<double, 48, 1> color_feature = Eigen::Matrix<double, 48, 1>::Zero();
  Part part_id = Part::body;
  int tet_index = -1;
  Vec4 barycentric = Vec4::Constant(0.25);

  Vec3 scale() const { return log_scale.array().exp(); }
  double opacity() const { return sigmoid(opacity_logit); }
  Covariance3 covariance() const { return compose_covariance(rotation, scale()); }
};

} // namespace d3ga
