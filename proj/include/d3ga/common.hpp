#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace d3ga {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat34 = Eigen::Matrix<double, 3, 4>;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

/// Avatar layer a Gaussian, cage or triangle belongs to.
enum class Part : std::uint8_t { body = 0, upper = 1, lower = 2, face = 3 };

inline constexpr int kPartCount = 4;

inline std::string_view part_name(Part p) {
  switch (p) {
  case Part::body: return "body";
  case Part::upper: return "upper";
  case Part::lower: return "lower";
  case Part::face: return "face";
  }
  return "?";
}

inline Part part_from_name(std::string_view s);

/// Segmentation palette; index 0..3 = parts, background is black.
inline Vec3 part_color(Part p) {
  switch (p) {
  case Part::body: return {1.0, 0.0, 0.0};
  case Part::upper: return {0.0, 1.0, 0.0};
  case Part::lower: return {0.0, 0.0, 1.0};
  case Part::face: return {1.0, 1.0, 0.0};
  }
  return Vec3::Zero();
}

// ---------------------------------------------------------------------------
// Errors. Every failure the library reports derives from d3ga::Error so
// callers (the CLI in particular) can map them onto exit codes.

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define D3GA_DEFINE_ERROR(Name)                                                \
  class Name : public Error {                                                  \
  public:                                                                      \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {}       \
  }

D3GA_DEFINE_ERROR(NearSingularCovariance);
D3GA_DEFINE_ERROR(DegenerateTet);
D3GA_DEFINE_ERROR(EmptyCage);
D3GA_DEFINE_ERROR(JointCountMismatch);
D3GA_DEFINE_ERROR(NonUnitDirection);
D3GA_DEFINE_ERROR(DimensionMismatch);
D3GA_DEFINE_ERROR(NonFiniteLoss);
D3GA_DEFINE_ERROR(CheckpointWriteFailure);
D3GA_DEFINE_ERROR(FormatError);
D3GA_DEFINE_ERROR(IoError);
D3GA_DEFINE_ERROR(ConfigError);

#undef D3GA_DEFINE_ERROR

inline Part part_from_name(std::string_view s) {
  if (s == "body") return Part::body;
  if (s == "upper") return Part::upper;
  if (s == "lower") return Part::lower;
  if (s == "face") return Part::face;
  throw ConfigError("unknown part '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Quaternions are plain Vec4 in (w, x, y, z) order with the Hamilton product.

inline Vec4 quat_identity() { return {1.0, 0.0, 0.0, 0.0}; }

inline Vec4 quat_mul(const Vec4& a, const Vec4& b) {
  return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
          a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
          a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
          a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

inline Vec4 quat_from_axis_angle(const Vec3& axis, double angle) {
  const Vec3 a = axis.normalized();
  const double s = std::sin(0.5 * angle);
  return {std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s};
}

/// Forces w >= 0 so q and -q serialize identically.
inline Vec4 quat_canonical(const Vec4& q) { return q[0] < 0.0 ? Vec4(-q) : q; }

/// Rotation matrix of a unit quaternion. The polynomial form is used as-is
/// (no normalization) so its derivative is exactly `quat_to_rotation_backward`.
inline Mat3 quat_to_rotation(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
      2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
      2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
  return r;
}

/// Pulls dL/dR back onto the four quaternion components.
inline Vec4 quat_to_rotation_backward(const Vec4& q, const Mat3& g) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4 d;
  d[0] = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) +
                x * g(2, 1));
  d[1] = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) +
                z * g(2, 0) + w * g(2, 1) - 2.0 * x * g(2, 2));
  d[2] = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
                w * g(2, 0) + z * g(2, 1) - 2.0 * y * g(2, 2));
  d[3] = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) -
                2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  return d;
}

inline Vec4 quat_from_rotation(const Mat3& r) {
  Eigen::Quaterniond q(r);
  q.normalize();
  return quat_canonical(Vec4(q.w(), q.x(), q.y(), q.z()));
}

/// q / |q| and its backward.
inline Vec4 normalize_backward(const Vec4& q, const Vec4& g) {
  const double n = q.norm();
  const Vec4 u = q / n;
  return (g - u * u.dot(g)) / n;
}

inline Vec3 normalize_backward(const Vec3& v, const Vec3& g) {
  const double n = v.norm();
  const Vec3 u = v / n;
  return (g - u * u.dot(g)) / n;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Symmetric-matrix gradient conventions: a "full" gradient treats all nine
/// entries as independent; this symmetrizes it so chain rules through
/// symmetric products stay consistent.
inline Mat3 sym(const Mat3& m) { return 0.5 * (m + m.transpose()); }
inline Mat2 sym(const Mat2& m) { return 0.5 * (m + m.transpose()); }

inline bool all_finite(const MatX& m) { return m.allFinite(); }

} // namespace d3ga
